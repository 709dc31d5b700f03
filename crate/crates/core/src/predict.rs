//! Posterior prediction for the feature-space GP.

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::features::{FeatureMap, FeatureMapParams};
use crate::linalg::{gram_plus_shift, Cholesky};

/// Predictive mean and variance of `y*` (noise included).
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub mean: DVector<f64>,
    pub variance: DVector<f64>,
}

/// GP posterior with kernel `φ(x)ᵀφ(x')`, computed in feature space:
///
/// ```text
/// mean  = z*ᵀ (ZᵀZ + σ²I)⁻¹ Zᵀy
/// var   = σ² (1 + z*ᵀ (ZᵀZ + σ²I)⁻¹ z*)
/// ```
pub fn posterior(
    map: &FeatureMap,
    alpha: &FeatureMapParams,
    sigma2: f64,
    train: &Dataset,
    test_x: &DMatrix<f64>,
) -> Result<Posterior> {
    if !(sigma2 > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise variance must be positive, got {sigma2}"
        )));
    }
    let z = map.eval(alpha, &train.features)?;
    let z_star = map.eval(alpha, test_x)?;
    let chol = Cholesky::factor(&gram_plus_shift(&z, sigma2))?;
    let w_bar = chol.solve_vec(&z.tr_mul(&train.targets));
    let mean = &z_star * &w_bar;
    // z*ᵀF⁻¹z* for every test row at once.
    let solved = chol.solve_mat(&z_star.transpose());
    let variance = DVector::from_fn(z_star.nrows(), |i, _| {
        sigma2 * (1.0 + z_star.row(i).transpose().dot(&solved.column(i)))
    });
    Ok(Posterior { mean, variance })
}

/// `φ(x*)ᵀw` for a learned ridge vector `w`.
pub fn predict_with_weights(
    map: &FeatureMap,
    alpha: &FeatureMapParams,
    w: &DVector<f64>,
    test_x: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let z = map.eval(alpha, test_x)?;
    if z.ncols() != w.len() {
        return Err(Error::DimensionMismatch {
            what: "ridge weights",
            expected: z.ncols(),
            found: w.len(),
        });
    }
    Ok(z * w)
}

pub fn rmse(pred: &DVector<f64>, truth: &DVector<f64>) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            what: "prediction length",
            expected: truth.len(),
            found: pred.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(((pred - truth).norm_squared() / pred.len() as f64).sqrt())
}
