//! The feature-space marginal-likelihood objective.
//!
//! With `Z = Z(α)` (`n × d`) and `F(θ) = ZᵀZ + σ²I`, the loss
//!
//! ```text
//! l(θ) = ‖Zw − y‖²/σ² + ‖w‖² + log|F(θ)| + (n − d) log σ²
//! ```
//!
//! splits into per-sample pieces `g_i` and `F_i` with
//! `l(θ) = Σ g_i(θ) + log|Σ F_i(θ)|`, and `min_w l(θ)` equals the kernel-space
//! negative log evidence `yᵀ(K + σ²I)⁻¹y + log|K + σ²I|` with `K = ZZᵀ`.
//! The `(n − d) log σ²` term is the Sylvester correction between the `n × n`
//! and `d × d` determinants; it stays valid when `d > n`.

use nalgebra::{DMatrix, DVector};

use crate::data::{Dataset, IndexBatch};
use crate::error::{Error, Result};
use crate::features::{FeatureBatch, FeatureMap, FeatureMapParams};
use crate::linalg::{gram_plus_shift, Cholesky};

/// `θ = (w, α, σ²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    pub w: DVector<f64>,
    pub alpha: FeatureMapParams,
    pub sigma2: f64,
}

impl HyperParams {
    pub fn new(w: DVector<f64>, alpha: FeatureMapParams, sigma2: f64) -> Self {
        Self { w, alpha, sigma2 }
    }

    /// `w = 0`, seeded map parameters and the given noise variance.
    pub fn init(map: &FeatureMap, seed: u64, sigma2: f64) -> Self {
        Self {
            w: DVector::zeros(map.output_dim()),
            alpha: map.init_params(seed),
            sigma2,
        }
    }

    /// Number of scalar coordinates `d + m + 1`.
    pub fn len(&self) -> usize {
        self.w.len() + self.alpha.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `[w, α, σ²]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        out.extend(self.w.iter());
        out.extend_from_slice(self.alpha.as_slice());
        out.push(self.sigma2);
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::DimensionMismatch {
                what: "flat hyperparameters",
                expected: self.len(),
                found: flat.len(),
            });
        }
        let d = self.w.len();
        let m = self.alpha.len();
        self.w.copy_from_slice(&flat[..d]);
        self.alpha.set_values(&flat[d..d + m])?;
        self.sigma2 = flat[d + m];
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.sigma2.is_finite()
            && self.w.iter().all(|v| v.is_finite())
            && self.alpha.as_slice().iter().all(|v| v.is_finite())
    }

    fn check_sigma(&self) -> Result<()> {
        if !(self.sigma2 > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise variance must be positive, got {}",
                self.sigma2
            )));
        }
        Ok(())
    }
}

/// Gradient with respect to `θ = (w, α, σ²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaGrad {
    pub w: DVector<f64>,
    pub alpha: Vec<f64>,
    pub sigma2: f64,
}

impl ThetaGrad {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.w.len() + self.alpha.len() + 1);
        out.extend(self.w.iter());
        out.extend_from_slice(&self.alpha);
        out.push(self.sigma2);
        out
    }

    pub fn norm(&self) -> f64 {
        self.to_flat().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.w *= factor;
        self.alpha.iter_mut().for_each(|v| *v *= factor);
        self.sigma2 *= factor;
    }
}

/// A symmetric `d × d` matrix such as `F(θ)`, a single `F_i`, or a tracked estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct InformationMatrix(DMatrix<f64>);

impl InformationMatrix {
    /// Accepts `m` if square and symmetric to `1e−12 · ‖m‖`.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::DimensionMismatch {
                what: "information matrix (square)",
                expected: m.nrows(),
                found: m.ncols(),
            });
        }
        let asym = (&m - m.transpose()).norm();
        if asym > 1e-12 * m.norm() {
            return Err(Error::InvalidArgument(format!(
                "information matrix is not symmetric (‖M − Mᵀ‖ = {asym:e})"
            )));
        }
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }
}

/// `g_i` evaluated from the sample's feature vector `φ_i`.
pub fn g_term(phi: &DVector<f64>, w: &DVector<f64>, y: f64, sigma2: f64, n: usize) -> Result<f64> {
    if !(sigma2 > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise variance must be positive, got {sigma2}"
        )));
    }
    let d = phi.len() as f64;
    let n = n as f64;
    let r = phi.dot(w) - y;
    Ok(r * r / sigma2 + w.norm_squared() / n + (n - d) / n * sigma2.ln())
}

/// `g_i(θ) = (φ_α(x_i)ᵀw − y_i)²/σ² + ‖w‖²/n + (n − d) log σ² / n`.
pub fn g_i(
    map: &FeatureMap,
    theta: &HyperParams,
    x_i: &DVector<f64>,
    y_i: f64,
    n: usize,
) -> Result<f64> {
    theta.check_sigma()?;
    let phi = features_of(map, &theta.alpha, x_i)?;
    g_term(&phi, &theta.w, y_i, theta.sigma2, n)
}

/// `F_i` from a feature vector: `φφᵀ + (σ²/n) I`.
pub fn info_term(phi: &DVector<f64>, sigma2: f64, n: usize) -> InformationMatrix {
    let mut m = phi * phi.transpose();
    let shift = sigma2 / n as f64;
    for k in 0..m.nrows() {
        m[(k, k)] += shift;
    }
    InformationMatrix(m)
}

/// `F_i(θ) = φ_α(x_i)φ_α(x_i)ᵀ + (σ²/n) I`.
pub fn f_i(
    map: &FeatureMap,
    theta: &HyperParams,
    x_i: &DVector<f64>,
    n: usize,
) -> Result<InformationMatrix> {
    theta.check_sigma()?;
    let phi = features_of(map, &theta.alpha, x_i)?;
    Ok(info_term(&phi, theta.sigma2, n))
}

fn features_of(
    map: &FeatureMap,
    alpha: &FeatureMapParams,
    x_i: &DVector<f64>,
) -> Result<DVector<f64>> {
    let x = DMatrix::from_row_slice(1, x_i.len(), x_i.as_slice());
    let z = map.eval(alpha, &x)?;
    Ok(z.row(0).transpose())
}

/// `h(A) = log|A|` via Cholesky.
pub fn logdet_psd(a: &InformationMatrix) -> Result<f64> {
    Ok(Cholesky::factor(&a.0)?.logdet())
}

/// `F(θ) = ZᵀZ + σ²I` over the whole dataset.
pub fn information_matrix(
    map: &FeatureMap,
    alpha: &FeatureMapParams,
    sigma2: f64,
    data: &Dataset,
) -> Result<InformationMatrix> {
    let z = map.eval(alpha, &data.features)?;
    Ok(InformationMatrix(gram_plus_shift(&z, sigma2)))
}

/// `l(θ)` from precomputed features.
pub fn loss_from_features(
    z: &DMatrix<f64>,
    y: &DVector<f64>,
    w: &DVector<f64>,
    sigma2: f64,
) -> Result<f64> {
    let n = z.nrows() as f64;
    let d = z.ncols() as f64;
    let resid = z * w - y;
    let logdet = Cholesky::factor(&gram_plus_shift(z, sigma2))?.logdet();
    Ok(resid.norm_squared() / sigma2 + w.norm_squared() + logdet + (n - d) * sigma2.ln())
}

/// `l(θ) = ‖Zw − y‖²/σ² + ‖w‖² + log|F(θ)| + (n − d) log σ²`.
pub fn full_loss(map: &FeatureMap, theta: &HyperParams, data: &Dataset) -> Result<f64> {
    theta.check_sigma()?;
    let z = map.eval(&theta.alpha, &data.features)?;
    loss_from_features(&z, &data.targets, &theta.w, theta.sigma2)
}

/// `ŵ = (ZᵀZ + σ²I)⁻¹ Zᵀy`, the minimizer of `‖Zw − y‖²/σ² + ‖w‖²`.
pub fn ridge_closed_form(z: &DMatrix<f64>, y: &DVector<f64>, sigma2: f64) -> Result<DVector<f64>> {
    if !(sigma2 > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise variance must be positive, got {sigma2}"
        )));
    }
    if z.nrows() != y.len() {
        return Err(Error::DimensionMismatch {
            what: "ridge rows vs targets",
            expected: z.nrows(),
            found: y.len(),
        });
    }
    let chol = Cholesky::factor(&gram_plus_shift(z, sigma2))?;
    Ok(chol.solve_vec(&z.tr_mul(y)))
}

/// `min_w l(θ)` evaluated in feature space at `O(nd² + d³)`:
/// `(‖y‖² − yᵀZŵ)/σ² + log|ZᵀZ + σ²I| + (n − d) log σ²`.
pub fn profiled_loss(z: &DMatrix<f64>, y: &DVector<f64>, sigma2: f64) -> Result<f64> {
    let n = z.nrows() as f64;
    let d = z.ncols() as f64;
    let chol = Cholesky::factor(&gram_plus_shift(z, sigma2))?;
    let zty = z.tr_mul(y);
    let w_hat = chol.solve_vec(&zty);
    let quad = (y.norm_squared() - zty.dot(&w_hat)) / sigma2;
    Ok(quad + chol.logdet() + (n - d) * sigma2.ln())
}

/// `yᵀ(K + σ²I)⁻¹y + log|K + σ²I|` with `K = ZZᵀ`, built explicitly (`n × n`).
pub fn kernel_nll(z: &DMatrix<f64>, y: &DVector<f64>, sigma2: f64) -> Result<f64> {
    if !(sigma2 > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise variance must be positive, got {sigma2}"
        )));
    }
    let mut k = z * z.transpose();
    for i in 0..k.nrows() {
        k[(i, i)] += sigma2;
    }
    let chol = Cholesky::factor(&k)?;
    Ok(chol.quad_form(y) + chol.logdet())
}

/// Kernel-space negative log evidence (up to the `n log 2π` constant and the
/// factor 1/2). Forms the `n × n` covariance, so test scale only.
pub fn exact_nll_oracle(
    map: &FeatureMap,
    alpha: &FeatureMapParams,
    sigma2: f64,
    data: &Dataset,
) -> Result<f64> {
    let z = map.eval(alpha, &data.features)?;
    kernel_nll(&z, &data.targets, sigma2)
}

/// The per-sample negative log marginal likelihood reported by the harness:
/// `(raw + n log 2π) / (2n)` where `raw` is the kernel-space value.
pub fn normalized_nll(raw: f64, n: usize) -> f64 {
    let n = n as f64;
    (raw + n * (2.0 * std::f64::consts::PI).ln()) / (2.0 * n)
}

/// Both sides of `bᵀ(VVᵀ + λI)⁻¹b = min_w ‖Vw − b‖²/λ + ‖w‖²`.
///
/// The left side factors the `n × n` matrix; the right side evaluates the
/// objective at the ridge minimizer.
pub fn ridge_identity_check(v: &DMatrix<f64>, b: &DVector<f64>, lambda: f64) -> Result<(f64, f64)> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    let mut outer = v * v.transpose();
    for i in 0..outer.nrows() {
        outer[(i, i)] += lambda;
    }
    let lhs = Cholesky::factor(&outer)?.quad_form(b);
    let w_hat = ridge_closed_form(v, b, lambda)?;
    let rhs = (v * &w_hat - b).norm_squared() / lambda + w_hat.norm_squared();
    Ok((lhs, rhs))
}

/// How the linearized log-det weight `M` enters the per-sample gradient.
pub(crate) enum Weight<'a> {
    /// An explicit (not necessarily symmetric) matrix.
    Matrix(&'a DMatrix<f64>),
    /// `M = A⁻¹` applied through a factorization.
    Inverse(&'a Cholesky),
}

impl Weight<'_> {
    /// Rows `(M + Mᵀ) φ_i` for each row `φ_i` of `z`, and `trace(M)`.
    fn apply(&self, z: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
        match self {
            Weight::Matrix(m) => (z * (*m + m.transpose()), m.trace()),
            Weight::Inverse(chol) => {
                // A⁻¹ = U⁻¹U⁻ᵀ, so both products are plain matrix multiplies.
                let uinv = chol.factor_inverse();
                let half = z * &uinv;
                (half * uinv.transpose() * 2.0, uinv.norm_squared())
            }
        }
    }
}

/// Sum over the batch of `∇_θ [g_i(θ) + ⟨M, F_i(θ)⟩]`, also returning the
/// batch features.
pub(crate) fn linearized_gradient(
    map: &FeatureMap,
    theta: &HyperParams,
    batch: &IndexBatch,
    data: &Dataset,
    weight: Weight<'_>,
) -> Result<(ThetaGrad, FeatureBatch)> {
    theta.check_sigma()?;
    let d = map.output_dim();
    if theta.w.len() != d {
        return Err(Error::DimensionMismatch {
            what: "ridge weights",
            expected: d,
            found: theta.w.len(),
        });
    }
    let fb = map.forward(&theta.alpha, &data.rows(&batch.indices))?;
    let grad = linearized_gradient_from(map, theta, batch, data, &fb, weight)?;
    Ok((grad, fb))
}

/// As [`linearized_gradient`], reusing features computed at `theta`.
pub(crate) fn linearized_gradient_from(
    map: &FeatureMap,
    theta: &HyperParams,
    batch: &IndexBatch,
    data: &Dataset,
    fb: &FeatureBatch,
    weight: Weight<'_>,
) -> Result<ThetaGrad> {
    let d = map.output_dim();
    let n = batch.n as f64;
    let s = batch.size() as f64;
    let sigma2 = theta.sigma2;
    let y = data.targets_at(&batch.indices);
    let z = &fb.z;
    let resid = z * &theta.w - y;

    let grad_w = z.tr_mul(&resid) * (2.0 / sigma2) + &theta.w * (2.0 * s / n);
    let (mut upstream, weight_trace) = weight.apply(z);
    upstream.ger(2.0 / sigma2, &resid, &theta.w, 1.0);
    let grad_alpha = map.backward(&theta.alpha, fb, &upstream)?;
    let grad_sigma2 = -resid.norm_squared() / (sigma2 * sigma2)
        + s * (n - d as f64) / (n * sigma2)
        + s * weight_trace / n;

    Ok(ThetaGrad {
        w: grad_w,
        alpha: grad_alpha,
        sigma2: grad_sigma2,
    })
}

/// `Σ_{i∈batch} ∇_θ [g_i(θ) + ⟨M, F_i(θ)⟩]` with `M` held fixed.
pub fn grad_theta_of_linearized(
    map: &FeatureMap,
    theta: &HyperParams,
    batch: &IndexBatch,
    m: &InformationMatrix,
    data: &Dataset,
) -> Result<ThetaGrad> {
    if m.dim() != map.output_dim() {
        return Err(Error::DimensionMismatch {
            what: "linearization weight",
            expected: map.output_dim(),
            found: m.dim(),
        });
    }
    Ok(linearized_gradient(map, theta, batch, data, Weight::Matrix(m.matrix()))?.0)
}

/// `∇ l(θ)`: the full-batch linearized gradient at `M = F(θ)⁻¹`.
pub fn full_loss_gradient(
    map: &FeatureMap,
    theta: &HyperParams,
    data: &Dataset,
) -> Result<ThetaGrad> {
    theta.check_sigma()?;
    let f = information_matrix(map, &theta.alpha, theta.sigma2, data)?;
    let chol = Cholesky::factor(f.matrix())?;
    Ok(linearized_gradient(
        map,
        theta,
        &IndexBatch::full(data.len()),
        data,
        Weight::Inverse(&chol),
    )?
    .0)
}
