#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use stochgp::features::{rff_init, FeatureMap, MlpSpec};
use stochgp::{Dataset, FeatureMapParams, HyperParams};

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub fn gaussian_vector(len: usize, rng: &mut impl Rng) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.sample(StandardNormal))
}

pub fn random_dataset(n: usize, p: usize, rng: &mut impl Rng) -> Dataset {
    Dataset::new(gaussian_matrix(n, p, rng), gaussian_vector(n, rng)).unwrap()
}

/// `G Gᵀ + shift I`.
pub fn random_spd(d: usize, shift: f64, rng: &mut impl Rng) -> DMatrix<f64> {
    let g = gaussian_matrix(d, d, rng);
    &g * g.transpose() + DMatrix::identity(d, d) * shift
}

/// `p → hidden → d` ReLU network without a final activation.
pub fn small_mlp(p: usize, hidden: usize, d: usize) -> FeatureMap {
    FeatureMap::mlp(MlpSpec {
        layer_dims: vec![p, hidden, d],
        final_activation: false,
    })
    .unwrap()
}

/// MLP parameters whose hidden pre-activations stay away from the ReLU kink
/// on `x`, so central differences are well defined.
pub fn mlp_params_off_kink(map: &FeatureMap, x: &DMatrix<f64>, seed: u64) -> FeatureMapParams {
    let FeatureMap::Mlp(spec) = map else {
        panic!("expected an MLP");
    };
    let (p, h) = (spec.layer_dims[0], spec.layer_dims[1]);
    for attempt in 0..1000 {
        let params = map.init_params(seed + attempt);
        let w1 = DMatrix::from_column_slice(h, p, &params.as_slice()[..h * p]);
        let b1 = &params.as_slice()[h * p..h * p + h];
        let pre = x * w1.transpose();
        let margin = pre
            .row_iter()
            .flat_map(|r| {
                r.iter()
                    .zip(b1)
                    .map(|(v, b)| (v + b).abs())
                    .collect::<Vec<_>>()
            })
            .fold(f64::INFINITY, f64::min);
        if margin > 1e-3 {
            return params;
        }
    }
    panic!("no kink-free parameters found");
}

/// The small instance used by the gradient checks: `n = 5`, `p = 2`,
/// `d = 3`, MLP with 4 hidden units.
pub struct SmallInstance {
    pub map: FeatureMap,
    pub theta: HyperParams,
    pub data: Dataset,
}

pub fn small_instance(seed: u64) -> SmallInstance {
    let mut r = rng(seed);
    let data = random_dataset(5, 2, &mut r);
    let map = small_mlp(2, 4, 3);
    let alpha = mlp_params_off_kink(&map, &data.features, seed * 1000);
    let w = gaussian_vector(3, &mut r);
    let sigma2 = 0.5 + r.random::<f64>();
    SmallInstance {
        map,
        theta: HyperParams::new(w, alpha, sigma2),
        data,
    }
}

pub fn rff_map(
    q: usize,
    num: usize,
    u1: f64,
    u2: f64,
    seed: u64,
) -> (FeatureMap, FeatureMapParams) {
    rff_init(q, num, u1, u2, seed).unwrap()
}

#[allow(unused_imports)]
pub use stochgp::experiment::central_differences as central_diff;

/// Largest per-coordinate relative error over coordinates with
/// `|numeric| > 1e−8`.
pub fn worst_relative(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .filter(|(_, n)| n.abs() > 1e-8)
        .map(|(a, n)| (a - n).abs() / n.abs())
        .fold(0.0, f64::max)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// `max |a − b| / max(1, max |b|)`.
pub fn scaled_diff(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    max_abs_diff(a, b) / scale
}
