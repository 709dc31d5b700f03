mod common;

use common::*;
use nalgebra::DMatrix;
use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use stochgp::features::{FeatureMap, FeatureMapParams, MlpSpec};
use stochgp::Error;

fn fd_backward(
    map: &FeatureMap,
    params: &FeatureMapParams,
    x: &DMatrix<f64>,
    upstream: &DMatrix<f64>,
) -> f64 {
    let batch = map.forward(params, x).unwrap();
    let analytic = map.backward(params, &batch, upstream).unwrap();
    let layout = params.layout().to_vec();
    let objective = |flat: &[f64]| {
        let p = FeatureMapParams::new(flat.to_vec(), layout.clone()).unwrap();
        map.eval(&p, x).unwrap().component_mul(upstream).sum()
    };
    let numeric = central_diff(objective, params.as_slice(), FD_STEP);
    worst_relative(&analytic, &numeric)
}

#[test]
fn identity_passes_inputs_through() {
    let map = FeatureMap::identity(2);
    let x = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
    let z = map.eval(&FeatureMapParams::empty(), &x).unwrap();
    assert_eq!(z, x);
}

#[test]
fn zero_network_gives_zero_features() {
    let map = small_mlp(3, 5, 4);
    let params = FeatureMapParams::new(vec![0.0; map.num_params()], map.layout()).unwrap();
    let mut r = rng(1);
    let x = gaussian_matrix(6, 3, &mut r);
    assert!(map.eval(&params, &x).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn mlp_forward_matches_scalar_recomputation() {
    let map = FeatureMap::mlp(MlpSpec {
        layer_dims: vec![3, 4, 2],
        final_activation: false,
    })
    .unwrap();
    let params = map.init_params(11);
    let p = params.as_slice();
    let mut r = rng(2);
    let x: Vec<f64> = gaussian_vector(3, &mut r).iter().copied().collect();

    // Column-major W₁ (4×3), b₁, W₂ (2×4), b₂.
    let w1 = |i: usize, j: usize| p[j * 4 + i];
    let b1 = |i: usize| p[12 + i];
    let w2 = |i: usize, j: usize| p[16 + j * 2 + i];
    let b2 = |i: usize| p[24 + i];
    let mut hidden = [0.0; 4];
    for (i, h) in hidden.iter_mut().enumerate() {
        let mut a = b1(i);
        for (j, xj) in x.iter().enumerate() {
            a += w1(i, j) * xj;
        }
        *h = a.max(0.0);
    }
    let mut expected = [0.0; 2];
    for (i, e) in expected.iter_mut().enumerate() {
        *e = b2(i)
            + hidden
                .iter()
                .enumerate()
                .map(|(j, h)| w2(i, j) * h)
                .sum::<f64>();
    }

    let z = map
        .eval(&params, &DMatrix::from_row_slice(1, 3, &x))
        .unwrap();
    for k in 0..2 {
        assert!((z[(0, k)] - expected[k]).abs() < 1e-12);
    }
}

#[test]
fn zero_upstream_gives_zero_gradient() {
    let map = small_mlp(2, 4, 3);
    let params = map.init_params(3);
    let mut r = rng(3);
    let x = gaussian_matrix(5, 2, &mut r);
    let batch = map.forward(&params, &x).unwrap();
    let grad = map
        .backward(&params, &batch, &DMatrix::zeros(5, 3))
        .unwrap();
    assert_eq!(grad.len(), map.num_params());
    assert!(grad.iter().all(|&g| g == 0.0));
}

#[test]
fn scalar_linear_map_gradient_is_upstream_times_input() {
    let map = FeatureMap::linear(1, 1);
    let params = FeatureMapParams::new(vec![0.7], map.layout()).unwrap();
    let x = DMatrix::from_element(1, 1, 1.5);
    let batch = map.forward(&params, &x).unwrap();
    let grad = map
        .backward(&params, &batch, &DMatrix::from_element(1, 1, -2.0))
        .unwrap();
    assert_eq!(grad, vec![-3.0]);
}

#[test]
fn linear_backward_matches_finite_differences() {
    let mut r = rng(4);
    let map = FeatureMap::linear(3, 4);
    let params = map.init_params(4);
    let x = gaussian_matrix(6, 3, &mut r);
    let u = gaussian_matrix(6, 4, &mut r);
    assert!(fd_backward(&map, &params, &x, &u) < 1e-5);
}

#[test]
fn mlp_backward_matches_finite_differences() {
    for seed in 0..5 {
        let mut r = rng(100 + seed);
        let map = small_mlp(2, 4, 3);
        let x = gaussian_matrix(5, 2, &mut r);
        let params = mlp_params_off_kink(&map, &x, seed * 31);
        let u = gaussian_matrix(5, 3, &mut r);
        let err = fd_backward(&map, &params, &x, &u);
        assert!(err < 1e-5, "seed {seed}: {err:e}");
    }
}

#[test]
fn rff_backward_matches_finite_differences() {
    let mut r = rng(5);
    let (map, params) = rff_map(3, 50, 1.3, 0.8, 5);
    let x = gaussian_matrix(4, 3, &mut r);
    let u = gaussian_matrix(4, 50, &mut r);
    assert!(fd_backward(&map, &params, &x, &u) < 1e-5);
}

#[test]
fn composed_backward_matches_finite_differences() {
    let mut r = rng(6);
    let inner = small_mlp(2, 4, 3);
    let (outer, outer_params) = rff_map(3, 20, 1.1, 0.9, 6);
    let x = gaussian_matrix(5, 2, &mut r);
    let inner_params = mlp_params_off_kink(&inner, &x, 6);
    let map = FeatureMap::compose(outer, inner).unwrap();
    let mut flat = inner_params.as_slice().to_vec();
    flat.extend_from_slice(outer_params.as_slice());
    let params = FeatureMapParams::new(flat, map.layout()).unwrap();
    let u = gaussian_matrix(5, 20, &mut r);
    assert!(fd_backward(&map, &params, &x, &u) < 1e-5);
}

#[test]
fn composition_chains_forward_passes() {
    let mut r = rng(7);
    let identity = FeatureMap::compose(FeatureMap::identity(3), FeatureMap::identity(3)).unwrap();
    let x = gaussian_matrix(4, 3, &mut r);
    assert_eq!(identity.eval(&FeatureMapParams::empty(), &x).unwrap(), x);

    let inner = small_mlp(3, 6, 2);
    let inner_params = inner.init_params(7);
    let (outer, outer_params) = rff_map(2, 30, 0.7, 1.4, 7);
    let staged = outer
        .eval(&outer_params, &inner.eval(&inner_params, &x).unwrap())
        .unwrap();
    let map = FeatureMap::compose(outer, inner).unwrap();
    let mut flat = inner_params.as_slice().to_vec();
    flat.extend_from_slice(outer_params.as_slice());
    let params = FeatureMapParams::new(flat, map.layout()).unwrap();
    assert!((map.eval(&params, &x).unwrap() - staged).norm() < 1e-12);
}

#[test]
fn composition_rejects_dimension_mismatch() {
    let err = FeatureMap::compose(FeatureMap::identity(3), FeatureMap::linear(2, 4)).unwrap_err();
    assert!(matches!(err, Error::DimensionMismatch { .. }));
    let map = FeatureMap::linear(2, 4);
    let params = map.init_params(0);
    assert!(map.forward(&params, &DMatrix::zeros(1, 3)).is_err());
}

#[test]
fn stale_cache_is_detected() {
    let map = FeatureMap::linear(2, 2);
    let mut params = map.init_params(0);
    let batch = map
        .forward(&params, &DMatrix::from_element(1, 2, 1.0))
        .unwrap();
    params.update(|p| p[0] += 1.0);
    let err = map
        .backward(&params, &batch, &DMatrix::zeros(1, 2))
        .unwrap_err();
    assert!(matches!(err, Error::StaleCache));
}

#[test]
fn rff_self_inner_product_concentrates_on_magnitude() {
    let (u1, u2) = (1.7, 2.5);
    let mut r = rng(8);
    let z = gaussian_matrix(1, 4, &mut r);
    let mean = (0..200)
        .map(|seed| {
            let (map, params) = rff_map(4, 1000, u1, u2, seed);
            map.eval(&params, &z).unwrap().norm_squared()
        })
        .sum::<f64>()
        / 200.0;
    assert!((mean - u2).abs() < 0.02 * u2, "mean {mean}");
}

#[test]
fn rff_amplitude_scaling_and_determinism() {
    let mut r = rng(9);
    let x = gaussian_matrix(3, 2, &mut r);
    let (map, p1) = rff_map(2, 64, 1.0, 1.0, 9);
    let (map2, p2) = rff_map(2, 64, 1.0, 2.0, 9);
    assert_eq!(map, map2);
    let z1 = map.eval(&p1, &x).unwrap();
    let z2 = map.eval(&p2, &x).unwrap();
    assert!((&z1 * 2f64.sqrt() - &z2).norm() < 1e-12);
    let k1 = &z1 * z1.transpose();
    let k2 = &z2 * z2.transpose();
    assert!((k1 * 2.0 - k2).norm() < 1e-12);
    assert!(stochgp::features::rff_init(2, 64, 0.0, 1.0, 0).is_err());
    assert!(stochgp::features::rff_init(2, 64, 1.0, -1.0, 0).is_err());
}

/// `Var[φ(z)ᵀφ(z′)] = u₂²(1 − k² + k⁴/2)/D` with `k = exp(−r²/2)`,
/// `r = ‖z − z′‖/u₁`.
fn rff_error_sd(r: f64, u2: f64, num: usize) -> f64 {
    let k = (-r * r / 2.0).exp();
    u2 * ((1.0 - k * k + k.powi(4) / 2.0) / num as f64).sqrt()
}

#[test]
fn rff_single_draw_errors_follow_analytic_variance() {
    let (u1, u2, num) = (1.3, 0.7, 1000);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut r = rng(10);
    let trials = 1000;
    let (mut sum, mut sum_sq, mut within, mut predicted) = (0.0, 0.0, 0usize, 0.0);
    for seed in 0..trials {
        let (map, params) = rff_map(3, num, u1, u2, 1000 + seed);
        let a = gaussian_vector(3, &mut r);
        let dir = gaussian_vector(3, &mut r).normalize();
        let ratio = 3.0 * rand::Rng::random::<f64>(&mut r);
        let b = &a + dir * (ratio * u1);
        let x = DMatrix::from_rows(&[a.transpose(), b.transpose()]);
        let z = map.eval(&params, &x).unwrap();
        let err = z.row(0).dot(&z.row(1)) - u2 * (-ratio * ratio / 2.0).exp();
        let sd = rff_error_sd(ratio, u2, num);
        sum += err / sd;
        sum_sq += (err / sd).powi(2);
        within += usize::from(err.abs() <= 0.05 * u2);
        predicted += 2.0 * normal.cdf(0.05 * u2 / sd) - 1.0;
    }
    let t = trials as f64;
    assert!((sum / t).abs() < 3.0 / t.sqrt(), "mean {}", sum / t);
    assert!(
        (sum_sq / t - 1.0).abs() < 3.0 * (2.0 / t).sqrt(),
        "second moment {}",
        sum_sq / t
    );
    let (observed, expected) = (within as f64 / t, predicted / t);
    let se = (expected * (1.0 - expected) / t).sqrt();
    assert!(
        (observed - expected).abs() < 4.0 * se,
        "{observed} vs {expected}"
    );
}

#[test]
fn snapshot_and_named_round_trips() {
    let map = small_mlp(3, 4, 2);
    let params = map.init_params(12);
    let named = params.named();
    assert_eq!(
        named.iter().map(|(_, _, v)| v.len()).sum::<usize>(),
        params.len()
    );
    assert_eq!(FeatureMapParams::from_named(named).unwrap(), params);
    let bytes = params.to_snapshot();
    assert_eq!(FeatureMapParams::from_snapshot(&bytes).unwrap(), params);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_rows_match_single_sample_evaluation(seed in 0u64..1000, rows in 1usize..6) {
        let mut r = rng(seed);
        let map = small_mlp(3, 5, 2);
        let params = map.init_params(seed);
        let x = gaussian_matrix(rows, 3, &mut r);
        let z = map.eval(&params, &x).unwrap();
        for i in 0..rows {
            let single = map.eval(&params, &x.rows(i, 1).into_owned()).unwrap();
            prop_assert!((z.row(i) - single.row(0)).norm() < 1e-12);
        }
    }

    #[test]
    fn backward_is_linear_in_upstream(seed in 0u64..1000, c in -3.0f64..3.0) {
        let mut r = rng(seed);
        let map = small_mlp(2, 3, 2);
        let params = map.init_params(seed);
        let x = gaussian_matrix(4, 2, &mut r);
        let u = gaussian_matrix(4, 2, &mut r);
        let v = gaussian_matrix(4, 2, &mut r);
        let batch = map.forward(&params, &x).unwrap();
        let gu = map.backward(&params, &batch, &u).unwrap();
        let gv = map.backward(&params, &batch, &v).unwrap();
        let gw = map.backward(&params, &batch, &(&u * c + &v)).unwrap();
        let expect: Vec<f64> = gu.iter().zip(&gv).map(|(a, b)| c * a + b).collect();
        prop_assert!(scaled_diff(&gw, &expect) < 1e-12);
    }

    #[test]
    fn named_round_trip_is_identity(seed in 0u64..1000) {
        let inner = small_mlp(2, 3, 2);
        let (outer, _) = rff_map(2, 8, 1.0, 1.0, seed);
        let map = FeatureMap::compose(outer, inner).unwrap();
        let params = map.init_params(seed);
        prop_assert_eq!(FeatureMapParams::from_named(params.named()).unwrap(), params.clone());
    }
}
