mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use stochgp::features::{FeatureMap, FeatureMapParams};
use stochgp::predict::{posterior, predict_with_weights, rmse};
use stochgp::Dataset;

#[test]
fn zero_features_give_prior_predictive() {
    let mut r = rng(1);
    let map = FeatureMap::linear(3, 2);
    let alpha = FeatureMapParams::new(vec![0.0; 6], map.layout()).unwrap();
    let train = random_dataset(8, 3, &mut r);
    let test = gaussian_matrix(4, 3, &mut r);
    let post = posterior(&map, &alpha, 0.6, &train, &test).unwrap();
    assert!(post.mean.iter().all(|&m| m == 0.0));
    assert!(post.variance.iter().all(|&v| (v - 0.6).abs() < 1e-15));

    // Identity features: σ²(1 + ‖z*‖²/σ²) when Z = 0.
    let zero_train = Dataset::new(DMatrix::zeros(5, 3), gaussian_vector(5, &mut r)).unwrap();
    let post = posterior(
        &FeatureMap::identity(3),
        &FeatureMapParams::empty(),
        0.6,
        &zero_train,
        &test,
    )
    .unwrap();
    for i in 0..4 {
        assert!((post.variance[i] - (0.6 + test.row(i).norm_squared())).abs() < 1e-12);
    }
}

#[test]
fn interpolates_training_targets_in_the_noiseless_limit() {
    let x = DMatrix::from_row_slice(1, 1, &[1.3]);
    let train = Dataset::new(x.clone(), DVector::from_element(1, -0.8)).unwrap();
    let post = posterior(
        &FeatureMap::identity(1),
        &FeatureMapParams::empty(),
        1e-8,
        &train,
        &x,
    )
    .unwrap();
    assert!((post.mean[0] + 0.8).abs() < 1e-3);
}

#[test]
fn rmse_examples() {
    let y = DVector::from_vec(vec![1.0, -2.0]);
    assert_eq!(rmse(&y, &y).unwrap(), 0.0);
    let pred = DVector::from_vec(vec![4.0, 2.0]);
    assert!((rmse(&pred, &y).unwrap() - 12.5f64.sqrt()).abs() < 1e-15);
    assert!(rmse(&pred, &DVector::zeros(3)).is_err());
}

#[test]
fn learned_weights_predict_through_the_map() {
    let mut r = rng(2);
    let map = FeatureMap::linear(2, 3);
    let alpha = map.init_params(2);
    let w = gaussian_vector(3, &mut r);
    let x = gaussian_matrix(4, 2, &mut r);
    let expected = map.eval(&alpha, &x).unwrap() * &w;
    assert_eq!(
        predict_with_weights(&map, &alpha, &w, &x).unwrap(),
        expected
    );
    assert!(predict_with_weights(&map, &alpha, &DVector::zeros(2), &x).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn feature_and_kernel_forms_agree(seed in any::<u64>(), n in 1usize..300, s2 in 1e-2f64..3.0) {
        let mut r = rng(seed);
        let map = small_mlp(3, 6, 4);
        let alpha = map.init_params(seed);
        let train = random_dataset(n, 3, &mut r);
        let test = gaussian_matrix(5, 3, &mut r);
        let post = posterior(&map, &alpha, s2, &train, &test).unwrap();

        let z = map.eval(&alpha, &train.features).unwrap();
        let zs = map.eval(&alpha, &test).unwrap();
        let k = &z * z.transpose() + DMatrix::identity(n, n) * s2;
        let chol = k.cholesky().unwrap();
        let k_star = &zs * z.transpose();
        let mean = &k_star * chol.solve(&train.targets);
        prop_assert!((&post.mean - &mean).norm() <= 1e-8 * (1.0 + mean.norm()));
        let solved = chol.solve(&k_star.transpose());
        for i in 0..5 {
            let var = zs.row(i).norm_squared() - k_star.row(i).dot(&solved.column(i).transpose()) + s2;
            prop_assert!((post.variance[i] - var).abs() <= 1e-8 * (1.0 + var));
            prop_assert!(post.variance[i] >= s2 - 1e-10);
        }
    }

    #[test]
    fn rmse_matches_scalar_loop(seed in any::<u64>(), t in 1usize..30) {
        let mut r = rng(seed);
        let a = gaussian_vector(t, &mut r);
        let b = gaussian_vector(t, &mut r);
        let mut acc = 0.0;
        for i in 0..t {
            acc += (a[i] - b[i]) * (a[i] - b[i]);
        }
        prop_assert!((rmse(&a, &b).unwrap() - (acc / t as f64).sqrt()).abs() < 1e-14);
    }
}
