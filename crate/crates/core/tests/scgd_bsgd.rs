mod common;

use common::*;
use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;

use stochgp::data::{BatchSampler, IndexBatch, Sampling};
use stochgp::objective::{
    full_loss_gradient, grad_theta_of_linearized, information_matrix, InformationMatrix,
};
use stochgp::optim::{
    batch_loss, bsgd_direction, bsgd_step, scgd_direction, scgd_step, Checkpoint, MinimaxConfig,
    OptimizerKind, ScgdState, Schedule, ScheduleKind, StepRule, Trainer, TrainerConfig,
};
use stochgp::{Error, FeatureMap};

#[test]
fn full_batch_scgd_is_gradient_descent() {
    let inst = small_instance(1);
    let mut state = ScgdState::new(&inst.map, inst.theta.clone(), &inst.data).unwrap();
    // Start the tracker somewhere else so b_t = 1 has to overwrite it.
    state.f_tilde *= 3.0;
    let full = IndexBatch::full(5);
    let (dir, f_next) = scgd_direction(&inst.map, &state, &full, 1.0, &inst.data).unwrap();
    let f =
        information_matrix(&inst.map, &inst.theta.alpha, inst.theta.sigma2, &inst.data).unwrap();
    assert!((&f_next - f.matrix()).norm() <= 1e-12 * f.matrix().norm());
    let grad = full_loss_gradient(&inst.map, &inst.theta, &inst.data).unwrap();
    assert!(scaled_diff(&dir.to_flat(), &grad.to_flat()) < 1e-12);
}

#[test]
fn scgd_direction_linearizes_at_refreshed_tracker() {
    let inst = small_instance(2);
    let state = ScgdState::new(&inst.map, inst.theta.clone(), &inst.data).unwrap();
    let batch = IndexBatch::new(vec![2, 2, 4], 5).unwrap();
    let (dir, f_next) = scgd_direction(&inst.map, &state, &batch, 0.4, &inst.data).unwrap();

    let z = inst
        .map
        .eval(&inst.theta.alpha, &inst.data.rows(&batch.indices))
        .unwrap();
    let mut expected = &state.f_tilde * 0.6 + z.tr_mul(&z) * (0.4 * 5.0 / 3.0);
    for k in 0..3 {
        expected[(k, k)] += 0.4 * inst.theta.sigma2;
    }
    assert!((&f_next - &expected).norm() < 1e-12 * expected.norm());

    let m = InformationMatrix::new(f_next.clone().try_inverse().unwrap()).unwrap();
    let m = InformationMatrix::new((m.matrix() + m.matrix().transpose()) * 0.5).unwrap();
    let via_weight =
        grad_theta_of_linearized(&inst.map, &inst.theta, &batch, &m, &inst.data).unwrap();
    assert!(scaled_diff(&dir.to_flat(), &via_weight.to_flat()) < 1e-10);
}

#[test]
fn frozen_primal_still_tracks() {
    let inst = small_instance(3);
    let state = ScgdState::new(&inst.map, inst.theta.clone(), &inst.data).unwrap();
    let batch = IndexBatch::new(vec![0, 1], 5).unwrap();
    let next = scgd_step(&inst.map, &state, &batch, 0.0, 0.5, &inst.data, 1e-3).unwrap();
    assert_eq!(next.theta, state.theta);
    assert_eq!(next.t, 1);
    let (_, f_next) = scgd_direction(&inst.map, &state, &batch, 0.5, &inst.data).unwrap();
    assert_eq!(next.f_tilde, f_next);
    assert_ne!(next.f_tilde, state.f_tilde);
}

#[test]
fn averaging_weight_must_be_in_unit_interval() {
    let inst = small_instance(4);
    let state = ScgdState::new(&inst.map, inst.theta.clone(), &inst.data).unwrap();
    let batch = IndexBatch::full(5);
    for b in [0.0, -0.1, 1.5] {
        assert!(scgd_direction(&inst.map, &state, &batch, b, &inst.data).is_err());
    }
}

#[test]
fn tracker_failure_reports_iteration() {
    let inst = small_instance(5);
    let mut state = ScgdState::new(&inst.map, inst.theta.clone(), &inst.data).unwrap();
    state.t = 17;
    state.f_tilde[(0, 0)] = f64::NAN;
    let err = scgd_direction(&inst.map, &state, &IndexBatch::full(5), 0.5, &inst.data).unwrap_err();
    assert!(
        matches!(err, Error::AtIteration { iteration: 17, .. }),
        "{err}"
    );
}

#[test]
fn tracker_is_floored_when_indefinite() {
    let inst = small_instance(6);
    let mut state = ScgdState::new(&inst.map, inst.theta.clone(), &inst.data).unwrap();
    state.f_tilde = -DMatrix::identity(3, 3) * 50.0;
    let batch = IndexBatch::new(vec![0], 5).unwrap();
    let (_, f_next) = scgd_direction(&inst.map, &state, &batch, 0.1, &inst.data).unwrap();
    let eig = f_next.symmetric_eigen().eigenvalues;
    assert!(eig.iter().all(|&l| l >= 1e-10 * (1.0 - 1e-6)));
}

#[test]
fn optimizers_coincide_at_full_batch() {
    for seed in 0..5 {
        let inst = small_instance(10 + seed);
        let state = ScgdState::new(&inst.map, inst.theta.clone(), &inst.data).unwrap();
        let full = IndexBatch::full(5);
        let (scgd, _) = scgd_direction(&inst.map, &state, &full, 1.0, &inst.data).unwrap();
        let bsgd = bsgd_direction(&inst.map, &inst.theta, &full, &inst.data).unwrap();
        assert!(max_abs_diff(&scgd.to_flat(), &bsgd.to_flat()) <= 1e-12 * (1.0 + bsgd.norm()));
    }
}

#[test]
fn bsgd_full_batch_is_unbiased() {
    let inst = small_instance(20);
    let grad = full_loss_gradient(&inst.map, &inst.theta, &inst.data).unwrap();
    let bsgd = bsgd_direction(&inst.map, &inst.theta, &IndexBatch::full(5), &inst.data).unwrap();
    assert!(scaled_diff(&bsgd.to_flat(), &grad.to_flat()) < 1e-12);
}

#[test]
fn bsgd_direction_matches_finite_differences() {
    for seed in 0..4 {
        let inst = small_instance(30 + seed);
        let batch = IndexBatch::new(vec![0, 3], 5).unwrap();
        let analytic = bsgd_direction(&inst.map, &inst.theta, &batch, &inst.data)
            .unwrap()
            .to_flat();
        let loss = |flat: &[f64]| {
            let mut theta = inst.theta.clone();
            theta.set_flat(flat).unwrap();
            batch_loss(&inst.map, &theta, &batch, &inst.data).unwrap()
        };
        let numeric = central_diff(loss, &inst.theta.to_flat(), FD_STEP);
        assert!(worst_relative(&analytic, &numeric) < 1e-5);
    }
}

#[test]
fn bsgd_expected_direction_is_biased() {
    let mut r = rng(40);
    let data = random_dataset(4, 2, &mut r);
    let map = small_mlp(2, 4, 3);
    let alpha = mlp_params_off_kink(&map, &data.features, 40);
    let theta = stochgp::HyperParams::new(gaussian_vector(3, &mut r), alpha, 0.8);
    let full = full_loss_gradient(&map, &theta, &data).unwrap().to_flat();
    let mut mean = vec![0.0; full.len()];
    for i in 0..4 {
        for j in 0..4 {
            let batch = IndexBatch::new(vec![i, j], 4).unwrap();
            let g = bsgd_direction(&map, &theta, &batch, &data)
                .unwrap()
                .to_flat();
            // (n/s) rescaling makes the g-part unbiased; the log-det part is not.
            mean.iter_mut()
                .zip(&g)
                .for_each(|(m, v)| *m += 2.0 * v / 16.0);
        }
    }
    let gap = max_abs_diff(&mean, &full);
    assert!(gap > 1e-6, "gap {gap:e}");
}

#[test]
fn bsgd_clamps_noise_variance() {
    let inst = small_instance(41);
    let next = bsgd_step(
        &inst.map,
        &inst.theta,
        &IndexBatch::full(5),
        1e3,
        &inst.data,
        0.1,
    )
    .unwrap();
    assert!(next.sigma2 >= 0.01);
}

fn trainer_config(kind: OptimizerKind) -> TrainerConfig {
    TrainerConfig {
        schedule: Schedule {
            kind: ScheduleKind::Polynomial,
            a0: if kind == OptimizerKind::Minimax {
                1e-3
            } else {
                1e-2
            },
            b0: 0.9,
        },
        minimax: MinimaxConfig::default(),
    }
}

fn run(kind: OptimizerKind, rule: StepRule, iters: usize) -> (Trainer, ChaCha8Rng) {
    let inst = small_instance(50);
    let mut trainer =
        Trainer::new(kind, &inst.map, inst.theta.clone(), rule, 1.0, &inst.data).unwrap();
    let mut sampler = BatchSampler::new(5, 2, Sampling::WithReplacement).unwrap();
    let mut r = rng(51);
    let cfg = trainer_config(kind);
    for _ in 0..iters {
        trainer
            .advance(&inst.map, &inst.data, &mut sampler, &mut r, &cfg)
            .unwrap();
    }
    (trainer, r)
}

#[test]
fn trajectories_are_deterministic() {
    for kind in [
        OptimizerKind::Minimax,
        OptimizerKind::Scgd,
        OptimizerKind::Bsgd,
    ] {
        let (a, _) = run(kind, StepRule::Sgd, 30);
        let (b, _) = run(kind, StepRule::Sgd, 30);
        assert_eq!(a.state, b.state);
    }
}

#[test]
fn checkpoint_resume_is_bit_identical() {
    let inst = small_instance(50);
    let map: &FeatureMap = &inst.map;
    for kind in [
        OptimizerKind::Minimax,
        OptimizerKind::Scgd,
        OptimizerKind::Bsgd,
    ] {
        for rule in [StepRule::Sgd, StepRule::adam()] {
            let (straight, _) = run(kind, rule, 40);

            let (half, r) = run(kind, rule, 15);
            let bytes = half.checkpoint(&r).to_bytes();
            let cp = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(cp, half.checkpoint(&r));
            let (mut resumed, mut r) = Trainer::restore(&cp).unwrap();
            let mut sampler = BatchSampler::new(5, 2, Sampling::WithReplacement).unwrap();
            let cfg = trainer_config(kind);
            for _ in 15..40 {
                resumed
                    .advance(map, &inst.data, &mut sampler, &mut r, &cfg)
                    .unwrap();
            }
            assert_eq!(resumed.state, straight.state, "{kind} {rule:?}");
            assert_eq!(resumed.iteration, 40);
        }
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let (trainer, r) = run(OptimizerKind::Scgd, StepRule::Sgd, 3);
    let bytes = trainer.checkpoint(&r).to_bytes();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    assert!(Checkpoint::from_bytes(b"not a checkpoint").is_err());
}
