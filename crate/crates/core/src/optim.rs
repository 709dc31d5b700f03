//! Stochastic optimizers for `l(θ)`.
//!
//! * **MINIMAX** replaces `log|F(θ)|` by `log|A|` plus the penalty
//!   `μ‖A − F(θ)‖/‖A‖`, writes the norm as a maximum over the unit Frobenius
//!   ball and runs projected stochastic gradient descent-ascent on
//!   `Ψ(ζ, B) = Σ_i ψ(ζ, B; x_i)` with `ζ = (θ, A)`.
//! * **SCGD** tracks `F(θ)` with an exponential average `F̃` and steps along
//!   `Σ_i ∇[g_i + ⟨F̃⁻¹, F_i⟩]`.
//! * **BSGD** is the same step with `F̃ = Σ_{i∈S} F_i`, i.e. the gradient of
//!   the batch-restricted marginal likelihood. It is biased for `s < n`.
//!
//! Mini-batch sums in MINIMAX are scaled by `n/s`, which makes its stochastic
//! gradients unbiased for the full-data gradients of `Ψ`.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, IndexBatch};
use crate::error::{Error, Result};
use crate::features::{write_f64s, FeatureMap, Segment, SnapshotReader};
use crate::linalg::{
    frobenius_inner, gram, gram_plus_shift, symmetrize_in_place, symmetrized, Cholesky,
};
use crate::objective::{
    g_term, linearized_gradient, linearized_gradient_from, HyperParams, ThetaGrad, Weight,
};

/// Upper bounds defining the box part of `Ω₁`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZetaBounds {
    /// `|w_k|, |α_k| ≤ coord_max`.
    pub coord_max: f64,
    /// `σ² ≤ sigma2_max`.
    pub sigma2_max: f64,
    /// Eigenvalues of `A` at most `eig_max`.
    pub eig_max: f64,
}

impl Default for ZetaBounds {
    fn default() -> Self {
        Self {
            coord_max: 1e6,
            sigma2_max: 1e6,
            eig_max: 1e6,
        }
    }
}

/// How `(σ², A)` are projected onto `{A ⪰ σ²I, σ ≥ σ_min}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMode {
    /// Clamp `σ²` first, then clip the eigenvalues of `A` against the new `σ²`.
    #[default]
    Sequential,
    /// Exact Euclidean projection onto the joint convex set.
    Joint,
}

/// `ζ = (θ, A)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedState {
    pub theta: HyperParams,
    pub a: DMatrix<f64>,
}

impl AugmentedState {
    /// `[θ, vec(A)]`, `A` column-major.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = self.theta.to_flat();
        out.extend_from_slice(self.a.as_slice());
        out
    }
}

/// Dual matrix `B`, kept in the unit Frobenius ball `Ω₂`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualVariable(pub DMatrix<f64>);

impl DualVariable {
    pub fn zeros(d: usize) -> Self {
        Self(DMatrix::zeros(d, d))
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimaxConfig {
    /// Primal step size.
    pub a: f64,
    /// Dual step size.
    pub b: f64,
    /// Penalty weight `μ`.
    pub mu: f64,
    pub sigma_min: f64,
    pub bounds: ZetaBounds,
    pub batch_size: usize,
    /// Multiplier on the primal step for the `A` block.
    pub matrix_step_scale: f64,
    /// Use the primal batch for the dual step instead of a fresh one.
    pub shared_batch: bool,
    pub projection: ProjectionMode,
}

impl Default for MinimaxConfig {
    fn default() -> Self {
        Self {
            a: 1e-3,
            b: 0.1,
            mu: 1.0,
            sigma_min: 1e-3,
            bounds: ZetaBounds::default(),
            batch_size: 32,
            matrix_step_scale: 1.0,
            shared_batch: false,
            projection: ProjectionMode::Sequential,
        }
    }
}

impl MinimaxConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.a >= 0.0 && self.b >= 0.0 && self.mu > 0.0 && self.sigma_min > 0.0) {
            return Err(Error::Config(
                "minimax needs a, b ≥ 0 and mu, sigma_min > 0".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Gradient with respect to `ζ = (θ, A)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ZetaGrad {
    pub theta: ThetaGrad,
    pub a: DMatrix<f64>,
}

impl ZetaGrad {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = self.theta.to_flat();
        out.extend_from_slice(self.a.as_slice());
        out
    }
}

fn check_matrix(a: &DMatrix<f64>, d: usize, what: &'static str) -> Result<()> {
    if a.nrows() != d || a.ncols() != d {
        return Err(Error::DimensionMismatch {
            what,
            expected: d,
            found: a.nrows(),
        });
    }
    Ok(())
}

fn frob_norm_nonzero(a: &DMatrix<f64>) -> Result<f64> {
    let norm = a.norm();
    if !(norm > 0.0) {
        return Err(Error::InvalidArgument("A must be non-zero".into()));
    }
    Ok(norm)
}

/// `ψ(ζ, B; x_i, μ) = g_i(θ) + log|A|/n + μ⟨B, A/n − F_i(θ)⟩/‖A‖`.
pub fn psi(
    map: &FeatureMap,
    zeta: &AugmentedState,
    dual: &DualVariable,
    i: usize,
    mu: f64,
    data: &Dataset,
) -> Result<f64> {
    let d = map.output_dim();
    check_matrix(&zeta.a, d, "augmented matrix A")?;
    check_matrix(&dual.0, d, "dual matrix B")?;
    let n = data.len();
    let theta = &zeta.theta;
    let phi = map.eval(&theta.alpha, &data.rows(&[i]))?.row(0).transpose();
    let g = g_term(&phi, &theta.w, data.targets[i], theta.sigma2, n)?;
    let logdet = Cholesky::factor(&zeta.a)?.logdet();
    let norm_a = frob_norm_nonzero(&zeta.a)?;
    let nf = n as f64;
    let b = &dual.0;
    let inner =
        frobenius_inner(b, &zeta.a) / nf - phi.dot(&(b * &phi)) - theta.sigma2 / nf * b.trace();
    Ok(g + logdet / nf + mu * inner / norm_a)
}

/// `Ψ(ζ, B) = g(θ) + log|A| + μ⟨B, A − F(θ)⟩/‖A‖` in closed form.
pub fn psi_total(
    map: &FeatureMap,
    zeta: &AugmentedState,
    dual: &DualVariable,
    mu: f64,
    data: &Dataset,
) -> Result<f64> {
    let theta = &zeta.theta;
    let n = data.len() as f64;
    let z = map.eval(&theta.alpha, &data.features)?;
    let d = z.ncols() as f64;
    let resid = &z * &theta.w - &data.targets;
    let g =
        resid.norm_squared() / theta.sigma2 + theta.w.norm_squared() + (n - d) * theta.sigma2.ln();
    let f = gram_plus_shift(&z, theta.sigma2);
    let logdet = Cholesky::factor(&zeta.a)?.logdet();
    let norm_a = frob_norm_nonzero(&zeta.a)?;
    Ok(g + logdet + mu * frobenius_inner(&dual.0, &(&zeta.a - f)) / norm_a)
}

/// `∇_ζ (n/s) Σ_{i∈batch} ψ(ζ, B; x_i)`. The `A` block is symmetrized.
pub fn grad_psi_zeta(
    map: &FeatureMap,
    zeta: &AugmentedState,
    dual: &DualVariable,
    batch: &IndexBatch,
    mu: f64,
    data: &Dataset,
) -> Result<ZetaGrad> {
    let d = map.output_dim();
    check_matrix(&zeta.a, d, "augmented matrix A")?;
    check_matrix(&dual.0, d, "dual matrix B")?;
    let a = &zeta.a;
    let b = &dual.0;
    let theta = &zeta.theta;
    let n = batch.n as f64;
    let s = batch.size() as f64;
    let scale = batch.scale();
    let norm_a = frob_norm_nonzero(a)?;
    let chol = Cholesky::factor(a)?;

    // θ-part: g_i plus ⟨−μB/‖A‖, F_i⟩.
    let weight = b * (-mu / norm_a);
    let (mut grad_theta, fb) =
        linearized_gradient(map, theta, batch, data, Weight::Matrix(&weight))?;
    grad_theta.scale(scale);

    // Σ_i ⟨B, A/n − F_i⟩ over the batch.
    let z = &fb.z;
    let quad: f64 = (z * b).component_mul(z).sum();
    let penalty_sum = s / n * frobenius_inner(b, a) - quad - s / n * theta.sigma2 * b.trace();

    let mut grad_a = chol.inverse();
    grad_a += b * (mu / norm_a);
    grad_a -= a * (mu * scale * penalty_sum / norm_a.powi(3));
    symmetrize_in_place(&mut grad_a);

    Ok(ZetaGrad {
        theta: grad_theta,
        a: grad_a,
    })
}

/// `∇_B (n/s) Σ_{i∈batch} ψ(ζ, B; x_i) = μ(A − (n/s) Z_SᵀZ_S − σ²I)/‖A‖`.
pub fn grad_psi_dual(
    map: &FeatureMap,
    zeta: &AugmentedState,
    batch: &IndexBatch,
    mu: f64,
    data: &Dataset,
) -> Result<DMatrix<f64>> {
    let d = map.output_dim();
    check_matrix(&zeta.a, d, "augmented matrix A")?;
    let theta = &zeta.theta;
    let z = map.eval(&theta.alpha, &data.rows(&batch.indices))?;
    let norm_a = frob_norm_nonzero(&zeta.a)?;
    // (n/s) Σ F_i = (n/s) Z_SᵀZ_S + σ²I
    let mut f_hat = gram(&z) * batch.scale();
    for k in 0..d {
        f_hat[(k, k)] += theta.sigma2;
    }
    Ok((&zeta.a - f_hat) * (mu / norm_a))
}

/// Both gradients of `(n/s) Σ_{i∈batch} ψ` at the same point.
pub fn grad_psi(
    map: &FeatureMap,
    zeta: &AugmentedState,
    dual: &DualVariable,
    batch: &IndexBatch,
    mu: f64,
    data: &Dataset,
) -> Result<(ZetaGrad, DMatrix<f64>)> {
    Ok((
        grad_psi_zeta(map, zeta, dual, batch, mu, data)?,
        grad_psi_dual(map, zeta, batch, mu, data)?,
    ))
}

/// Radial projection onto `{‖B‖_F ≤ 1}`.
pub fn proj_omega2(dual: &DualVariable) -> DualVariable {
    let norm = dual.norm();
    if norm <= 1.0 {
        dual.clone()
    } else {
        DualVariable(&dual.0 / norm)
    }
}

fn clamp_coords(theta: &mut HyperParams, coord_max: f64) {
    theta
        .w
        .iter_mut()
        .for_each(|v| *v = v.clamp(-coord_max, coord_max));
    if theta.alpha.as_slice().iter().any(|v| v.abs() > coord_max) {
        theta.alpha.update(|flat| {
            flat.iter_mut()
                .for_each(|v| *v = v.clamp(-coord_max, coord_max))
        });
    }
}

fn eigen(a: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    a.try_symmetric_eigen(f64::EPSILON, 0)
        .ok_or(Error::EigenFailed)
}

/// Symmetrizes `a` and clips its spectrum to `[lo, hi]`; returns the
/// symmetrized input untouched when it is already inside.
fn clip_spectrum(a: &DMatrix<f64>, lo: f64, hi: f64) -> Result<DMatrix<f64>> {
    let sym = symmetrized(a);
    let eig = eigen(sym.clone())?;
    if eig.eigenvalues.iter().all(|&l| l >= lo && l <= hi) {
        return Ok(sym);
    }
    let clipped = eig.eigenvalues.map(|l| l.clamp(lo, hi));
    let mut out =
        &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    symmetrize_in_place(&mut out);
    Ok(out)
}

/// Projection onto `Ω₁`.
///
/// Sequential mode: (1) clamp `σ²` into `[σ_min², σ²_max]`, (2) clamp every
/// coordinate of `w` and `α` into `[−ζ_max, ζ_max]`, (3) symmetrize `A` and
/// clip its eigenvalues into `[σ², λ_max]`. This is a composition of
/// projections, not the Euclidean projection onto the coupled set; see
/// [`proj_omega1_joint`] for that.
pub fn proj_omega1(
    zeta: &AugmentedState,
    sigma_min: f64,
    bounds: &ZetaBounds,
) -> Result<AugmentedState> {
    let mut theta = zeta.theta.clone();
    let hi = bounds.sigma2_max.min(bounds.eig_max);
    theta.sigma2 = theta.sigma2.clamp(sigma_min * sigma_min, hi);
    clamp_coords(&mut theta, bounds.coord_max);
    let a = clip_spectrum(&zeta.a, theta.sigma2, bounds.eig_max)?;
    Ok(AugmentedState { theta, a })
}

/// Exact Euclidean projection of `(σ², A)` onto
/// `{σ_min² ≤ σ² ≤ σ²_max, σ²I ⪯ A ⪯ λ_max I}` (box clamps on `w`, `α`).
///
/// For a fixed `s = σ²` the best `A` clips the spectrum of `sym(A)` to
/// `[s, λ_max]`, so the projection reduces to the one-dimensional convex
/// problem `min_s (s − s₀)² + Σ_k max(0, s − λ_k)²`, solved exactly over the
/// sorted eigenvalues.
pub fn proj_omega1_joint(
    zeta: &AugmentedState,
    sigma_min: f64,
    bounds: &ZetaBounds,
) -> Result<AugmentedState> {
    let mut theta = zeta.theta.clone();
    clamp_coords(&mut theta, bounds.coord_max);
    let sym = symmetrized(&zeta.a);
    let eig = eigen(sym.clone())?;
    let mut lambdas: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    lambdas.sort_by(f64::total_cmp);

    let s0 = zeta.theta.sigma2;
    let mut s_star = s0;
    let mut prefix = 0.0;
    for j in 0..=lambdas.len() {
        // Active set: the j smallest eigenvalues lie below s.
        let cand = (s0 + prefix) / (j as f64 + 1.0);
        let above_prev = j == 0 || lambdas[j - 1] < cand;
        let below_next = j == lambdas.len() || cand <= lambdas[j];
        if above_prev && below_next {
            s_star = cand;
            break;
        }
        if j < lambdas.len() {
            prefix += lambdas[j];
        }
    }
    let hi = bounds.sigma2_max.min(bounds.eig_max);
    theta.sigma2 = s_star.clamp(sigma_min * sigma_min, hi);

    let lo = theta.sigma2;
    let a = if eig
        .eigenvalues
        .iter()
        .all(|&l| l >= lo && l <= bounds.eig_max)
    {
        sym
    } else {
        let clipped = eig.eigenvalues.map(|l| l.clamp(lo, bounds.eig_max));
        let mut out =
            &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
        symmetrize_in_place(&mut out);
        out
    };
    Ok(AugmentedState { theta, a })
}

fn project(zeta: &AugmentedState, cfg: &MinimaxConfig) -> Result<AugmentedState> {
    match cfg.projection {
        ProjectionMode::Sequential => proj_omega1(zeta, cfg.sigma_min, &cfg.bounds),
        ProjectionMode::Joint => proj_omega1_joint(zeta, cfg.sigma_min, &cfg.bounds),
    }
}

/// Per-coordinate step rule applied to primal gradients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum StepRule {
    /// `x ← x − a g`.
    #[default]
    Sgd,
    /// Bias-corrected first/second moment rescaling.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl StepRule {
    pub fn adam() -> Self {
        StepRule::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers of a [`StepRule`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepState {
    pub rule: StepRule,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl StepState {
    pub fn new(rule: StepRule, len: usize) -> Self {
        let (m, v) = match rule {
            StepRule::Sgd => (Vec::new(), Vec::new()),
            StepRule::Adam { .. } => (vec![0.0; len], vec![0.0; len]),
        };
        Self { rule, t: 0, m, v }
    }

    /// The direction to be scaled by the learning rate.
    pub fn direction(&mut self, grad: &[f64]) -> Vec<f64> {
        self.t += 1;
        match self.rule {
            StepRule::Sgd => grad.to_vec(),
            StepRule::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                grad.iter()
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                    .map(|(&g, (m, v))| {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        (*m / c1) / ((*v / c2).sqrt() + eps)
                    })
                    .collect()
            }
        }
    }
}

/// One projected descent-ascent step with plain SGD:
///
/// ```text
/// ζ_{t+1} = P_Ω₁(ζ_t − a ∇_ζ (n/s) Σ_{i∈S} ψ(ζ_t, B_t))
/// B_{t+1} = P_Ω₂(B_t + b ∇_B (n/s) Σ_{i∈S̄} ψ(ζ_{t+1}, B_t))
/// ```
pub fn minimax_step(
    map: &FeatureMap,
    zeta: &AugmentedState,
    dual: &DualVariable,
    batch1: &IndexBatch,
    batch2: &IndexBatch,
    cfg: &MinimaxConfig,
    data: &Dataset,
) -> Result<(AugmentedState, DualVariable)> {
    let mut state = StepState::new(StepRule::Sgd, 0);
    let (zeta, dual, _) =
        minimax_step_with(map, zeta, dual, batch1, batch2, cfg, data, &mut state)?;
    Ok((zeta, dual))
}

/// [`minimax_step`] with a pluggable primal rule; also returns the primal
/// gradient norm.
#[allow(clippy::too_many_arguments)]
pub fn minimax_step_with(
    map: &FeatureMap,
    zeta: &AugmentedState,
    dual: &DualVariable,
    batch1: &IndexBatch,
    batch2: &IndexBatch,
    cfg: &MinimaxConfig,
    data: &Dataset,
    rule: &mut StepState,
) -> Result<(AugmentedState, DualVariable, f64)> {
    let grad = grad_psi_zeta(map, zeta, dual, batch1, cfg.mu, data)?;
    let flat_grad = grad.to_flat();
    let grad_norm = flat_grad.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dir = rule.direction(&flat_grad);

    let k = zeta.theta.len();
    let mut theta_flat = zeta.theta.to_flat();
    for (x, g) in theta_flat.iter_mut().zip(&dir[..k]) {
        *x -= cfg.a * g;
    }
    let mut stepped = AugmentedState {
        theta: zeta.theta.clone(),
        a: zeta.a.clone(),
    };
    stepped.theta.set_flat(&theta_flat)?;
    let a_step = cfg.a * cfg.matrix_step_scale;
    for (x, g) in stepped.a.as_mut_slice().iter_mut().zip(&dir[k..]) {
        *x -= a_step * g;
    }
    let next = project(&stepped, cfg)?;

    let dual_grad = grad_psi_dual(map, &next, batch2, cfg.mu, data)?;
    let next_dual = proj_omega2(&DualVariable(&dual.0 + dual_grad * cfg.b));
    Ok((next, next_dual, grad_norm))
}

/// `A₀ = F(θ₀)` from a full pass.
pub fn initial_augmented(
    map: &FeatureMap,
    theta: HyperParams,
    data: &Dataset,
) -> Result<AugmentedState> {
    let z = map.eval(&theta.alpha, &data.features)?;
    let a = gram_plus_shift(&z, theta.sigma2);
    Ok(AugmentedState { theta, a })
}

/// `A₀ = (n/s) Σ_{i∈batch} F_i(θ₀)` for streaming starts.
pub fn initial_augmented_from_batch(
    map: &FeatureMap,
    theta: HyperParams,
    batch: &IndexBatch,
    data: &Dataset,
) -> Result<AugmentedState> {
    let z = map.eval(&theta.alpha, &data.rows(&batch.indices))?;
    let mut a = gram(&z) * batch.scale();
    for k in 0..a.nrows() {
        a[(k, k)] += theta.sigma2;
    }
    Ok(AugmentedState { theta, a })
}

/// SCGD iterate: `θ` and the tracked information matrix `F̃`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScgdState {
    pub theta: HyperParams,
    pub f_tilde: DMatrix<f64>,
    pub t: u64,
}

impl ScgdState {
    /// Starts the tracker at `F(θ₀)`.
    pub fn new(map: &FeatureMap, theta: HyperParams, data: &Dataset) -> Result<Self> {
        let z = map.eval(&theta.alpha, &data.features)?;
        let f_tilde = gram_plus_shift(&z, theta.sigma2);
        Ok(Self {
            theta,
            f_tilde,
            t: 0,
        })
    }
}

const PD_FLOOR: f64 = 1e-10;

/// Factors `m`, flooring its spectrum at `1e−10` if the first attempt fails.
fn factor_with_floor(m: &mut DMatrix<f64>) -> Result<Cholesky> {
    match Cholesky::factor(m) {
        Ok(chol) => Ok(chol),
        Err(_) => {
            *m = clip_spectrum(m, PD_FLOOR, f64::INFINITY)?;
            Cholesky::factor(m)
        }
    }
}

/// `(1 − b) F̃ + b (n/s) Σ_{i∈S} F_i` from batch features `z`.
fn tracked(
    f_tilde: &DMatrix<f64>,
    z: &DMatrix<f64>,
    sigma2: f64,
    scale: f64,
    b_t: f64,
) -> DMatrix<f64> {
    // (n/s) Σ F_i = (n/s) ZᵀZ + σ²I
    let mut next = gram(z) * (b_t * scale);
    next += f_tilde * (1.0 - b_t);
    for k in 0..next.nrows() {
        next[(k, k)] += b_t * sigma2;
    }
    symmetrize_in_place(&mut next);
    next
}

/// One SCGD step. The tracker is refreshed with `θ_t` first and the primal
/// step then linearizes `log|·|` at the refreshed `F̃_{t+1}`; at full batch
/// with `b_t = 1` this is exactly gradient descent on `l`.
pub fn scgd_step(
    map: &FeatureMap,
    state: &ScgdState,
    batch: &IndexBatch,
    a_t: f64,
    b_t: f64,
    data: &Dataset,
    sigma_min: f64,
) -> Result<ScgdState> {
    let mut rule = StepState::new(StepRule::Sgd, 0);
    Ok(scgd_step_with(map, state, batch, a_t, b_t, data, sigma_min, &mut rule)?.0)
}

/// The SCGD primal direction and refreshed tracker at `state`.
pub fn scgd_direction(
    map: &FeatureMap,
    state: &ScgdState,
    batch: &IndexBatch,
    b_t: f64,
    data: &Dataset,
) -> Result<(ThetaGrad, DMatrix<f64>)> {
    if !(b_t > 0.0 && b_t <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "averaging weight b_t = {b_t} outside (0, 1]"
        )));
    }
    let theta = &state.theta;
    let fb = map.forward(&theta.alpha, &data.rows(&batch.indices))?;
    let mut f_next = tracked(&state.f_tilde, &fb.z, theta.sigma2, batch.scale(), b_t);
    let chol = factor_with_floor(&mut f_next).map_err(|e| e.at_iteration(state.t))?;
    let grad = linearized_gradient_from(map, theta, batch, data, &fb, Weight::Inverse(&chol))?;
    Ok((grad, f_next))
}

#[allow(clippy::too_many_arguments)]
pub fn scgd_step_with(
    map: &FeatureMap,
    state: &ScgdState,
    batch: &IndexBatch,
    a_t: f64,
    b_t: f64,
    data: &Dataset,
    sigma_min: f64,
    rule: &mut StepState,
) -> Result<(ScgdState, f64)> {
    let (grad, f_next) = scgd_direction(map, state, batch, b_t, data)?;
    let theta = apply_step(&state.theta, &grad, a_t, sigma_min, rule)?;
    Ok((
        ScgdState {
            theta,
            f_tilde: f_next,
            t: state.t + 1,
        },
        grad.norm(),
    ))
}

fn apply_step(
    theta: &HyperParams,
    grad: &ThetaGrad,
    a_t: f64,
    sigma_min: f64,
    rule: &mut StepState,
) -> Result<HyperParams> {
    let dir = rule.direction(&grad.to_flat());
    let mut flat = theta.to_flat();
    for (x, g) in flat.iter_mut().zip(&dir) {
        *x -= a_t * g;
    }
    let mut next = theta.clone();
    next.set_flat(&flat)?;
    next.sigma2 = next.sigma2.max(sigma_min * sigma_min);
    Ok(next)
}

/// `∇ l(θ; S)` for the batch-restricted loss
/// `l(θ; S) = Σ_{i∈S} g_i(θ) + log|Σ_{i∈S} F_i(θ)|`.
///
/// `Σ_{i∈S} F_i = Z_SᵀZ_S + (s/n)σ²I`, which is missing the `n/s` rescaling.
pub fn bsgd_direction(
    map: &FeatureMap,
    theta: &HyperParams,
    batch: &IndexBatch,
    data: &Dataset,
) -> Result<ThetaGrad> {
    let fb = map.forward(&theta.alpha, &data.rows(&batch.indices))?;
    let f_batch = gram_plus_shift(&fb.z, theta.sigma2 / batch.scale());
    let chol = Cholesky::factor(&f_batch)?;
    linearized_gradient_from(map, theta, batch, data, &fb, Weight::Inverse(&chol))
}

/// `l(θ; S)`.
pub fn batch_loss(
    map: &FeatureMap,
    theta: &HyperParams,
    batch: &IndexBatch,
    data: &Dataset,
) -> Result<f64> {
    let z = map.eval(&theta.alpha, &data.rows(&batch.indices))?;
    let mut g = 0.0;
    for (row, &i) in batch.indices.iter().enumerate() {
        g += g_term(
            &z.row(row).transpose(),
            &theta.w,
            data.targets[i],
            theta.sigma2,
            batch.n,
        )?;
    }
    let f_batch = gram_plus_shift(&z, theta.sigma2 / batch.scale());
    Ok(g + Cholesky::factor(&f_batch)?.logdet())
}

pub fn bsgd_step(
    map: &FeatureMap,
    theta: &HyperParams,
    batch: &IndexBatch,
    a_t: f64,
    data: &Dataset,
    sigma_min: f64,
) -> Result<HyperParams> {
    let grad = bsgd_direction(map, theta, batch, data)?;
    apply_step(
        theta,
        &grad,
        a_t,
        sigma_min,
        &mut StepState::new(StepRule::Sgd, 0),
    )
}

pub fn bsgd_step_with(
    map: &FeatureMap,
    theta: &HyperParams,
    batch: &IndexBatch,
    a_t: f64,
    data: &Dataset,
    sigma_min: f64,
    rule: &mut StepState,
) -> Result<(HyperParams, f64)> {
    let grad = bsgd_direction(map, theta, batch, data)?;
    Ok((apply_step(theta, &grad, a_t, sigma_min, rule)?, grad.norm()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Constant,
    /// `a_t = a₀ t^{−3/4}`, `b_t = min(1, b₀ t^{−1/2})`.
    Polynomial,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub a0: f64,
    pub b0: f64,
}

/// Step sizes `(a_t, b_t)` at iteration `t ≥ 1`.
pub fn schedule_at(schedule: &Schedule, t: u64) -> (f64, f64) {
    let t = t.max(1) as f64;
    match schedule.kind {
        ScheduleKind::Constant => (schedule.a0, schedule.b0),
        ScheduleKind::Polynomial => (
            schedule.a0 * t.powf(-0.75),
            (schedule.b0 * t.powf(-0.5)).min(1.0),
        ),
    }
}

/// Serializable generator position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Optimizer snapshot: hyperparameters, `A` or `F̃`, `B`, step-rule moments,
/// iteration counter and generator position.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub optimizer: String,
    pub iteration: u64,
    /// Penalty weight in force (MINIMAX only; stored for every optimizer).
    pub mu: f64,
    pub theta: HyperParams,
    pub matrix: Option<DMatrix<f64>>,
    pub dual: Option<DMatrix<f64>>,
    pub step: StepState,
    pub rng: RngState,
}

const CHECKPOINT_MAGIC: &str = "stochgp-checkpoint v1";

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let dim = |m: &Option<DMatrix<f64>>| m.as_ref().map_or(0, |m| m.nrows());
        let mut h = String::new();
        h.push_str(CHECKPOINT_MAGIC);
        h.push('\n');
        h.push_str(&format!("optimizer {}\n", self.optimizer));
        h.push_str(&format!("iteration {}\n", self.iteration));
        h.push_str(&format!("mu {:e}\n", self.mu));
        h.push_str(&format!("ridge_dim {}\n", self.theta.w.len()));
        h.push_str(&format!("segments {}\n", self.theta.alpha.layout().len()));
        for seg in self.theta.alpha.layout() {
            let shape: Vec<String> = seg.shape.iter().map(|d| d.to_string()).collect();
            h.push_str(&format!(
                "{} {} {}\n",
                seg.name,
                seg.offset,
                shape.join("x")
            ));
        }
        h.push_str(&format!("matrix {}\n", dim(&self.matrix)));
        h.push_str(&format!("dual {}\n", dim(&self.dual)));
        h.push_str(&format!(
            "step_rule {}\n",
            serde_json::to_string(&self.step.rule).expect("plain enum")
        ));
        h.push_str(&format!("step_t {}\n", self.step.t));
        h.push_str(&format!("moments {}\n", self.step.m.len()));
        let seed: String = self.rng.seed.iter().map(|b| format!("{b:02x}")).collect();
        h.push_str(&format!("rng_seed {seed}\n"));
        h.push_str(&format!("rng_stream {}\n", self.rng.stream));
        h.push_str(&format!("rng_word_pos {}\n", self.rng.word_pos));
        let mut payload = self.theta.to_flat();
        if let Some(m) = &self.matrix {
            payload.extend_from_slice(m.as_slice());
        }
        if let Some(b) = &self.dual {
            payload.extend_from_slice(b.as_slice());
        }
        payload.extend_from_slice(&self.step.m);
        payload.extend_from_slice(&self.step.v);
        h.push_str(&format!("payload {}\n", payload.len()));
        let mut out = h.into_bytes();
        write_f64s(&mut out, &payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = SnapshotReader::new(bytes);
        r.expect_line(CHECKPOINT_MAGIC)?;
        let optimizer: String = r.keyed("optimizer")?;
        let iteration: u64 = r.keyed("iteration")?;
        let mu: f64 = r.keyed("mu")?;
        let d: usize = r.keyed("ridge_dim")?;
        let count: usize = r.keyed("segments")?;
        let mut layout = Vec::with_capacity(count);
        for _ in 0..count {
            let line = r.line()?;
            let parts: Vec<&str> = line.split(' ').collect();
            let bad = || Error::Snapshot(format!("bad segment line `{line}`"));
            if parts.len() != 3 {
                return Err(bad());
            }
            let shape = if parts[2].is_empty() {
                Vec::new()
            } else {
                parts[2]
                    .split('x')
                    .map(|v| v.parse().map_err(|_| bad()))
                    .collect::<Result<_>>()?
            };
            layout.push(Segment {
                name: parts[0].to_string(),
                offset: parts[1].parse().map_err(|_| bad())?,
                shape,
            });
        }
        let m_dim: usize = r.keyed("matrix")?;
        let b_dim: usize = r.keyed("dual")?;
        let rule_text: String = r.keyed("step_rule")?;
        let rule: StepRule = serde_json::from_str(&rule_text)?;
        let step_t: u64 = r.keyed("step_t")?;
        let moments: usize = r.keyed("moments")?;
        let seed_hex: String = r.keyed("rng_seed")?;
        if seed_hex.len() != 64 {
            return Err(Error::Snapshot("rng seed must be 32 bytes".into()));
        }
        let mut seed = [0u8; 32];
        for (k, byte) in seed.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&seed_hex[2 * k..2 * k + 2], 16)
                .map_err(|_| Error::Snapshot("rng seed is not hex".into()))?;
        }
        let stream: u64 = r.keyed("rng_stream")?;
        let word_pos: u128 = r.keyed("rng_word_pos")?;
        let total: usize = r.keyed("payload")?;
        let payload = r.f64s(total)?;
        r.finish()?;

        let m_params: usize = layout.iter().map(Segment::len).sum();
        let expected = d + m_params + 1 + m_dim * m_dim + b_dim * b_dim + 2 * moments;
        if total != expected {
            return Err(Error::Snapshot(format!(
                "payload has {total} values, {expected} expected"
            )));
        }
        let mut at = 0;
        let mut take = |len: usize| {
            let s = &payload[at..at + len];
            at += len;
            s
        };
        let w = nalgebra::DVector::from_column_slice(take(d));
        let alpha = crate::features::FeatureMapParams::new(take(m_params).to_vec(), layout)?;
        let sigma2 = take(1)[0];
        let matrix =
            (m_dim > 0).then(|| DMatrix::from_column_slice(m_dim, m_dim, take(m_dim * m_dim)));
        let dual =
            (b_dim > 0).then(|| DMatrix::from_column_slice(b_dim, b_dim, take(b_dim * b_dim)));
        let m = take(moments).to_vec();
        let v = take(moments).to_vec();
        Ok(Self {
            optimizer,
            iteration,
            mu,
            theta: HyperParams::new(w, alpha, sigma2),
            matrix,
            dual,
            step: StepState {
                rule,
                t: step_t,
                m,
                v,
            },
            rng: RngState {
                seed,
                stream,
                word_pos,
            },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Minimax,
    Scgd,
    Bsgd,
}

impl OptimizerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            OptimizerKind::Minimax => "minimax",
            OptimizerKind::Scgd => "scgd",
            OptimizerKind::Bsgd => "bsgd",
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "minimax" => Ok(OptimizerKind::Minimax),
            "scgd" => Ok(OptimizerKind::Scgd),
            "bsgd" => Ok(OptimizerKind::Bsgd),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainerState {
    Minimax {
        zeta: AugmentedState,
        dual: DualVariable,
    },
    Scgd(ScgdState),
    Bsgd(HyperParams),
}

/// Settings shared by every step of a [`Trainer`]. For MINIMAX the schedule's
/// `(a_t, b_t)` are the primal and dual step sizes; `minimax.a` and
/// `minimax.b` are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub schedule: Schedule,
    pub minimax: MinimaxConfig,
}

/// Any of the three optimizers behind one stepping interface.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub state: TrainerState,
    pub step: StepState,
    pub iteration: u64,
    pub mu: f64,
}

impl Trainer {
    /// Starts from `theta`: `A₀ = F(θ₀)`, `B₀ = 0` for MINIMAX and
    /// `F̃₀ = F(θ₀)` for SCGD.
    pub fn new(
        kind: OptimizerKind,
        map: &FeatureMap,
        theta: HyperParams,
        rule: StepRule,
        mu: f64,
        data: &Dataset,
    ) -> Result<Self> {
        let d = theta.w.len();
        let len = match kind {
            OptimizerKind::Minimax => theta.len() + d * d,
            _ => theta.len(),
        };
        let state = match kind {
            OptimizerKind::Minimax => TrainerState::Minimax {
                zeta: initial_augmented(map, theta, data)?,
                dual: DualVariable::zeros(d),
            },
            OptimizerKind::Scgd => TrainerState::Scgd(ScgdState::new(map, theta, data)?),
            OptimizerKind::Bsgd => TrainerState::Bsgd(theta),
        };
        Ok(Self {
            state,
            step: StepState::new(rule, len),
            iteration: 0,
            mu,
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        match self.state {
            TrainerState::Minimax { .. } => OptimizerKind::Minimax,
            TrainerState::Scgd(_) => OptimizerKind::Scgd,
            TrainerState::Bsgd(_) => OptimizerKind::Bsgd,
        }
    }

    pub fn theta(&self) -> &HyperParams {
        match &self.state {
            TrainerState::Minimax { zeta, .. } => &zeta.theta,
            TrainerState::Scgd(s) => &s.theta,
            TrainerState::Bsgd(theta) => theta,
        }
    }

    /// One iteration; returns the norm of the primal stochastic gradient.
    /// Errors carry the iteration index.
    pub fn advance<R: rand::Rng + ?Sized>(
        &mut self,
        map: &FeatureMap,
        data: &Dataset,
        sampler: &mut crate::data::BatchSampler,
        rng: &mut R,
        cfg: &TrainerConfig,
    ) -> Result<f64> {
        let t = self.iteration;
        self.advance_inner(map, data, sampler, rng, cfg)
            .map_err(|e| match e {
                Error::AtIteration { .. } => e,
                other => other.at_iteration(t),
            })
    }

    fn advance_inner<R: rand::Rng + ?Sized>(
        &mut self,
        map: &FeatureMap,
        data: &Dataset,
        sampler: &mut crate::data::BatchSampler,
        rng: &mut R,
        cfg: &TrainerConfig,
    ) -> Result<f64> {
        let (a_t, b_t) = schedule_at(&cfg.schedule, self.iteration + 1);
        let sigma_min = cfg.minimax.sigma_min;
        let batch = sampler.next_batch(rng)?;
        let norm = match &mut self.state {
            TrainerState::Minimax { zeta, dual } => {
                let batch2 = if cfg.minimax.shared_batch {
                    batch.clone()
                } else {
                    sampler.next_batch(rng)?
                };
                let step_cfg = MinimaxConfig {
                    a: a_t,
                    b: b_t,
                    mu: self.mu,
                    ..cfg.minimax.clone()
                };
                let (z, b, norm) = minimax_step_with(
                    map,
                    zeta,
                    dual,
                    &batch,
                    &batch2,
                    &step_cfg,
                    data,
                    &mut self.step,
                )?;
                *zeta = z;
                *dual = b;
                norm
            }
            TrainerState::Scgd(state) => {
                state.t = self.iteration;
                let (next, norm) = scgd_step_with(
                    map,
                    state,
                    &batch,
                    a_t,
                    b_t,
                    data,
                    sigma_min,
                    &mut self.step,
                )?;
                *state = next;
                norm
            }
            TrainerState::Bsgd(theta) => {
                let (next, norm) =
                    bsgd_step_with(map, theta, &batch, a_t, data, sigma_min, &mut self.step)?;
                *theta = next;
                norm
            }
        };
        self.iteration += 1;
        Ok(norm)
    }

    pub fn checkpoint(&self, rng: &ChaCha8Rng) -> Checkpoint {
        let (matrix, dual) = match &self.state {
            TrainerState::Minimax { zeta, dual } => (Some(zeta.a.clone()), Some(dual.0.clone())),
            TrainerState::Scgd(s) => (Some(s.f_tilde.clone()), None),
            TrainerState::Bsgd(_) => (None, None),
        };
        Checkpoint {
            optimizer: self.kind().as_str().to_string(),
            iteration: self.iteration,
            mu: self.mu,
            theta: self.theta().clone(),
            matrix,
            dual,
            step: self.step.clone(),
            rng: RngState::capture(rng),
        }
    }

    /// Rebuilds the trainer and its generator from a checkpoint.
    pub fn restore(cp: &Checkpoint) -> Result<(Self, ChaCha8Rng)> {
        let kind: OptimizerKind = cp.optimizer.parse()?;
        let d = cp.theta.w.len();
        let missing = |what: &str| Error::Snapshot(format!("{kind} checkpoint without {what}"));
        let state = match kind {
            OptimizerKind::Minimax => {
                let a = cp.matrix.clone().ok_or_else(|| missing("A"))?;
                let b = cp.dual.clone().ok_or_else(|| missing("B"))?;
                check_matrix(&a, d, "checkpoint A")?;
                check_matrix(&b, d, "checkpoint B")?;
                TrainerState::Minimax {
                    zeta: AugmentedState {
                        theta: cp.theta.clone(),
                        a,
                    },
                    dual: DualVariable(b),
                }
            }
            OptimizerKind::Scgd => {
                let f = cp
                    .matrix
                    .clone()
                    .ok_or_else(|| missing("the tracked matrix"))?;
                check_matrix(&f, d, "checkpoint tracked matrix")?;
                TrainerState::Scgd(ScgdState {
                    theta: cp.theta.clone(),
                    f_tilde: f,
                    t: cp.iteration,
                })
            }
            OptimizerKind::Bsgd => TrainerState::Bsgd(cp.theta.clone()),
        };
        Ok((
            Self {
                state,
                step: cp.step.clone(),
                iteration: cp.iteration,
                mu: cp.mu,
            },
            cp.rng.restore(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn state(sigma2: f64, a: DMatrix<f64>) -> AugmentedState {
        AugmentedState {
            theta: HyperParams::new(
                DVector::zeros(a.nrows()),
                crate::features::FeatureMapParams::empty(),
                sigma2,
            ),
            a,
        }
    }

    #[test]
    fn omega2_cases() {
        let inside = DualVariable(DMatrix::identity(2, 2) * (0.5 / 2f64.sqrt()));
        assert_eq!(proj_omega2(&inside), inside);
        let out = proj_omega2(&DualVariable(DMatrix::identity(2, 2) * 2.0));
        let want = DMatrix::identity(2, 2) / 2f64.sqrt();
        assert!((out.0 - want).norm() < 1e-15);
    }

    #[test]
    fn omega1_diagonal_clamp() {
        let zeta = state(
            1.0,
            DMatrix::from_diagonal(&DVector::from_vec(vec![0.1, 2.0])),
        );
        let p = proj_omega1(&zeta, 1e-3, &ZetaBounds::default()).unwrap();
        let want = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0]));
        assert!((p.a - want).norm() < 1e-12);
        assert_eq!(p.theta.sigma2, 1.0);
    }

    #[test]
    fn omega1_sigma_first_then_matrix() {
        let zeta = state(
            1e-9,
            DMatrix::from_diagonal(&DVector::from_vec(vec![1e-8, 3.0])),
        );
        let p = proj_omega1(&zeta, 1e-3, &ZetaBounds::default()).unwrap();
        assert!((p.theta.sigma2 - 1e-6).abs() < 1e-18);
        let eig = p.a.symmetric_eigenvalues();
        assert!(eig.min() >= 1e-6 - 1e-15);
    }

    #[test]
    fn omega1_feasible_is_fixed() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.5]);
        let zeta = state(0.5, a.clone());
        let p = proj_omega1(&zeta, 1e-3, &ZetaBounds::default()).unwrap();
        assert_eq!(p, zeta);
        let j = proj_omega1_joint(&zeta, 1e-3, &ZetaBounds::default()).unwrap();
        assert_eq!(j, zeta);
    }

    #[test]
    fn joint_projection_scalar_case() {
        // min (s − 1)² + (s − 0.1)² → s = 0.55, A = 0.55.
        let zeta = state(1.0, DMatrix::from_element(1, 1, 0.1));
        let p = proj_omega1_joint(&zeta, 1e-3, &ZetaBounds::default()).unwrap();
        assert!((p.theta.sigma2 - 0.55).abs() < 1e-15);
        assert!((p.a[(0, 0)] - 0.55).abs() < 1e-15);
    }

    #[test]
    fn schedules() {
        let poly = Schedule {
            kind: ScheduleKind::Polynomial,
            a0: 1.0,
            b0: 1.0,
        };
        assert_eq!(schedule_at(&poly, 16), (0.125, 0.25));
        let clamp = Schedule { b0: 2.0, ..poly };
        assert_eq!(schedule_at(&clamp, 1).1, 1.0);
        let constant = Schedule {
            kind: ScheduleKind::Constant,
            a0: 0.01,
            b0: 0.9,
        };
        for t in [1, 10, 1000] {
            assert_eq!(schedule_at(&constant, t), (0.01, 0.9));
        }
    }

    #[test]
    fn adam_first_step_is_sign() {
        let mut s = StepState::new(StepRule::adam(), 3);
        let dir = s.direction(&[2.0, -0.5, 0.0]);
        assert!((dir[0] - 1.0).abs() < 1e-6 && (dir[1] + 1.0).abs() < 1e-6 && dir[2] == 0.0);
    }
}
