//! Stochastic hyperparameter learning for Gaussian process regression with
//! feature-map covariances `k_α(x, x′) = φ_α(x)ᵀφ_α(x′)`.
//!
//! The marginal likelihood is rewritten as
//!
//! ```text
//! l(θ) = Σ_i g_i(θ) + log|Σ_i F_i(θ)|,   θ = (w, α, σ²)
//! g_i  = (y_i − φ_iᵀw)²/σ² + ‖w‖²/n + (n − d) log σ² / n
//! F_i  = φ_i φ_iᵀ + (σ²/n) I
//! ```
//!
//! whose minimum over `w` is the usual `yᵀ(K + σ²I)⁻¹y + log|K + σ²I|`.
//! [`optim`] provides the MINIMAX and SCGD optimizers, whose mini-batch
//! gradients are unbiased for this objective, and the biased BSGD baseline.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod experiment;
pub mod features;
pub mod linalg;
pub mod objective;
pub mod optim;
pub mod predict;

pub use data::{BatchSampler, Dataset, IndexBatch, Sampling, TargetColumn};
pub use error::{Error, Result};
pub use experiment::{gen_synthetic, grid_search, run_experiment, ExperimentConfig, RunRecord};
pub use features::{FeatureBatch, FeatureMap, FeatureMapParams, MlpSpec};
pub use objective::{HyperParams, ThetaGrad};
pub use optim::{OptimizerKind, Trainer};
pub use predict::{posterior, Posterior};
