//! Python module `stochgp`.
//!
//! Matrices cross the boundary as lists of rows (`list[list[float]]`), so the
//! module works with plain lists, NumPy arrays (`.tolist()`) or anything else
//! that converts to nested sequences of floats.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stochgp::data::{load_csv as core_load_csv, BatchSampler, Dataset, Sampling, TargetColumn};
use stochgp::experiment::{self, ExperimentConfig, FeatureSpec, SyntheticSpec};
use stochgp::objective::{self, HyperParams};
use stochgp::optim::{
    MinimaxConfig, OptimizerKind, Schedule, ScheduleKind, StepRule, Trainer, TrainerConfig,
};
use stochgp::FeatureMap;

fn err(e: stochgp::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn dataset(x: &[Vec<f64>], y: Vec<f64>) -> PyResult<Dataset> {
    Dataset::new(matrix(x)?, DVector::from_vec(y)).map_err(err)
}

fn json_to_py(py: Python<'_>, text: &str) -> PyResult<Py<PyAny>> {
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn parse_config(text: &str) -> PyResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    cfg.apply_kv_text(text).map_err(err)?;
    Ok(cfg)
}

/// A feature map together with the hyperparameters `θ = (w, α, σ²)`.
#[pyclass(name = "Model", from_py_object)]
#[derive(Clone)]
struct PyModel {
    map: FeatureMap,
    theta: HyperParams,
}

#[pymethods]
impl PyModel {
    /// `features` uses the command-line syntax: `identity`, `linear:D`,
    /// `mlp:H1,H2`, `rff:D` or `mlp-rff:H1,H2:D`.
    #[new]
    #[pyo3(signature = (features, input_dim, seed = 0, sigma2 = 1.0))]
    fn new(features: &str, input_dim: usize, seed: u64, sigma2: f64) -> PyResult<Self> {
        let spec: FeatureSpec = features.parse().map_err(err)?;
        let map = spec.build(input_dim, seed).map_err(err)?;
        let theta = HyperParams::init(&map, seed, sigma2);
        Ok(Self { map, theta })
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.map.input_dim()
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.map.output_dim()
    }

    #[getter]
    fn sigma2(&self) -> f64 {
        self.theta.sigma2
    }

    #[setter]
    fn set_sigma2(&mut self, value: f64) -> PyResult<()> {
        if !(value > 0.0) {
            return Err(PyValueError::new_err("sigma2 must be positive"));
        }
        self.theta.sigma2 = value;
        Ok(())
    }

    #[getter]
    fn w(&self) -> Vec<f64> {
        self.theta.w.iter().copied().collect()
    }

    #[getter]
    fn alpha(&self) -> Vec<f64> {
        self.theta.alpha.as_slice().to_vec()
    }

    /// Flat `[w, α, σ²]`.
    fn params(&self) -> Vec<f64> {
        self.theta.to_flat()
    }

    fn set_params(&mut self, flat: Vec<f64>) -> PyResult<()> {
        self.theta.set_flat(&flat).map_err(err)
    }

    /// Feature matrix `Z = φ_α(X)`.
    fn features(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(
            &self
                .map
                .eval(&self.theta.alpha, &matrix(&x)?)
                .map_err(err)?,
        ))
    }

    /// `l(θ)` on `(x, y)`.
    fn loss(&self, x: Vec<Vec<f64>>, y: Vec<f64>) -> PyResult<f64> {
        objective::full_loss(&self.map, &self.theta, &dataset(&x, y)?).map_err(err)
    }

    /// `∇l(θ)`, flat in the order of [`params`].
    fn gradient(&self, x: Vec<Vec<f64>>, y: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(
            objective::full_loss_gradient(&self.map, &self.theta, &dataset(&x, y)?)
                .map_err(err)?
                .to_flat(),
        )
    }

    /// `yᵀ(K + σ²I)⁻¹y + log|K + σ²I|` with `K = ZZᵀ`, built in kernel space.
    fn kernel_nll(&self, x: Vec<Vec<f64>>, y: Vec<f64>) -> PyResult<f64> {
        objective::exact_nll_oracle(
            &self.map,
            &self.theta.alpha,
            self.theta.sigma2,
            &dataset(&x, y)?,
        )
        .map_err(err)
    }

    /// Predictive mean and variance (noise included) at `test_x`.
    fn predict(
        &self,
        train_x: Vec<Vec<f64>>,
        train_y: Vec<f64>,
        test_x: Vec<Vec<f64>>,
    ) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let train = dataset(&train_x, train_y)?;
        let post = stochgp::posterior(
            &self.map,
            &self.theta.alpha,
            self.theta.sigma2,
            &train,
            &matrix(&test_x)?,
        )
        .map_err(err)?;
        Ok((
            post.mean.iter().copied().collect(),
            post.variance.iter().copied().collect(),
        ))
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(input_dim={}, feature_dim={}, sigma2={})",
            self.map.input_dim(),
            self.map.output_dim(),
            self.theta.sigma2
        )
    }
}

/// Stepwise MINIMAX, SCGD or BSGD training on a fixed dataset.
#[pyclass(name = "Trainer")]
struct PyTrainer {
    map: FeatureMap,
    data: Dataset,
    trainer: Trainer,
    sampler: BatchSampler,
    rng: ChaCha8Rng,
    cfg: TrainerConfig,
}

#[pymethods]
impl PyTrainer {
    #[new]
    #[pyo3(signature = (
        model, x, y, optimizer = "scgd", batch_size = 32, learning_rate = 1e-3, b_t = 0.9, mu = 1.0,
        schedule = "constant", adam = false, seed = 0
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        model: &PyModel,
        x: Vec<Vec<f64>>,
        y: Vec<f64>,
        optimizer: &str,
        batch_size: usize,
        learning_rate: f64,
        b_t: f64,
        mu: f64,
        schedule: &str,
        adam: bool,
        seed: u64,
    ) -> PyResult<Self> {
        let kind: OptimizerKind = optimizer.parse().map_err(err)?;
        let schedule = match schedule {
            "constant" => ScheduleKind::Constant,
            "polynomial" => ScheduleKind::Polynomial,
            other => return Err(PyValueError::new_err(format!("unknown schedule `{other}`"))),
        };
        let data = dataset(&x, y)?;
        let rule = if adam {
            StepRule::adam()
        } else {
            StepRule::Sgd
        };
        let trainer =
            Trainer::new(kind, &model.map, model.theta.clone(), rule, mu, &data).map_err(err)?;
        let sampler =
            BatchSampler::new(data.len(), batch_size, Sampling::WithReplacement).map_err(err)?;
        Ok(Self {
            map: model.map.clone(),
            data,
            trainer,
            sampler,
            rng: ChaCha8Rng::seed_from_u64(seed),
            cfg: TrainerConfig {
                schedule: Schedule {
                    kind: schedule,
                    a0: learning_rate,
                    b0: b_t,
                },
                minimax: MinimaxConfig {
                    batch_size,
                    ..MinimaxConfig::default()
                },
            },
        })
    }

    /// Runs `iterations` steps; returns the last stochastic gradient norm.
    #[pyo3(signature = (iterations = 1))]
    fn step(&mut self, iterations: usize) -> PyResult<f64> {
        let mut norm = f64::NAN;
        for _ in 0..iterations {
            norm = self
                .trainer
                .advance(
                    &self.map,
                    &self.data,
                    &mut self.sampler,
                    &mut self.rng,
                    &self.cfg,
                )
                .map_err(err)?;
        }
        Ok(norm)
    }

    #[getter]
    fn iteration(&self) -> u64 {
        self.trainer.iteration
    }

    /// Current `l(θ)` on the training data.
    fn loss(&self) -> PyResult<f64> {
        objective::full_loss(&self.map, self.trainer.theta(), &self.data).map_err(err)
    }

    /// Normalized training NLL with `w` marginalized out.
    fn nll(&self) -> PyResult<f64> {
        experiment::training_nll(&self.map, self.trainer.theta(), &self.data).map_err(err)
    }

    /// Snapshot of the current hyperparameters.
    fn model(&self) -> PyModel {
        PyModel {
            map: self.map.clone(),
            theta: self.trainer.theta().clone(),
        }
    }
}

/// Synthetic data from a random generating map: returns `(x, y)`.
#[pyfunction]
#[pyo3(signature = (n, p, d, sigma2 = 0.1, map = "linear", seed = 0))]
fn gen_synthetic(
    n: usize,
    p: usize,
    d: usize,
    sigma2: f64,
    map: &str,
    seed: u64,
) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
    let spec = SyntheticSpec {
        n,
        p,
        d,
        sigma2,
        map: map.parse().map_err(err)?,
        seed,
    };
    let (data, _) = experiment::gen_synthetic(&spec).map_err(err)?;
    Ok((rows(&data.features), data.targets.iter().copied().collect()))
}

/// Reads a numeric CSV with a header row; returns `(x, y)`.
#[pyfunction]
fn load_csv(path: &str, target: &str) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
    let data = core_load_csv(path, &TargetColumn::Name(target.to_string())).map_err(err)?;
    Ok((rows(&data.features), data.targets.iter().copied().collect()))
}

/// Runs one experiment described by `key = value` lines (the config-file
/// syntax) and returns the run record as a dict.
#[pyfunction]
#[pyo3(signature = (config = ""))]
fn run_experiment(py: Python<'_>, config: &str) -> PyResult<Py<PyAny>> {
    let record = experiment::run_experiment(&parse_config(config)?).map_err(err)?;
    let text = serde_json::to_string(&record).map_err(|e| PyValueError::new_err(e.to_string()))?;
    json_to_py(py, &text)
}

/// Learning-rate grid search; returns `{"best_rate", "best", "runs"}`.
#[pyfunction]
#[pyo3(signature = (config = ""))]
fn grid_search(py: Python<'_>, config: &str) -> PyResult<Py<PyAny>> {
    let result = experiment::grid_search(&parse_config(config)?).map_err(err)?;
    let value = serde_json::json!({
        "best_rate": result.best_rate,
        "best": result.best,
        "runs": result.runs,
    });
    json_to_py(py, &value.to_string())
}

/// `(bᵀ(VVᵀ + λI)⁻¹b, min_w (1/λ)‖Vw − b‖² + ‖w‖²)`.
#[pyfunction]
fn ridge_identity(v: Vec<Vec<f64>>, b: Vec<f64>, lam: f64) -> PyResult<(f64, f64)> {
    objective::ridge_identity_check(&matrix(&v)?, &DVector::from_vec(b), lam).map_err(err)
}

/// Numerical self-checks: list of `(name, passed, detail)`.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn run_checks(seed: u64) -> Vec<(String, bool, String)> {
    experiment::run_checks(seed)
        .into_iter()
        .map(|c| (c.name, c.passed, c.detail))
        .collect()
}

#[pymodule(name = "stochgp")]
fn stochgp_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(gen_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(load_csv, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(grid_search, m)?)?;
    m.add_function(wrap_pyfunction!(ridge_identity, m)?)?;
    m.add_function(wrap_pyfunction!(run_checks, m)?)?;
    Ok(())
}
