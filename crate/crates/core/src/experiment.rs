//! Experiment harness: configuration, the epoch loop with best-epoch
//! selection, learning-rate grid search, synthetic data and result tables.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{
    load_csv, split_indices, standardize, BatchSampler, Dataset, Sampling, TargetColumn,
};
use crate::error::{Error, Result};
use crate::features::{rff_init, FeatureMap, FeatureMapParams, MlpSpec, RffMap};
use crate::objective::{full_loss, normalized_nll, profiled_loss, HyperParams};
use crate::optim::{
    MinimaxConfig, OptimizerKind, ProjectionMode, Schedule, ScheduleKind, StepRule, Trainer,
    TrainerConfig, ZetaBounds,
};
use crate::predict::{posterior, predict_with_weights, rmse};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "STOCHGP_OUT_DIR";

/// Gradient norms above this mark a run as diverged.
pub const DIVERGENCE_GRAD_NORM: f64 = 1e12;

pub fn default_out_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("results"))
}

/// Learned feature map families.
///
/// Text form: `identity`, `linear:D`, `mlp:H1,H2,...`, `rff:D`,
/// `mlp-rff:H1,H2,...:D`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FeatureSpec {
    Identity,
    Linear {
        dim: usize,
    },
    /// ReLU on every layer, the last hidden width is the feature dimension.
    Mlp {
        hidden: Vec<usize>,
    },
    Rff {
        rff_dim: usize,
    },
    /// RFF stacked on an MLP.
    MlpRff {
        hidden: Vec<usize>,
        rff_dim: usize,
    },
}

impl FeatureSpec {
    /// Builds the map for `input_dim` inputs; random frequencies use `seed`.
    pub fn build(&self, input_dim: usize, seed: u64) -> Result<FeatureMap> {
        let mlp = |hidden: &[usize]| -> Result<FeatureMap> {
            let mut layer_dims = vec![input_dim];
            layer_dims.extend_from_slice(hidden);
            FeatureMap::mlp(MlpSpec {
                layer_dims,
                final_activation: true,
            })
        };
        match self {
            FeatureSpec::Identity => Ok(FeatureMap::identity(input_dim)),
            FeatureSpec::Linear { dim } => {
                if *dim == 0 {
                    return Err(Error::Config(
                        "linear feature dimension must be positive".into(),
                    ));
                }
                Ok(FeatureMap::linear(input_dim, *dim))
            }
            FeatureSpec::Mlp { hidden } => mlp(hidden),
            FeatureSpec::Rff { rff_dim } => {
                Ok(FeatureMap::Rff(RffMap::new(input_dim, *rff_dim, seed)?))
            }
            FeatureSpec::MlpRff { hidden, rff_dim } => {
                let inner = mlp(hidden)?;
                let outer = FeatureMap::Rff(RffMap::new(inner.output_dim(), *rff_dim, seed)?);
                FeatureMap::compose(outer, inner)
            }
        }
    }
}

fn parse_dims(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad layer width `{v}`")))
        })
        .collect()
}

impl FromStr for FeatureSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad feature spec `{s}`")))
        };
        match parts.as_slice() {
            ["identity"] => Ok(FeatureSpec::Identity),
            ["linear", d] => Ok(FeatureSpec::Linear { dim: num(d)? }),
            ["mlp", h] => Ok(FeatureSpec::Mlp {
                hidden: parse_dims(h)?,
            }),
            ["rff", d] => Ok(FeatureSpec::Rff { rff_dim: num(d)? }),
            ["mlp-rff", h, d] => Ok(FeatureSpec::MlpRff {
                hidden: parse_dims(h)?,
                rff_dim: num(d)?,
            }),
            _ => Err(Error::Config(format!("bad feature spec `{s}`"))),
        }
    }
}

impl fmt::Display for FeatureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |h: &[usize]| {
            h.iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        match self {
            FeatureSpec::Identity => write!(f, "identity"),
            FeatureSpec::Linear { dim } => write!(f, "linear:{dim}"),
            FeatureSpec::Mlp { hidden } => write!(f, "mlp:{}", join(hidden)),
            FeatureSpec::Rff { rff_dim } => write!(f, "rff:{rff_dim}"),
            FeatureSpec::MlpRff { hidden, rff_dim } => {
                write!(f, "mlp-rff:{}:{rff_dim}", join(hidden))
            }
        }
    }
}

/// Map family used to generate synthetic targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthMapKind {
    Linear,
    Mlp,
    Rff,
}

impl FromStr for SynthMapKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "linear" => Ok(SynthMapKind::Linear),
            "mlp" => Ok(SynthMapKind::Mlp),
            "rff" => Ok(SynthMapKind::Rff),
            other => Err(Error::Config(format!("unknown synthetic map `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    /// Input dimension.
    pub p: usize,
    /// Feature dimension of the generating map.
    pub d: usize,
    /// Noise variance.
    pub sigma2: f64,
    pub map: SynthMapKind,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n: 512,
            p: 8,
            d: 8,
            sigma2: 0.1,
            map: SynthMapKind::Linear,
            seed: 0,
        }
    }
}

/// Generating map and parameters behind a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub map: FeatureMap,
    pub alpha: FeatureMapParams,
    pub sigma2: f64,
}

/// Draws `y ~ N(0, ZZᵀ + σ²I)` as `y = Zv + σε` with `v ~ N(0, I_d)`,
/// `ε ~ N(0, I_n)`.
pub fn sample_gp_targets<R: rand::Rng + ?Sized>(
    z: &DMatrix<f64>,
    sigma2: f64,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if !(sigma2 >= 0.0) || !sigma2.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "noise variance must be non-negative, got {sigma2}"
        )));
    }
    let v = DVector::from_fn(z.ncols(), |_, _| StandardNormal.sample(rng));
    let sd = sigma2.sqrt();
    let mut y = z * v;
    for yi in y.iter_mut() {
        let e: f64 = StandardNormal.sample(rng);
        *yi += sd * e;
    }
    Ok(y)
}

/// Standard-normal inputs pushed through a randomly initialized map, targets
/// drawn from the induced GP prior.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, GroundTruth)> {
    if spec.n == 0 {
        return Err(Error::EmptyDataset);
    }
    if spec.p == 0 || spec.d == 0 {
        return Err(Error::InvalidArgument(
            "synthetic dimensions must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let x = DMatrix::from_fn(spec.n, spec.p, |_, _| StandardNormal.sample(&mut rng));
    let (map, alpha) = match spec.map {
        SynthMapKind::Linear => {
            let map = FeatureMap::linear(spec.p, spec.d);
            let alpha = map.init_params(spec.seed.wrapping_add(1));
            (map, alpha)
        }
        SynthMapKind::Mlp => {
            let map = FeatureMap::mlp(MlpSpec {
                layer_dims: vec![spec.p, spec.d, spec.d],
                final_activation: true,
            })?;
            let alpha = map.init_params(spec.seed.wrapping_add(1));
            (map, alpha)
        }
        SynthMapKind::Rff => rff_init(
            spec.p,
            spec.d,
            (spec.p as f64).sqrt(),
            1.0,
            spec.seed.wrapping_add(1),
        )?,
    };
    let z = map.eval(&alpha, &x)?;
    let y = sample_gp_targets(&z, spec.sigma2, &mut rng)?;
    Ok((
        Dataset::new(x, y)?,
        GroundTruth {
            map,
            alpha,
            sigma2: spec.sigma2,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "source")]
pub enum DataSource {
    Csv { path: PathBuf, target: TargetColumn },
    Synthetic(SyntheticSpec),
}

impl DataSource {
    /// Short name used for file names and table rows.
    pub fn label(&self) -> String {
        match self {
            DataSource::Csv { path, .. } => path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "data".into()),
            DataSource::Synthetic(s) => {
                let kind = match s.map {
                    SynthMapKind::Linear => "linear",
                    SynthMapKind::Mlp => "mlp",
                    SynthMapKind::Rff => "rff",
                };
                format!("synth-{kind}-n{}-p{}-d{}", s.n, s.p, s.d)
            }
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Csv { path, target } => load_csv(path, target),
            DataSource::Synthetic(spec) => Ok(gen_synthetic(spec)?.0),
        }
    }
}

pub const DEFAULT_GRID: [f64; 7] = [1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub features: FeatureSpec,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub epochs: usize,
    /// Base rate `a₀` for a single run.
    pub learning_rate: f64,
    pub lr_grid: Vec<f64>,
    pub schedule: ScheduleKind,
    /// SCGD averaging weight, also the MINIMAX dual step (base value `b₀`).
    pub b_t: f64,
    pub mu: f64,
    /// `μ ← growth·μ` every `mu_every` epochs (0 keeps `μ` fixed).
    pub mu_growth: f64,
    pub mu_every: usize,
    pub sigma_min: f64,
    pub init_sigma2: f64,
    pub bounds: ZetaBounds,
    pub step_rule: StepRule,
    pub matrix_step_scale: f64,
    pub shared_batch: bool,
    pub projection: ProjectionMode,
    pub sampling: Sampling,
    /// Share of rows used for training; 1 keeps everything and skips test RMSE.
    pub train_fraction: f64,
    pub split_seed: u64,
    pub init_seed: u64,
    pub batch_seed: u64,
    pub output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Synthetic(SyntheticSpec::default()),
            features: FeatureSpec::Linear { dim: 8 },
            optimizer: OptimizerKind::Scgd,
            batch_size: 32,
            epochs: 100,
            learning_rate: 1e-3,
            lr_grid: DEFAULT_GRID.to_vec(),
            schedule: ScheduleKind::Constant,
            b_t: 0.9,
            mu: 1.0,
            mu_growth: 1.0,
            mu_every: 0,
            sigma_min: 1e-3,
            init_sigma2: 1.0,
            bounds: ZetaBounds::default(),
            step_rule: StepRule::Sgd,
            matrix_step_scale: 1.0,
            shared_batch: false,
            projection: ProjectionMode::Sequential,
            sampling: Sampling::WithReplacement,
            train_fraction: 0.9,
            split_seed: 0,
            init_seed: 0,
            batch_seed: 0,
            output: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("bad value `{value}` for `{key}`"))),
    }
}

fn parse_keyword<T: serde::de::DeserializeOwned>(key: &str, value: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(value.trim().replace('-', "_")))
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.lr_grid.is_empty() {
            return Err(Error::Config("learning-rate grid is empty".into()));
        }
        if self
            .lr_grid
            .iter()
            .chain([&self.learning_rate])
            .any(|r| !(*r > 0.0) || !r.is_finite())
        {
            return Err(Error::Config(
                "learning rates must be positive and finite".into(),
            ));
        }
        if !(self.b_t > 0.0 && self.b_t <= 1.0) && self.optimizer == OptimizerKind::Scgd {
            return Err(Error::Config(format!("b_t = {} outside (0, 1]", self.b_t)));
        }
        if !(self.b_t >= 0.0) {
            return Err(Error::Config("b_t must be non-negative".into()));
        }
        if !(self.mu > 0.0) || !(self.mu_growth > 0.0) {
            return Err(Error::Config("mu and mu_growth must be positive".into()));
        }
        if !(self.sigma_min > 0.0) || !(self.init_sigma2 > 0.0) {
            return Err(Error::Config(
                "sigma_min and init_sigma2 must be positive".into(),
            ));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1]".into()));
        }
        if !(self.matrix_step_scale >= 0.0) {
            return Err(Error::Config(
                "matrix_step_scale must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Sets one field from its text form. Keys are the field names; the data
    /// source uses `data` (CSV path), `target`, and `synth.{n,p,d,sigma2,map,seed}`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let k = key.as_str();
        match k {
            "data" | "csv" => {
                let target = match &self.data {
                    DataSource::Csv { target, .. } => target.clone(),
                    DataSource::Synthetic(_) => TargetColumn::Name("y".into()),
                };
                self.data = DataSource::Csv {
                    path: PathBuf::from(value.trim()),
                    target,
                };
            }
            "target" => {
                let target: TargetColumn = parse(k, value)?;
                match &mut self.data {
                    DataSource::Csv { target: t, .. } => *t = target,
                    DataSource::Synthetic(_) => {
                        return Err(Error::Config("`target` needs a CSV data source".into()));
                    }
                }
            }
            _ if k.starts_with("synth.") => {
                let mut spec = match &self.data {
                    DataSource::Synthetic(s) => s.clone(),
                    DataSource::Csv { .. } => SyntheticSpec::default(),
                };
                match &k["synth.".len()..] {
                    "n" => spec.n = parse(k, value)?,
                    "p" => spec.p = parse(k, value)?,
                    "d" => spec.d = parse(k, value)?,
                    "sigma2" => spec.sigma2 = parse(k, value)?,
                    "map" => spec.map = parse(k, value)?,
                    "seed" => spec.seed = parse(k, value)?,
                    _ => return Err(Error::Config(format!("unknown key `{k}`"))),
                }
                self.data = DataSource::Synthetic(spec);
            }
            "features" => self.features = parse(k, value)?,
            "optimizer" => self.optimizer = parse(k, value)?,
            "batch_size" => self.batch_size = parse(k, value)?,
            "epochs" => self.epochs = parse(k, value)?,
            "learning_rate" | "lr" => self.learning_rate = parse(k, value)?,
            "lr_grid" | "grid" => {
                self.lr_grid = value
                    .split(',')
                    .filter(|v| !v.trim().is_empty())
                    .map(|v| parse(k, v))
                    .collect::<Result<_>>()?;
            }
            "schedule" => self.schedule = parse_keyword(k, value)?,
            "b_t" | "bt" => self.b_t = parse(k, value)?,
            "mu" => self.mu = parse(k, value)?,
            "mu_growth" => self.mu_growth = parse(k, value)?,
            "mu_every" => self.mu_every = parse(k, value)?,
            "sigma_min" => self.sigma_min = parse(k, value)?,
            "init_sigma2" => self.init_sigma2 = parse(k, value)?,
            "zeta_max" | "coord_max" => self.bounds.coord_max = parse(k, value)?,
            "sigma2_max" => self.bounds.sigma2_max = parse(k, value)?,
            "eig_max" => self.bounds.eig_max = parse(k, value)?,
            "step_rule" => {
                self.step_rule = match value.trim() {
                    "sgd" => StepRule::Sgd,
                    "adam" => StepRule::adam(),
                    other => return Err(Error::Config(format!("unknown step rule `{other}`"))),
                }
            }
            "matrix_step_scale" => self.matrix_step_scale = parse(k, value)?,
            "shared_batch" => self.shared_batch = parse_bool(k, value)?,
            "projection" => self.projection = parse_keyword(k, value)?,
            "sampling" => self.sampling = parse_keyword(k, value)?,
            "train_fraction" => self.train_fraction = parse(k, value)?,
            "split_seed" => self.split_seed = parse(k, value)?,
            "init_seed" => self.init_seed = parse(k, value)?,
            "batch_seed" => self.batch_seed = parse(k, value)?,
            "seed" => {
                let seed: u64 = parse(k, value)?;
                self.split_seed = seed;
                self.init_seed = seed;
                self.batch_seed = seed;
            }
            "output" => self.output = Some(PathBuf::from(value.trim())),
            _ => return Err(Error::Config(format!("unknown key `{k}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_kv_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            self.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    /// Reads a key-value file, a JSON config, or the config echoed in a run
    /// record.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if text.trim_start().starts_with('{') {
            let value: serde_json::Value = serde_json::from_str(&text)?;
            let cfg = match value.get("config") {
                Some(inner) => serde_json::from_value(inner.clone())?,
                None => serde_json::from_value(value)?,
            };
            return Ok(cfg);
        }
        let mut cfg = Self::default();
        cfg.apply_kv_text(&text)?;
        Ok(cfg)
    }

    pub fn run_name(&self, rate: f64) -> String {
        format!(
            "{}-{}-s{}-split{}-lr{:e}",
            self.data.label(),
            self.optimizer,
            self.batch_size,
            self.split_seed,
            rate
        )
    }

    fn trainer_config(&self) -> TrainerConfig {
        TrainerConfig {
            schedule: Schedule {
                kind: self.schedule,
                a0: self.learning_rate,
                b0: self.b_t,
            },
            minimax: MinimaxConfig {
                a: self.learning_rate,
                b: self.b_t,
                mu: self.mu,
                sigma_min: self.sigma_min,
                bounds: self.bounds,
                batch_size: self.batch_size,
                matrix_step_scale: self.matrix_step_scale,
                shared_batch: self.shared_batch,
                projection: self.projection,
            },
        }
    }
}

/// JSON has no infinities; non-finite values are written as strings.
mod json_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("NaN")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "NaN" => Ok(f64::NAN),
                _ => Err(serde::de::Error::custom(format!("bad number `{t}`"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Normalized negative log marginal likelihood on the training set.
    #[serde(with = "json_f64")]
    pub nll: f64,
    /// `l(θ)` at the current `w`.
    #[serde(with = "json_f64")]
    pub raw_loss: f64,
    pub sigma2: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub dataset: String,
    pub learning_rate: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub feature_dim: usize,
    #[serde(with = "json_f64")]
    pub initial_nll: f64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    /// Minimum of the logged NLL column; `inf` for diverged runs.
    #[serde(with = "json_f64")]
    pub best_nll: f64,
    pub best_sigma2: Option<f64>,
    /// Marginalized-`w` predictive mean, original target units.
    pub test_rmse: Option<f64>,
    /// Learned-`w` predictive mean, original target units.
    pub test_rmse_learned_w: Option<f64>,
    pub diverged: bool,
    pub divergence: Option<String>,
}

impl RunRecord {
    /// Equality ignoring wall-clock columns.
    pub fn same_outcome(&self, other: &RunRecord) -> bool {
        let strip = |r: &RunRecord| {
            let mut r = r.clone();
            r.epochs.iter_mut().for_each(|e| e.wall_ms = 0.0);
            serde_json::to_string(&r).expect("serializable record")
        };
        strip(self) == strip(other)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,nll,wall_ms\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{}\n", e.epoch, e.nll, e.wall_ms));
        }
        out
    }

    /// Writes `<dir>/<name>.json` and `<dir>/<name>.csv`; returns the JSON path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let name = self.config.run_name(self.learning_rate);
        let json = dir.join(format!("{name}.json"));
        let csv = dir.join(format!("{name}.csv"));
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        Ok(json)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Standardized train/test data plus the fitted scaler.
struct Prepared {
    train: Dataset,
    test: Option<Dataset>,
    test_targets_raw: Option<DVector<f64>>,
    target_mean: f64,
    target_std: f64,
}

fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let data = cfg.data.load()?;
    let (train_raw, test_raw) = if cfg.train_fraction >= 1.0 {
        (data, None)
    } else {
        let (tr, te) = split_indices(data.len(), cfg.train_fraction, cfg.split_seed)?;
        (data.subset(&tr), Some(data.subset(&te)))
    };
    let (train, scaler) = standardize(&train_raw);
    let test_targets_raw = test_raw.as_ref().map(|t| t.targets.clone());
    let test = test_raw.map(|t| scaler.transform(&t));
    Ok(Prepared {
        train,
        test,
        test_targets_raw,
        target_mean: scaler.target_mean,
        target_std: scaler.target_std,
    })
}

/// Normalized NLL at `(α, σ²)`, with `w` profiled out.
pub fn training_nll(map: &FeatureMap, theta: &HyperParams, data: &Dataset) -> Result<f64> {
    let z = map.eval(&theta.alpha, &data.features)?;
    Ok(normalized_nll(
        profiled_loss(&z, &data.targets, theta.sigma2)?,
        data.len(),
    ))
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunRecord> {
    run_with_rate(cfg, cfg.learning_rate)
}

/// Runs one configuration at base rate `rate`. Failures inside the epoch loop
/// mark the run diverged instead of returning an error.
pub fn run_with_rate(cfg: &ExperimentConfig, rate: f64) -> Result<RunRecord> {
    let mut cfg = cfg.clone();
    cfg.learning_rate = rate;
    cfg.validate()?;
    let prep = prepare(&cfg)?;
    let train = &prep.train;
    let n = train.len();

    let map = cfg.features.build(train.input_dim(), cfg.init_seed)?;
    let theta0 = HyperParams::init(&map, cfg.init_seed, cfg.init_sigma2);
    let initial_nll = training_nll(&map, &theta0, train).unwrap_or(f64::INFINITY);
    let tcfg = cfg.trainer_config();
    let mut trainer = Trainer::new(cfg.optimizer, &map, theta0, cfg.step_rule, cfg.mu, train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.batch_seed);
    let mut sampler = BatchSampler::new(n, cfg.batch_size, cfg.sampling)?;
    let iters_per_epoch = n.div_ceil(cfg.batch_size);

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, HyperParams)> = None;
    let mut divergence = None;
    let start = Instant::now();

    'outer: for epoch in 1..=cfg.epochs {
        if cfg.mu_every > 0 && epoch > 1 && (epoch - 1) % cfg.mu_every == 0 {
            trainer.mu *= cfg.mu_growth;
        }
        for _ in 0..iters_per_epoch {
            match trainer.advance(&map, train, &mut sampler, &mut rng, &tcfg) {
                Ok(norm) if norm.is_finite() && norm <= DIVERGENCE_GRAD_NORM => {}
                Ok(norm) => {
                    divergence = Some(format!(
                        "gradient norm {norm:e} at iteration {}",
                        trainer.iteration - 1
                    ));
                    break 'outer;
                }
                Err(e) => {
                    divergence = Some(e.to_string());
                    break 'outer;
                }
            }
        }
        let theta = trainer.theta();
        let nll = training_nll(&map, theta, train).unwrap_or(f64::NAN);
        let raw_loss = full_loss(&map, theta, train).unwrap_or(f64::NAN);
        if !nll.is_finite() || !theta.is_finite() {
            divergence = Some(format!("non-finite loss after epoch {epoch}"));
            break;
        }
        epochs.push(EpochRecord {
            epoch,
            nll,
            raw_loss,
            sigma2: theta.sigma2,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        if best.as_ref().is_none_or(|(_, b, _)| nll < *b) {
            best = Some((epoch, nll, theta.clone()));
        }
    }

    let diverged = divergence.is_some();
    let (best_epoch, best_nll, best_sigma2, test_rmse, test_rmse_learned_w) =
        match (&best, diverged) {
            (Some((epoch, nll, theta)), false) => {
                let (rmse_m, rmse_w) = match (&prep.test, &prep.test_targets_raw) {
                    (Some(test), Some(raw)) if !test.is_empty() => {
                        let unscale =
                            |v: DVector<f64>| v.map(|m| m * prep.target_std + prep.target_mean);
                        let post =
                            posterior(&map, &theta.alpha, theta.sigma2, train, &test.features)?;
                        let learned =
                            predict_with_weights(&map, &theta.alpha, &theta.w, &test.features)?;
                        (
                            Some(rmse(&unscale(post.mean), raw)?),
                            Some(rmse(&unscale(learned), raw)?),
                        )
                    }
                    _ => (None, None),
                };
                (Some(*epoch), *nll, Some(theta.sigma2), rmse_m, rmse_w)
            }
            _ => (None, f64::INFINITY, None, None, None),
        };

    Ok(RunRecord {
        dataset: cfg.data.label(),
        learning_rate: rate,
        n_train: n,
        n_test: prep.test.as_ref().map_or(0, |t| t.len()),
        feature_dim: map.output_dim(),
        initial_nll,
        epochs,
        best_epoch,
        best_nll,
        best_sigma2,
        test_rmse,
        test_rmse_learned_w,
        diverged,
        divergence,
        config: cfg,
    })
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub best_rate: f64,
    pub best: RunRecord,
    /// One record per grid rate, in grid order.
    pub runs: Vec<RunRecord>,
}

/// Runs every rate in `cfg.lr_grid` and keeps the one with the lowest
/// best-epoch NLL; ties go to the smaller rate.
pub fn grid_search(cfg: &ExperimentConfig) -> Result<GridResult> {
    cfg.validate()?;
    let runs = cfg
        .lr_grid
        .iter()
        .map(|&rate| run_with_rate(cfg, rate))
        .collect::<Result<Vec<_>>>()?;
    let best = runs
        .iter()
        .filter(|r| !r.diverged && r.best_nll.is_finite())
        .min_by(|a, b| {
            a.best_nll
                .total_cmp(&b.best_nll)
                .then(a.learning_rate.total_cmp(&b.learning_rate))
        })
        .ok_or(Error::AllDiverged)?
        .clone();
    Ok(GridResult {
        best_rate: best.learning_rate,
        best,
        runs,
    })
}

/// Quantity shown in table cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TableMetric {
    #[default]
    Nll,
    Rmse,
    RmseLearnedW,
}

impl FromStr for TableMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "nll" => Ok(TableMetric::Nll),
            "rmse" => Ok(TableMetric::Rmse),
            "rmse_learned_w" | "rmse-learned-w" => Ok(TableMetric::RmseLearnedW),
            other => Err(Error::Config(format!("unknown table metric `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableCell {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

/// Rows are `(dataset, batch size)`, columns optimizers, cells mean ± std
/// over split seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultTable {
    pub metric: TableMetric,
    pub columns: Vec<OptimizerKind>,
    pub rows: BTreeMap<(String, usize), BTreeMap<OptimizerKind, TableCell>>,
}

/// Merges run records. Several records for the same
/// `(dataset, batch size, optimizer, split seed)` are grid members; the one
/// with the lowest best-epoch NLL is kept. Input order does not matter.
pub fn assemble_table(records: &[RunRecord], metric: TableMetric) -> ResultTable {
    type Key = (String, usize, OptimizerKind, u64);
    let mut chosen: BTreeMap<Key, &RunRecord> = BTreeMap::new();
    for r in records {
        let key = (
            r.dataset.clone(),
            r.config.batch_size,
            r.config.optimizer,
            r.config.split_seed,
        );
        let better = match chosen.get(&key) {
            None => true,
            Some(prev) => r
                .best_nll
                .total_cmp(&prev.best_nll)
                .then(r.learning_rate.total_cmp(&prev.learning_rate))
                .is_lt(),
        };
        if better {
            chosen.insert(key, r);
        }
    }
    let mut values: BTreeMap<(String, usize), BTreeMap<OptimizerKind, Vec<f64>>> = BTreeMap::new();
    for ((dataset, s, opt, _), r) in &chosen {
        let v = match metric {
            TableMetric::Nll => r.best_nll,
            TableMetric::Rmse => r.test_rmse.unwrap_or(f64::NAN),
            TableMetric::RmseLearnedW => r.test_rmse_learned_w.unwrap_or(f64::NAN),
        };
        values
            .entry((dataset.clone(), *s))
            .or_default()
            .entry(*opt)
            .or_default()
            .push(v);
    }
    let mut columns: Vec<OptimizerKind> = chosen.keys().map(|k| k.2).collect();
    columns.sort();
    columns.dedup();
    let rows = values
        .into_iter()
        .map(|(key, cols)| {
            let cells = cols
                .into_iter()
                .map(|(opt, v)| {
                    let count = v.len();
                    let mean = v.iter().sum::<f64>() / count as f64;
                    let std = if count > 1 {
                        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (count - 1) as f64)
                            .sqrt()
                    } else {
                        0.0
                    };
                    (opt, TableCell { mean, std, count })
                })
                .collect();
            (key, cells)
        })
        .collect();
    ResultTable {
        metric,
        columns,
        rows,
    }
}

impl ResultTable {
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| dataset | s |");
        for c in &self.columns {
            out.push_str(&format!(" {c} |"));
        }
        out.push_str("\n|---|---|");
        out.push_str(&"---|".repeat(self.columns.len()));
        out.push('\n');
        for ((dataset, s), cells) in &self.rows {
            out.push_str(&format!("| {dataset} | {s} |"));
            for c in &self.columns {
                match cells.get(c) {
                    Some(cell) => out.push_str(&format!(" {:.4} ± {:.4} |", cell.mean, cell.std)),
                    None => out.push_str(" - |"),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,batch_size");
        for c in &self.columns {
            out.push_str(&format!(",{c}_mean,{c}_std"));
        }
        out.push('\n');
        for ((dataset, s), cells) in &self.rows {
            out.push_str(&format!("{dataset},{s}"));
            for c in &self.columns {
                match cells.get(c) {
                    Some(cell) => out.push_str(&format!(",{},{}", cell.mean, cell.std)),
                    None => out.push_str(",,"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Outcome of one self-check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Central differences of `f` at `x`.
pub fn central_differences(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            let orig = probe[k];
            probe[k] = orig + h;
            let up = f(&probe);
            probe[k] = orig - h;
            let down = f(&probe);
            probe[k] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖b‖, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(floor)
}

/// Quick numerical self-checks of the identities and gradients the
/// optimizers rely on.
pub fn run_checks(seed: u64) -> Vec<CheckOutcome> {
    use crate::data::IndexBatch;
    use crate::objective::{exact_nll_oracle, full_loss_gradient, ridge_identity_check};
    use crate::optim::{
        bsgd_direction, grad_psi_dual, grad_psi_zeta, initial_augmented, proj_omega1, proj_omega2,
        scgd_direction, AugmentedState, DualVariable, ScgdState,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = move || -> f64 { StandardNormal.sample(&mut rng) };
    let mut out = Vec::new();
    let mut record = |name: &str, result: Result<(bool, String)>| {
        let (passed, detail) = result.unwrap_or_else(|e| (false, format!("error: {e}")));
        out.push(CheckOutcome {
            name: name.to_string(),
            passed,
            detail,
        });
    };

    let mut worst = 0.0f64;
    let ridge = (|| {
        for k in 0..20 {
            let (n, d) = (5 + k, 2 + k % 5);
            let v = DMatrix::from_fn(n, d, |_, _| normal());
            let b = DVector::from_fn(n, |_, _| normal());
            let lambda = 10f64.powf(-3.0 + 5.0 * (k as f64) / 19.0);
            let (lhs, rhs) = ridge_identity_check(&v, &b, lambda)?;
            worst = worst.max((lhs - rhs).abs() / lhs.abs().max(1e-300));
        }
        Ok((worst <= 1e-8, format!("max relative error {worst:.2e}")))
    })();
    record("ridge identity", ridge);

    let x = DMatrix::from_fn(5, 3, |_, _| normal());
    let y = DVector::from_fn(5, |_, _| normal());
    let data = Dataset::new(x, y).expect("finite synthetic data");
    let map = FeatureMap::mlp(MlpSpec {
        layer_dims: vec![3, 4, 3],
        final_activation: false,
    })
    .expect("valid layers");
    let mut theta = HyperParams::init(&map, seed, 0.7);
    theta.w = DVector::from_fn(3, |_, _| normal());

    let profiled = (|| {
        let z = map.eval(&theta.alpha, &data.features)?;
        let a = profiled_loss(&z, &data.targets, theta.sigma2)?;
        let b = exact_nll_oracle(&map, &theta.alpha, theta.sigma2, &data)?;
        let err = (a - b).abs() / b.abs();
        Ok((err <= 1e-8, format!("relative error {err:.2e}")))
    })();
    record("profiled loss equals kernel NLL", profiled);

    let gradient = (|| {
        let g = full_loss_gradient(&map, &theta, &data)?.to_flat();
        let base = theta.clone();
        let fd = central_differences(
            |p| {
                let mut t = base.clone();
                t.set_flat(p).expect("same length");
                full_loss(&map, &t, &data).unwrap_or(f64::NAN)
            },
            &theta.to_flat(),
            1e-5,
        );
        let err = relative_error(&g, &fd, 1e-8);
        Ok((err < 1e-5, format!("relative error {err:.2e}")))
    })();
    record("loss gradient vs finite differences", gradient);

    let coincide = (|| {
        let full = IndexBatch::full(data.len());
        let state = ScgdState::new(&map, theta.clone(), &data)?;
        let (scgd, _) = scgd_direction(&map, &state, &full, 1.0, &data)?;
        let bsgd = bsgd_direction(&map, &theta, &full, &data)?;
        let err = relative_error(&scgd.to_flat(), &bsgd.to_flat(), 1e-300);
        Ok((err <= 1e-12, format!("relative difference {err:.2e}")))
    })();
    record("scgd and bsgd coincide at full batch", coincide);

    let unbiased = (|| {
        let small = data.subset(&[0, 1, 2, 3]);
        let zeta = initial_augmented(&map, theta.clone(), &small)?;
        let zeta = AugmentedState {
            a: &zeta.a + DMatrix::identity(3, 3) * 0.3,
            ..zeta
        };
        let dual = proj_omega2(&DualVariable(DMatrix::from_fn(3, 3, |i, j| {
            (i + 2 * j) as f64 * 0.1 - 0.2
        })));
        let mu = 1.3;
        let full = IndexBatch::full(4);
        let gz = grad_psi_zeta(&map, &zeta, &dual, &full, mu, &small)?.to_flat();
        let gb = grad_psi_dual(&map, &zeta, &full, mu, &small)?;
        let mut mean_z = vec![0.0; gz.len()];
        let mut mean_b = DMatrix::zeros(3, 3);
        for i in 0..4 {
            for j in 0..4 {
                let batch = IndexBatch::new(vec![i, j], 4)?;
                let g = grad_psi_zeta(&map, &zeta, &dual, &batch, mu, &small)?.to_flat();
                mean_z.iter_mut().zip(&g).for_each(|(m, v)| *m += v / 16.0);
                mean_b += grad_psi_dual(&map, &zeta, &batch, mu, &small)? / 16.0;
            }
        }
        let ez = relative_error(&mean_z, &gz, 1.0);
        let eb = (mean_b - &gb).norm() / gb.norm().max(1.0);
        let err = ez.max(eb);
        Ok((err <= 1e-10, format!("max deviation {err:.2e}")))
    })();
    record("minimax gradients unbiased by enumeration", unbiased);

    let projection = (|| {
        let bounds = ZetaBounds::default();
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let m = DMatrix::from_fn(3, 3, |_, _| normal());
            let zeta = AugmentedState {
                theta: HyperParams::new(
                    DVector::from_fn(3, |_, _| normal()),
                    FeatureMapParams::empty(),
                    normal().abs(),
                ),
                a: m,
            };
            let once = proj_omega1(&zeta, 1e-3, &bounds)?;
            let twice = proj_omega1(&once, 1e-3, &bounds)?;
            let diff = relative_error(&once.to_flat(), &twice.to_flat(), 1.0);
            worst = worst.max(diff);
        }
        Ok((worst <= 1e-12, format!("max idempotence gap {worst:.2e}")))
    })();
    record("projection idempotent", projection);

    out
}
