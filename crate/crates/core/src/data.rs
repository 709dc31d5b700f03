//! Dataset ingestion, standardization, splitting and mini-batch sampling.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Regression data: an `n × p` feature matrix and `n` targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: DMatrix<f64>,
    pub targets: DVector<f64>,
    pub names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(features: DMatrix<f64>, targets: DVector<f64>) -> Result<Self> {
        if features.nrows() != targets.len() {
            return Err(Error::DimensionMismatch {
                what: "dataset rows vs targets",
                expected: features.nrows(),
                found: targets.len(),
            });
        }
        if features
            .iter()
            .chain(targets.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::InvalidArgument(
                "dataset contains non-finite values".into(),
            ));
        }
        Ok(Self {
            features,
            targets,
            names: None,
        })
    }

    pub fn with_names(mut self, names: Vec<String>) -> Self {
        self.names = Some(names);
        self
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Rows `indices` (repeats allowed) as a new feature matrix.
    pub fn rows(&self, indices: &[usize]) -> DMatrix<f64> {
        self.features.select_rows(indices)
    }

    pub fn targets_at(&self, indices: &[usize]) -> DVector<f64> {
        DVector::from_iterator(indices.len(), indices.iter().map(|&i| self.targets[i]))
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.rows(indices),
            targets: self.targets_at(indices),
            names: self.names.clone(),
        }
    }
}

/// Which CSV column holds the regression target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TargetColumn {
    Index(usize),
    Name(String),
}

impl std::str::FromStr for TargetColumn {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s.parse::<usize>() {
            Ok(i) => TargetColumn::Index(i),
            Err(_) => TargetColumn::Name(s.to_string()),
        })
    }
}

/// Reads a headered, comma-separated numeric table.
///
/// Row numbers in errors are 1-based data rows (the header is row 0).
pub fn load_csv(path: impl AsRef<Path>, target: &TargetColumn) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(file);
    let header: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();

    let target_idx = match target {
        TargetColumn::Index(i) if *i < header.len() => *i,
        TargetColumn::Index(i) => return Err(Error::MissingTarget(i.to_string())),
        TargetColumn::Name(name) => header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingTarget(name.clone()))?,
    };

    let p = header.len() - 1;
    let mut values = Vec::new();
    let mut targets = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = r + 1;
        if record.len() != header.len() {
            return Err(Error::DimensionMismatch {
                what: "csv record width",
                expected: header.len(),
                found: record.len(),
            });
        }
        for (c, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            let v: f64 = cell.parse().map_err(|_| Error::NonNumeric {
                row,
                column: header[c].clone(),
                value: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    row,
                    column: header[c].clone(),
                });
            }
            if c == target_idx {
                targets.push(v);
            } else {
                values.push(v);
            }
        }
    }
    if targets.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = targets.len();
    let names = header
        .iter()
        .enumerate()
        .filter(|(c, _)| *c != target_idx)
        .map(|(_, h)| h.clone())
        .collect();
    Ok(Dataset {
        features: DMatrix::from_row_slice(n, p, &values),
        targets: DVector::from_vec(targets),
        names: Some(names),
    })
}

/// Writes a dataset in the format [`load_csv`] reads, target last.
pub fn write_csv(path: impl AsRef<Path>, data: &Dataset, target_name: &str) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = match &data.names {
        Some(names) => names.clone(),
        None => (0..data.input_dim()).map(|j| format!("x{j}")).collect(),
    };
    header.push(target_name.to_string());
    writer.write_record(&header)?;
    for i in 0..data.len() {
        let row: Vec<String> = data
            .features
            .row(i)
            .iter()
            .chain(std::iter::once(&data.targets[i]))
            .map(|v| v.to_string())
            .collect();
        writer.write_record(&row)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Affine per-column standardization and its inverse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
    pub constant_columns: Vec<usize>,
}

fn moments<'a>(values: impl Iterator<Item = &'a f64> + Clone, n: usize) -> (f64, f64) {
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

/// Centers and scales every feature column and the target (population
/// standard deviation). Zero-variance columns keep deviation 1.
pub fn standardize(d: &Dataset) -> (Dataset, Scaler) {
    let n = d.len();
    let p = d.input_dim();
    let mut feature_mean = Vec::with_capacity(p);
    let mut feature_std = Vec::with_capacity(p);
    let mut constant_columns = Vec::new();
    for j in 0..p {
        let (mean, std) = moments(d.features.column(j).iter(), n);
        feature_mean.push(mean);
        if std > 0.0 {
            feature_std.push(std);
        } else {
            feature_std.push(1.0);
            constant_columns.push(j);
        }
    }
    let (target_mean, mut target_std) = moments(d.targets.iter(), n);
    if !(target_std > 0.0) {
        target_std = 1.0;
    }
    let scaler = Scaler {
        feature_mean,
        feature_std,
        target_mean,
        target_std,
        constant_columns,
    };
    (scaler.transform(d), scaler)
}

impl Scaler {
    pub fn transform_features(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            col.iter_mut()
                .for_each(|v| *v = (*v - self.feature_mean[j]) / self.feature_std[j]);
        }
        out
    }

    pub fn transform(&self, d: &Dataset) -> Dataset {
        Dataset {
            features: self.transform_features(&d.features),
            targets: d.targets.map(|v| (v - self.target_mean) / self.target_std),
            names: d.names.clone(),
        }
    }

    pub fn inverse(&self, d: &Dataset) -> Dataset {
        let mut features = d.features.clone();
        for (j, mut col) in features.column_iter_mut().enumerate() {
            col.iter_mut()
                .for_each(|v| *v = *v * self.feature_std[j] + self.feature_mean[j]);
        }
        Dataset {
            features,
            targets: self.inverse_targets(&d.targets),
            names: d.names.clone(),
        }
    }

    pub fn inverse_targets(&self, y: &DVector<f64>) -> DVector<f64> {
        y.map(|v| v * self.target_std + self.target_mean)
    }
}

/// Train/test row indices for a seeded uniform random split.
///
/// The train size is `round(train_fraction · n)` clamped to `[1, n − 1]`.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    if n < 2 {
        return Err(Error::InvalidArgument(
            "split needs at least two rows".into(),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let test = order.split_off(n_train);
    Ok((order, test))
}

pub fn split(d: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = split_indices(d.len(), train_fraction, seed)?;
    Ok((d.subset(&train), d.subset(&test)))
}

/// A mini-batch of zero-based row indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexBatch {
    pub indices: Vec<usize>,
    pub n: usize,
}

impl IndexBatch {
    pub fn new(indices: Vec<usize>, n: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument(
                "batch size must be at least 1".into(),
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidArgument(format!(
                "index {bad} out of range for n = {n}"
            )));
        }
        Ok(Self { indices, n })
    }

    /// The whole population in order.
    pub fn full(n: usize) -> Self {
        Self {
            indices: (0..n).collect(),
            n,
        }
    }

    pub fn size(&self) -> usize {
        self.indices.len()
    }

    /// The `n / s` factor that makes batch sums unbiased for population sums.
    pub fn scale(&self) -> f64 {
        self.n as f64 / self.indices.len() as f64
    }
}

/// Draws `s` indices uniformly from `0..n` with replacement.
pub fn sample_batch<R: Rng + ?Sized>(n: usize, s: usize, rng: &mut R) -> Result<IndexBatch> {
    if s == 0 {
        return Err(Error::InvalidArgument(
            "batch size must be at least 1".into(),
        ));
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let indices = (0..s).map(|_| rng.random_range(0..n)).collect();
    Ok(IndexBatch { indices, n })
}

/// How the harness draws mini-batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Independent uniform draws with replacement.
    #[default]
    WithReplacement,
    /// Shuffle once per epoch and walk it in consecutive chunks.
    Epoch,
}

/// Stateful batch source over a population of `n` rows.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    n: usize,
    s: usize,
    mode: Sampling,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub fn new(n: usize, s: usize, mode: Sampling) -> Result<Self> {
        if s == 0 {
            return Err(Error::InvalidArgument(
                "batch size must be at least 1".into(),
            ));
        }
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        Ok(Self {
            n,
            s: if mode == Sampling::Epoch { s.min(n) } else { s },
            mode,
            order: Vec::new(),
            cursor: usize::MAX,
        })
    }

    pub fn next_batch<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<IndexBatch> {
        match self.mode {
            Sampling::WithReplacement => sample_batch(self.n, self.s, rng),
            Sampling::Epoch => {
                if self.cursor >= self.n {
                    self.order = (0..self.n).collect();
                    self.order.shuffle(rng);
                    self.cursor = 0;
                }
                let end = (self.cursor + self.s).min(self.n);
                let indices = self.order[self.cursor..end].to_vec();
                self.cursor = end;
                Ok(IndexBatch { indices, n: self.n })
            }
        }
    }
}
