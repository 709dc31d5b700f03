//! Differentiable feature maps `φ_α : ℝᵖ → ℝᵈ`.
//!
//! Three building blocks (a bias-free linear layer, a ReLU multilayer
//! perceptron and random Fourier features) plus composition. All learnable
//! parameters live in one flat vector described by a [`Segment`] layout;
//! weight matrices are stored column-major with shape `(out, in)`.
//!
//! Every map has an analytic backward pass. A [`FeatureBatch`] remembers the
//! parameter version it was produced with so that a backward pass against
//! modified parameters is rejected instead of silently returning a wrong
//! gradient.

use std::f64::consts::PI;
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

/// A named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat learnable parameters `α ∈ ℝᵐ` of a feature map.
#[derive(Debug, Clone)]
pub struct FeatureMapParams {
    flat: Vec<f64>,
    layout: Vec<Segment>,
    version: u64,
}

impl PartialEq for FeatureMapParams {
    fn eq(&self, other: &Self) -> bool {
        self.flat == other.flat && self.layout == other.layout
    }
}

impl FeatureMapParams {
    pub fn new(flat: Vec<f64>, layout: Vec<Segment>) -> Result<Self> {
        let mut offset = 0;
        for seg in &layout {
            if seg.offset != offset {
                return Err(Error::Snapshot(format!(
                    "segment `{}` starts at {} but {} expected",
                    seg.name, seg.offset, offset
                )));
            }
            offset += seg.len();
        }
        if offset != flat.len() {
            return Err(Error::DimensionMismatch {
                what: "parameter layout length",
                expected: offset,
                found: flat.len(),
            });
        }
        Ok(Self {
            flat,
            layout,
            version: fresh_version(),
        })
    }

    pub fn empty() -> Self {
        Self {
            flat: Vec::new(),
            layout: Vec::new(),
            version: fresh_version(),
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.flat
    }

    pub fn layout(&self) -> &[Segment] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Mutates the values in place; any outstanding [`FeatureBatch`] becomes stale.
    pub fn update(&mut self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.flat);
        self.version = fresh_version();
    }

    pub fn set_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.flat.len() {
            return Err(Error::DimensionMismatch {
                what: "parameter vector",
                expected: self.flat.len(),
                found: values.len(),
            });
        }
        self.update(|flat| flat.copy_from_slice(values));
        Ok(())
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.flat[s.offset..s.offset + s.len()])
    }

    /// `(name, shape, values)` per segment.
    pub fn named(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        self.layout
            .iter()
            .map(|s| {
                (
                    s.name.clone(),
                    s.shape.clone(),
                    self.flat[s.offset..s.offset + s.len()].to_vec(),
                )
            })
            .collect()
    }

    /// Inverse of [`FeatureMapParams::named`].
    pub fn from_named(parts: Vec<(String, Vec<usize>, Vec<f64>)>) -> Result<Self> {
        let mut flat = Vec::new();
        let mut layout = Vec::new();
        for (name, shape, values) in parts {
            let seg = Segment {
                name,
                offset: flat.len(),
                shape,
            };
            if seg.len() != values.len() {
                return Err(Error::DimensionMismatch {
                    what: "named segment",
                    expected: seg.len(),
                    found: values.len(),
                });
            }
            flat.extend(values);
            layout.push(seg);
        }
        Self::new(flat, layout)
    }

    /// Text layout header followed by little-endian `f64` values.
    pub fn to_snapshot(&self) -> Vec<u8> {
        let mut header = format!("stochgp-params v1\nsegments {}\n", self.layout.len());
        for seg in &self.layout {
            let shape: Vec<String> = seg.shape.iter().map(|d| d.to_string()).collect();
            header.push_str(&format!(
                "{} {} {}\n",
                seg.name,
                seg.offset,
                shape.join("x")
            ));
        }
        header.push_str(&format!("values {}\n", self.flat.len()));
        let mut out = header.into_bytes();
        write_f64s(&mut out, &self.flat);
        out
    }

    pub fn from_snapshot(bytes: &[u8]) -> Result<Self> {
        let mut reader = SnapshotReader::new(bytes);
        reader.expect_line("stochgp-params v1")?;
        let count: usize = reader.keyed("segments")?;
        let mut layout = Vec::with_capacity(count);
        for _ in 0..count {
            let line = reader.line()?;
            let parts: Vec<&str> = line.split(' ').collect();
            if parts.len() != 3 {
                return Err(Error::Snapshot(format!("bad segment line `{line}`")));
            }
            let offset = parts[1]
                .parse()
                .map_err(|_| Error::Snapshot(format!("bad offset in `{line}`")))?;
            let shape = if parts[2].is_empty() {
                Vec::new()
            } else {
                parts[2]
                    .split('x')
                    .map(|d| {
                        d.parse()
                            .map_err(|_| Error::Snapshot(format!("bad shape in `{line}`")))
                    })
                    .collect::<Result<Vec<usize>>>()?
            };
            layout.push(Segment {
                name: parts[0].to_string(),
                offset,
                shape,
            });
        }
        let m: usize = reader.keyed("values")?;
        let flat = reader.f64s(m)?;
        reader.finish()?;
        Self::new(flat, layout)
    }
}

pub(crate) fn write_f64s(out: &mut Vec<u8>, values: &[f64]) {
    out.reserve(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Cursor over a text-header + binary-payload blob.
pub(crate) struct SnapshotReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> SnapshotReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Snapshot("unterminated header line".into()))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| Error::Snapshot("header is not UTF-8".into()))
    }

    pub(crate) fn expect_line(&mut self, expected: &str) -> Result<()> {
        let line = self.line()?;
        if line != expected {
            return Err(Error::Snapshot(format!(
                "expected `{expected}`, found `{line}`"
            )));
        }
        Ok(())
    }

    pub(crate) fn keyed<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let line = self.line()?;
        line.strip_prefix(key)
            .and_then(|rest| rest.strip_prefix(' '))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Snapshot(format!("expected `{key} <value>`, found `{line}`")))
    }

    pub(crate) fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        let need = count * 8;
        if self.bytes.len() - self.pos < need {
            return Err(Error::Snapshot("payload truncated".into()));
        }
        let values = self.bytes[self.pos..self.pos + need]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        self.pos += need;
        Ok(values)
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Snapshot("trailing bytes after payload".into()));
        }
        Ok(())
    }
}

/// Fully connected ReLU network shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// `[input, hidden_1, ..., output]`.
    pub layer_dims: Vec<usize>,
    /// Apply ReLU after the last layer too.
    pub final_activation: bool,
}

impl MlpSpec {
    /// Two 128-wide ReLU layers; the second layer's activations are the features.
    pub fn two_layer_relu(input_dim: usize) -> Self {
        Self {
            layer_dims: vec![input_dim, 128, 128],
            final_activation: true,
        }
    }
}

/// Random Fourier features for the Gaussian kernel
/// `u₂ exp(−‖z − z′‖² / (2u₁²))`.
///
/// Frequencies and phases are drawn once; only `log u₁` and `log u₂` are
/// learnable.
#[derive(Debug, Clone, PartialEq)]
pub struct RffMap {
    /// Unit-scale frequencies, `D × q`, rows drawn from `N(0, I)`.
    pub omega: DMatrix<f64>,
    /// Phases, uniform on `[0, 2π)`.
    pub phase: DVector<f64>,
}

impl RffMap {
    pub fn new(input_dim: usize, num_features: usize, seed: u64) -> Result<Self> {
        if num_features == 0 {
            return Err(Error::InvalidArgument(
                "random feature count must be at least 1".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let omega = DMatrix::from_fn(num_features, input_dim, |_, _| {
            StandardNormal.sample(&mut rng)
        });
        let uniform = Uniform::new(0.0, 2.0 * PI).expect("valid range");
        let phase = DVector::from_fn(num_features, |_, _| uniform.sample(&mut rng));
        Ok(Self { omega, phase })
    }

    pub fn num_features(&self) -> usize {
        self.omega.nrows()
    }
}

/// Builds an RFF map and its parameters `(log u₁, log u₂)`.
pub fn rff_init(
    input_dim: usize,
    num_features: usize,
    u1: f64,
    u2: f64,
    seed: u64,
) -> Result<(FeatureMap, FeatureMapParams)> {
    if !(u1 > 0.0) || !(u2 > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "length scale and magnitude must be positive (got {u1}, {u2})"
        )));
    }
    let map = FeatureMap::Rff(RffMap::new(input_dim, num_features, seed)?);
    let params = FeatureMapParams::new(vec![u1.ln(), u2.ln()], map.layout())?;
    Ok((map, params))
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureMap {
    /// `φ(x) = x`; no parameters.
    Identity {
        dim: usize,
    },
    /// `φ(x) = W x` with `W ∈ ℝ^{d×p}`.
    Linear {
        input_dim: usize,
        output_dim: usize,
    },
    Mlp(MlpSpec),
    Rff(RffMap),
    /// `φ = outer ∘ inner`; parameters are `(inner, outer)` concatenated.
    Compose {
        inner: Box<FeatureMap>,
        outer: Box<FeatureMap>,
    },
}

#[derive(Debug, Clone)]
enum Cache {
    Identity,
    Linear {
        input: DMatrix<f64>,
    },
    Mlp {
        inputs: Vec<DMatrix<f64>>,
        pre: Vec<DMatrix<f64>>,
    },
    Rff {
        proj: DMatrix<f64>,
        args: DMatrix<f64>,
    },
    Compose {
        inner: Box<Cache>,
        outer: Box<Cache>,
        mid: DMatrix<f64>,
    },
}

/// Features `Z_S` of a batch plus what the backward pass needs.
#[derive(Debug, Clone)]
pub struct FeatureBatch {
    /// `s × d`, row `i` is `φ_α(x_i)`.
    pub z: DMatrix<f64>,
    cache: Cache,
    version: u64,
}

impl FeatureBatch {
    pub fn version(&self) -> u64 {
        self.version
    }
}

impl FeatureMap {
    pub fn identity(dim: usize) -> Self {
        FeatureMap::Identity { dim }
    }

    pub fn linear(input_dim: usize, output_dim: usize) -> Self {
        FeatureMap::Linear {
            input_dim,
            output_dim,
        }
    }

    pub fn mlp(spec: MlpSpec) -> Result<Self> {
        if spec.layer_dims.len() < 2 || spec.layer_dims.contains(&0) {
            return Err(Error::InvalidArgument(
                "MLP needs an input and at least one positive layer width".into(),
            ));
        }
        Ok(FeatureMap::Mlp(spec))
    }

    /// `outer ∘ inner`.
    pub fn compose(outer: FeatureMap, inner: FeatureMap) -> Result<Self> {
        if inner.output_dim() != outer.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "composition (inner output vs outer input)",
                expected: outer.input_dim(),
                found: inner.output_dim(),
            });
        }
        Ok(FeatureMap::Compose {
            inner: Box::new(inner),
            outer: Box::new(outer),
        })
    }

    pub fn input_dim(&self) -> usize {
        match self {
            FeatureMap::Identity { dim } => *dim,
            FeatureMap::Linear { input_dim, .. } => *input_dim,
            FeatureMap::Mlp(spec) => spec.layer_dims[0],
            FeatureMap::Rff(rff) => rff.omega.ncols(),
            FeatureMap::Compose { inner, .. } => inner.input_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            FeatureMap::Identity { dim } => *dim,
            FeatureMap::Linear { output_dim, .. } => *output_dim,
            FeatureMap::Mlp(spec) => *spec.layer_dims.last().expect("validated"),
            FeatureMap::Rff(rff) => rff.num_features(),
            FeatureMap::Compose { outer, .. } => outer.output_dim(),
        }
    }

    pub fn layout(&self) -> Vec<Segment> {
        let mut out = Vec::new();
        self.push_layout("", &mut out, &mut 0);
        out
    }

    fn push_layout(&self, prefix: &str, out: &mut Vec<Segment>, offset: &mut usize) {
        let mut push = |name: String, shape: Vec<usize>| {
            let seg = Segment {
                name: format!("{prefix}{name}"),
                offset: *offset,
                shape,
            };
            *offset += seg.len();
            out.push(seg);
        };
        match self {
            FeatureMap::Identity { .. } => {}
            FeatureMap::Linear {
                input_dim,
                output_dim,
            } => push("weight".into(), vec![*output_dim, *input_dim]),
            FeatureMap::Mlp(spec) => {
                for (l, w) in spec.layer_dims.windows(2).enumerate() {
                    push(format!("layer{l}.weight"), vec![w[1], w[0]]);
                    push(format!("layer{l}.bias"), vec![w[1]]);
                }
            }
            FeatureMap::Rff(_) => {
                push("log_length_scale".into(), vec![1]);
                push("log_magnitude".into(), vec![1]);
            }
            FeatureMap::Compose { inner, outer } => {
                inner.push_layout(&format!("{prefix}inner."), out, offset);
                outer.push_layout(&format!("{prefix}outer."), out, offset);
            }
        }
    }

    pub fn num_params(&self) -> usize {
        self.layout().iter().map(Segment::len).sum()
    }

    /// Seeded initialization: He-uniform weights and zero biases for the MLP,
    /// LeCun-uniform weights for the linear layer, `u₁ = u₂ = 1` for RFF.
    pub fn init_params(&self, seed: u64) -> FeatureMapParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut flat = Vec::with_capacity(self.num_params());
        self.push_init(&mut rng, &mut flat);
        FeatureMapParams::new(flat, self.layout()).expect("layout built from the same map")
    }

    fn push_init(&self, rng: &mut ChaCha8Rng, flat: &mut Vec<f64>) {
        match self {
            FeatureMap::Identity { .. } => {}
            FeatureMap::Linear {
                input_dim,
                output_dim,
            } => {
                let bound = (3.0 / *input_dim as f64).sqrt();
                flat.extend((0..input_dim * output_dim).map(|_| rng.random_range(-bound..=bound)));
            }
            FeatureMap::Mlp(spec) => {
                for w in spec.layer_dims.windows(2) {
                    let bound = (6.0 / w[0] as f64).sqrt();
                    flat.extend((0..w[0] * w[1]).map(|_| rng.random_range(-bound..=bound)));
                    flat.extend(std::iter::repeat_n(0.0, w[1]));
                }
            }
            FeatureMap::Rff(_) => flat.extend([0.0, 0.0]),
            FeatureMap::Compose { inner, outer } => {
                inner.push_init(rng, flat);
                outer.push_init(rng, flat);
            }
        }
    }

    fn check_params(&self, params: &FeatureMapParams) -> Result<()> {
        let m = self.num_params();
        if params.len() != m {
            return Err(Error::DimensionMismatch {
                what: "feature map parameters",
                expected: m,
                found: params.len(),
            });
        }
        Ok(())
    }

    /// Evaluates the map on the rows of `x` (`s × p`).
    pub fn forward(&self, params: &FeatureMapParams, x: &DMatrix<f64>) -> Result<FeatureBatch> {
        self.check_params(params)?;
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "feature map input",
                expected: self.input_dim(),
                found: x.ncols(),
            });
        }
        let (z, cache) = self.forward_raw(params.as_slice(), x.clone());
        Ok(FeatureBatch {
            z,
            cache,
            version: params.version(),
        })
    }

    /// Features only, no cache.
    pub fn eval(&self, params: &FeatureMapParams, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.forward(params, x)?.z)
    }

    fn forward_raw(&self, p: &[f64], x: DMatrix<f64>) -> (DMatrix<f64>, Cache) {
        match self {
            FeatureMap::Identity { .. } => (x, Cache::Identity),
            FeatureMap::Linear {
                input_dim,
                output_dim,
            } => {
                let w = DMatrix::from_column_slice(*output_dim, *input_dim, p);
                let z = &x * w.transpose();
                (z, Cache::Linear { input: x })
            }
            FeatureMap::Mlp(spec) => {
                let mut offset = 0;
                let mut inputs = Vec::new();
                let mut pre = Vec::new();
                let mut h = x;
                let layers = spec.layer_dims.len() - 1;
                for (l, dims) in spec.layer_dims.windows(2).enumerate() {
                    let (fan_in, fan_out) = (dims[0], dims[1]);
                    let w = DMatrix::from_column_slice(
                        fan_out,
                        fan_in,
                        &p[offset..offset + fan_in * fan_out],
                    );
                    offset += fan_in * fan_out;
                    let b = &p[offset..offset + fan_out];
                    offset += fan_out;
                    let mut a = &h * w.transpose();
                    for (j, mut col) in a.column_iter_mut().enumerate() {
                        col.add_scalar_mut(b[j]);
                    }
                    let activate = l + 1 < layers || spec.final_activation;
                    let out = if activate {
                        a.map(|v| v.max(0.0))
                    } else {
                        a.clone()
                    };
                    inputs.push(h);
                    pre.push(a);
                    h = out;
                }
                (h, Cache::Mlp { inputs, pre })
            }
            FeatureMap::Rff(rff) => {
                let (inv_len, amp) = rff_scales(p, rff.num_features());
                let proj = &x * rff.omega.transpose();
                let mut args = &proj * inv_len;
                for (j, mut col) in args.column_iter_mut().enumerate() {
                    col.add_scalar_mut(rff.phase[j]);
                }
                let z = args.map(|a| amp * a.cos());
                (z, Cache::Rff { proj, args })
            }
            FeatureMap::Compose { inner, outer } => {
                let m_inner = inner.num_params();
                let (mid, inner_cache) = inner.forward_raw(&p[..m_inner], x);
                let (z, outer_cache) = outer.forward_raw(&p[m_inner..], mid.clone());
                (
                    z,
                    Cache::Compose {
                        inner: Box::new(inner_cache),
                        outer: Box::new(outer_cache),
                        mid,
                    },
                )
            }
        }
    }

    /// Gradient of `Σ_i ⟨upstream_i, φ_α(x_i)⟩` with respect to `α`.
    pub fn backward(
        &self,
        params: &FeatureMapParams,
        batch: &FeatureBatch,
        upstream: &DMatrix<f64>,
    ) -> Result<Vec<f64>> {
        Ok(self.backward_with_input(params, batch, upstream)?.0)
    }

    /// Parameter gradient and the gradient with respect to the inputs.
    pub fn backward_with_input(
        &self,
        params: &FeatureMapParams,
        batch: &FeatureBatch,
        upstream: &DMatrix<f64>,
    ) -> Result<(Vec<f64>, DMatrix<f64>)> {
        self.check_params(params)?;
        if batch.version != params.version() {
            return Err(Error::StaleCache);
        }
        if upstream.shape() != batch.z.shape() {
            return Err(Error::DimensionMismatch {
                what: "upstream gradient rows x cols",
                expected: batch.z.len(),
                found: upstream.len(),
            });
        }
        let mut grad = Vec::with_capacity(params.len());
        let dx = self.backward_raw(
            params.as_slice(),
            &batch.cache,
            &batch.z,
            upstream.clone(),
            &mut grad,
        );
        Ok((grad, dx))
    }

    /// Appends parameter gradients to `grad` in layout order and returns the
    /// input gradient.
    fn backward_raw(
        &self,
        p: &[f64],
        cache: &Cache,
        output: &DMatrix<f64>,
        upstream: DMatrix<f64>,
        grad: &mut Vec<f64>,
    ) -> DMatrix<f64> {
        match (self, cache) {
            (FeatureMap::Identity { .. }, Cache::Identity) => upstream,
            (
                FeatureMap::Linear {
                    input_dim,
                    output_dim,
                },
                Cache::Linear { input },
            ) => {
                let w = DMatrix::from_column_slice(*output_dim, *input_dim, p);
                let dw = upstream.transpose() * input;
                grad.extend_from_slice(dw.as_slice());
                &upstream * w
            }
            (FeatureMap::Mlp(spec), Cache::Mlp { inputs, pre }) => {
                let layers = spec.layer_dims.len() - 1;
                let mut offsets = Vec::with_capacity(layers);
                let mut offset = 0;
                for dims in spec.layer_dims.windows(2) {
                    offsets.push(offset);
                    offset += dims[0] * dims[1] + dims[1];
                }
                let mut per_layer: Vec<Vec<f64>> = vec![Vec::new(); layers];
                let mut g = upstream;
                for l in (0..layers).rev() {
                    let (fan_in, fan_out) = (spec.layer_dims[l], spec.layer_dims[l + 1]);
                    if l + 1 < layers || spec.final_activation {
                        g.zip_apply(&pre[l], |gv, a| {
                            if a <= 0.0 {
                                *gv = 0.0;
                            }
                        });
                    }
                    let dw = g.transpose() * &inputs[l];
                    let db = g.row_sum();
                    let mut layer_grad = dw.as_slice().to_vec();
                    layer_grad.extend(db.iter());
                    per_layer[l] = layer_grad;
                    let start = offsets[l];
                    let w = DMatrix::from_column_slice(
                        fan_out,
                        fan_in,
                        &p[start..start + fan_in * fan_out],
                    );
                    g = &g * w;
                }
                for layer_grad in per_layer {
                    grad.extend(layer_grad);
                }
                g
            }
            (FeatureMap::Rff(rff), Cache::Rff { proj, args }) => {
                let (inv_len, amp) = rff_scales(p, rff.num_features());
                // ∂φ/∂log u₂ = φ/2
                let d_log_mag = 0.5 * upstream.dot(output);
                // Upstream times −∂φ/∂arg.
                let mut weighted = upstream;
                weighted.zip_apply(args, |u, a| *u *= amp * a.sin());
                // ∂arg/∂log u₁ = −proj/u₁
                let d_log_len = inv_len * weighted.dot(proj);
                grad.push(d_log_len);
                grad.push(d_log_mag);
                -(&weighted * &rff.omega) * inv_len
            }
            (
                FeatureMap::Compose { inner, outer },
                Cache::Compose {
                    inner: ci,
                    outer: co,
                    mid,
                },
            ) => {
                let m_inner = inner.num_params();
                let mut outer_grad = Vec::new();
                let d_mid =
                    outer.backward_raw(&p[m_inner..], co, output, upstream, &mut outer_grad);
                let dx = inner.backward_raw(&p[..m_inner], ci, mid, d_mid, grad);
                grad.extend(outer_grad);
                dx
            }
            _ => unreachable!("cache produced by a different map"),
        }
    }
}

/// `(1/u₁, √(2u₂/D))` from the log-parameters.
fn rff_scales(p: &[f64], num_features: usize) -> (f64, f64) {
    let inv_len = (-p[0]).exp();
    let amp = (2.0 * p[1].exp() / num_features as f64).sqrt();
    (inv_len, amp)
}
