//! Shallow convolutional decoder with a RAP-planned final pooling layer.
//!
//! Layer order: temporal convolution (`F1` filters) → depthwise spatial
//! convolution (`D` per filter) → BN → ELU → downsampling mean pools →
//! dropout → depthwise temporal + pointwise convolution (`F2`) → BN → ELU →
//! final mean pool → dropout → per-position linear readout → softmax.
//!
//! The temporal and spatial convolutions are linear and act on different
//! axes, so they are evaluated spatial-first; the result is identical and
//! needs far fewer operations when `C` is large.

pub mod checkpoint;
mod ops;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::rap::{plan_rap, OnlineTaskSpec, RapError, RapPlan};
use ops::{conv1d, conv1d_backward, elu, elu_grad, matmul, matmul_backward, mean_pool, mean_pool_backward, pool_len, Pad};
pub use ops::Real;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("incompatible plan: {0}")]
    IncompatiblePlan(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("channel index {index} out of range for {count} channels")]
    ChannelIndex { index: usize, count: usize },
    #[error("{}: checkpoint error at byte {offset}: {message}", .path.display())]
    Checkpoint {
        path: std::path::PathBuf,
        offset: u64,
        message: String,
    },
    #[error("{}: {source}", .path.display())]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Rap(#[from] RapError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaddingMode {
    /// No padding: every window is decoded exactly as in a joint pass.
    #[default]
    Valid,
    /// Length-preserving zero padding; windows touching a trial edge differ
    /// slightly between joint and single-window decoding.
    Same,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Elu,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub channel_count: usize,
    pub temporal_filters: usize,
    /// Samples.
    pub temporal_kernel: usize,
    pub depth_multiplier: usize,
    pub second_block_filters: usize,
    /// Samples at the intermediate rate.
    pub second_kernel: usize,
    #[serde(default)]
    pub activation: Activation,
    pub dropout_rate: f64,
    #[serde(default)]
    pub pooling: Pooling,
    pub rap_plan: RapPlan,
    pub class_count: usize,
    #[serde(default)]
    pub padding_mode: PaddingMode,
    #[serde(default = "default_momentum")]
    pub bn_momentum: f64,
    #[serde(default = "default_eps")]
    pub bn_eps: f64,
}

fn default_momentum() -> f64 {
    0.1
}

fn default_eps() -> f64 {
    1e-5
}

impl Default for ModelConfig {
    /// 27 channels at 256 Hz, 1 s windows every 62.5 ms.
    fn default() -> Self {
        let plan = plan_rap(256.0, &[8], &OnlineTaskSpec::dreyer()).expect("reference plan");
        Self::with_plan(27, plan)
    }
}

impl ModelConfig {
    /// Default layer sizes for `channel_count` channels and `plan`, with the
    /// temporal kernel spanning a quarter second.
    pub fn with_plan(channel_count: usize, plan: RapPlan) -> Self {
        let k1 = ((plan.sampling_frequency / 4.0).round() as usize).max(1);
        Self {
            channel_count,
            temporal_filters: 16,
            temporal_kernel: k1,
            depth_multiplier: 2,
            second_block_filters: 32,
            second_kernel: 16,
            activation: Activation::Elu,
            dropout_rate: 0.25,
            pooling: Pooling::Mean,
            rap_plan: plan,
            class_count: 2,
            padding_mode: PaddingMode::Valid,
            bn_momentum: default_momentum(),
            bn_eps: default_eps(),
        }
    }

    /// Half-width network (8 temporal filters, 16 separable maps, second
    /// kernel 8) for short windows and single-core runs.
    pub fn compact(channel_count: usize, plan: RapPlan) -> Self {
        Self {
            temporal_filters: 8,
            second_block_filters: 16,
            second_kernel: 8,
            ..Self::with_plan(channel_count, plan)
        }
    }

    /// Maps after the spatial convolution, `F1·D`.
    pub fn spatial_maps(&self) -> usize {
        self.temporal_filters * self.depth_multiplier
    }

    fn pads(&self) -> (Pad, Pad) {
        match self.padding_mode {
            PaddingMode::Valid => (Pad::NONE, Pad::NONE),
            PaddingMode::Same => (Pad::same(self.temporal_kernel), Pad::same(self.second_kernel)),
        }
    }

    /// Feature lengths before the final pool for an `n`-sample input.
    fn block_lengths(&self, n: usize) -> Option<(usize, Vec<usize>, usize)> {
        let (p1, p2) = self.pads();
        let l1 = p1.out_len(n, self.temporal_kernel)?;
        let mut pooled = vec![l1];
        for &k in self.rap_plan.downsampling_kernels() {
            pooled.push(pool_len(*pooled.last().expect("non-empty"), k, k).filter(|&l| l > 0)?);
        }
        let l2 = p2.out_len(*pooled.last().expect("non-empty"), self.second_kernel)?;
        Some((l1, pooled, l2))
    }

    /// Final pooling kernel actually applied. With valid padding it is the
    /// feature length of one window, which is `k_P` minus the convolutions'
    /// shrinkage.
    pub fn effective_final_kernel(&self) -> Result<usize, ModelError> {
        match self.padding_mode {
            PaddingMode::Same => Ok(self.rap_plan.final_kernel()),
            PaddingMode::Valid => {
                let w = self.rap_plan.window_samples();
                match self.block_lengths(w) {
                    Some((_, _, l2)) if l2 > 0 => Ok(l2),
                    _ => Err(ModelError::Config(format!(
                        "a {w}-sample window is shorter than the receptive field of the convolutions"
                    ))),
                }
            }
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let counts = [
            ("channel_count", self.channel_count),
            ("temporal_filters", self.temporal_filters),
            ("temporal_kernel", self.temporal_kernel),
            ("depth_multiplier", self.depth_multiplier),
            ("second_block_filters", self.second_block_filters),
            ("second_kernel", self.second_kernel),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be at least 1")));
        }
        if self.class_count < 2 {
            return Err(ModelError::Config("class_count must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::Config(format!("dropout {} outside [0, 1)", self.dropout_rate)));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0 && self.bn_eps > 0.0) {
            return Err(ModelError::Config("batch-norm momentum must be in (0, 1] and eps positive".into()));
        }
        self.rap_plan.validate()?;
        self.effective_final_kernel()?;
        Ok(())
    }

    /// Number of output positions for an `n`-sample input.
    pub fn output_positions(&self, n: usize) -> Result<usize, ModelError> {
        let plan = &self.rap_plan;
        let shape_err = || {
            ModelError::Shape(format!(
                "input of {n} samples: need at least {} samples (one window) and a length of {} + m*{} (whole hops, f_s/f_u), \
                 with pooling divisibility by {}",
                plan.window_samples(),
                plan.window_samples(),
                plan.hop_samples(),
                plan.downsampling_factor()
            ))
        };
        let expected = plan.output_positions(n).ok_or_else(shape_err)?;
        let (_, _, l2) = self.block_lengths(n).ok_or_else(shape_err)?;
        let got = pool_len(l2, self.effective_final_kernel()?, plan.final_stride()).ok_or_else(shape_err)?;
        if got != expected {
            return Err(shape_err());
        }
        Ok(got)
    }
}

/// Named parameter or statistics tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    fn zeros(name: &str, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.to_string(),
            shape,
            data: vec![F::zero(); n],
        }
    }

    fn filled(name: &str, shape: Vec<usize>, v: F) -> Self {
        let mut t = Self::zeros(name, shape);
        t.data.iter_mut().for_each(|x| *x = v);
        t
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            name: self.name.clone(),
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::of(v.to_f64().expect("finite"))).collect(),
        }
    }
}

/// Indices of the learnable tensors in [`ModelState::params`].
pub mod param {
    pub const TEMPORAL: usize = 0;
    pub const SPATIAL: usize = 1;
    pub const BN1_WEIGHT: usize = 2;
    pub const BN1_BIAS: usize = 3;
    pub const DEPTHWISE: usize = 4;
    pub const POINTWISE: usize = 5;
    pub const BN2_WEIGHT: usize = 6;
    pub const BN2_BIAS: usize = 7;
    pub const READOUT_WEIGHT: usize = 8;
    pub const READOUT_BIAS: usize = 9;
    pub const NAMES: [&str; 10] = [
        "temporal.weight",
        "spatial.weight",
        "bn1.weight",
        "bn1.bias",
        "separable.depthwise.weight",
        "separable.pointwise.weight",
        "bn2.weight",
        "bn2.bias",
        "readout.weight",
        "readout.bias",
    ];
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

impl<F: Real> BnStats<F> {
    fn identity(n: usize) -> Self {
        Self {
            mean: vec![F::zero(); n],
            var: vec![F::one(); n],
        }
    }

    pub fn cast<G: Real>(&self) -> BnStats<G> {
        let c = |v: &[F]| v.iter().map(|x| G::of(x.to_f64().expect("finite"))).collect();
        BnStats {
            mean: c(&self.mean),
            var: c(&self.var),
        }
    }
}

/// Gradients aligned with [`ModelState::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<F> {
    pub tensors: Vec<Vec<F>>,
}

impl<F: Real> Gradients<F> {
    fn zeros_like(params: &[Tensor<F>]) -> Self {
        Self {
            tensors: params.iter().map(|t| vec![F::zero(); t.data.len()]).collect(),
        }
    }

    pub fn scale(&mut self, s: F) {
        self.tensors.iter_mut().flatten().for_each(|v| *v = *v * s);
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x = *x + *y;
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.tensors.iter().flatten().all(|v| *v == F::zero())
    }
}

/// Per-position class probabilities, one row per window position.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probabilities: Matrix,
}

impl Prediction {
    pub fn positions(&self) -> usize {
        self.probabilities.rows()
    }

    pub fn row(&self, j: usize) -> &[f64] {
        self.probabilities.row(j)
    }

    /// Probability rows averaged over positions.
    pub fn mean_row(&self) -> Vec<f64> {
        let (n, c) = self.probabilities.shape();
        (0..c)
            .map(|k| (0..n).map(|j| self.probabilities[(j, k)]).sum::<f64>() / n as f64)
            .collect()
    }
}

/// Per-layer normalization statistics hook used by online adaptation: it
/// receives the current input's batch statistics for BN layer `layer` and
/// returns the statistics to normalize with.
pub type BnHook<'a, F> = dyn FnMut(usize, &BnStats<F>) -> BnStats<F> + 'a;

enum Norm<'a, 'h, F: Real> {
    Running,
    Batch,
    Hook(&'a mut BnHook<'h, F>),
}

/// Network parameters and batch-norm state.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<F: Real = f32> {
    config: ModelConfig,
    params: Vec<Tensor<F>>,
    bn: [BnStats<F>; 2],
    rng_seed: u64,
    version: u64,
}

struct TrialCache<F> {
    x: Vec<F>,
    z: Vec<F>,
    xhat1: Vec<F>,
    e1: Vec<F>,
    mask1: Vec<F>,
    d1: Vec<F>,
    s: Vec<F>,
    xhat2: Vec<F>,
    e2: Vec<F>,
    mask2: Vec<F>,
    dq: Vec<F>,
}

/// Activations saved by a train-mode forward pass.
pub struct ForwardCache<F: Real> {
    version: u64,
    n: usize,
    trials: Vec<TrialCache<F>>,
    inv_std: [Vec<F>; 2],
    /// Softmax outputs, classes × positions per trial.
    pub probs: Vec<Vec<F>>,
}

struct Layout {
    c: usize,
    g: usize,
    f2: usize,
    classes: usize,
    k1: usize,
    k2: usize,
    d: usize,
    pad1: Pad,
    pad2: Pad,
    l1: usize,
    pooled: Vec<usize>,
    l2: usize,
    kf: usize,
    sp: usize,
    p: usize,
}

fn batch_stats<F: Real>(rows: &[&[F]], maps: usize, len: usize) -> BnStats<F> {
    let n = F::of((rows.len() * len) as f64);
    let mut mean = vec![F::zero(); maps];
    for r in rows {
        for (g, m) in mean.iter_mut().enumerate() {
            *m = *m + r[g * len..(g + 1) * len].iter().copied().sum::<F>();
        }
    }
    mean.iter_mut().for_each(|m| *m = *m / n);
    let mut var = vec![F::zero(); maps];
    for r in rows {
        for (g, v) in var.iter_mut().enumerate() {
            let mu = mean[g];
            *v = *v + r[g * len..(g + 1) * len].iter().map(|&x| (x - mu) * (x - mu)).sum::<F>();
        }
    }
    var.iter_mut().for_each(|v| *v = *v / n);
    BnStats { mean, var }
}

fn dropout_mask<F: Real>(len: usize, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Vec<F> {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = F::of(1.0 / (1.0 - rate));
            (0..len)
                .map(|_| if rng.random::<f64>() < rate { F::zero() } else { keep })
                .collect()
        }
        _ => vec![F::one(); len],
    }
}

fn softmax_columns<F: Real>(logits: &mut [F], classes: usize, p: usize) {
    for j in 0..p {
        let max = (0..classes).map(|k| logits[k * p + j]).fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for k in 0..classes {
            let e = (logits[k * p + j] - max).exp();
            logits[k * p + j] = e;
            sum = sum + e;
        }
        for k in 0..classes {
            logits[k * p + j] = logits[k * p + j] / sum;
        }
    }
}

impl<F: Real> ModelState<F> {
    /// Fan-in scaled uniform initialization; readout bias starts at zero.
    pub fn new(config: ModelConfig, rng_seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let (c, g, f2, k) = (
            config.channel_count,
            config.spatial_maps(),
            config.second_block_filters,
            config.class_count,
        );
        let shapes: [(Vec<usize>, usize); 10] = [
            (vec![config.temporal_filters, config.temporal_kernel], config.temporal_kernel),
            (vec![g, c], c),
            (vec![g], 0),
            (vec![g], 0),
            (vec![g, config.second_kernel], config.second_kernel),
            (vec![f2, g], g),
            (vec![f2], 0),
            (vec![f2], 0),
            (vec![k, f2], f2),
            (vec![k], 0),
        ];
        let params = shapes
            .into_iter()
            .enumerate()
            .map(|(i, (shape, fan_in))| match i {
                param::BN1_WEIGHT | param::BN2_WEIGHT => Tensor::filled(param::NAMES[i], shape, F::one()),
                _ if fan_in == 0 => Tensor::zeros(param::NAMES[i], shape),
                _ => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let mut t = Tensor::zeros(param::NAMES[i], shape);
                    t.data.iter_mut().for_each(|v| *v = F::of(rng.random_range(-bound..bound)));
                    t
                }
            })
            .collect();
        Ok(Self {
            bn: [BnStats::identity(g), BnStats::identity(f2)],
            config,
            params,
            rng_seed,
            version: 0,
        })
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        params: Vec<Tensor<F>>,
        bn: [BnStats<F>; 2],
        rng_seed: u64,
    ) -> Result<Self, ModelError> {
        let fresh = Self::new(config.clone(), 0)?;
        if params.len() != fresh.params.len() {
            return Err(ModelError::Shape(format!(
                "expected {} parameter tensors, got {}",
                fresh.params.len(),
                params.len()
            )));
        }
        for (a, b) in params.iter().zip(&fresh.params) {
            if a.name != b.name || a.shape != b.shape || a.data.len() != b.data.len() {
                return Err(ModelError::Shape(format!(
                    "tensor {} has shape {:?}, expected {} {:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
        for (s, f) in bn.iter().zip(&fresh.bn) {
            if s.mean.len() != f.mean.len() || s.var.len() != f.var.len() {
                return Err(ModelError::Shape("batch-norm statistics do not match the config".into()));
            }
            if s.var.iter().any(|v| !(*v > F::zero())) {
                return Err(ModelError::InvalidState("running variance must be positive".into()));
            }
        }
        Ok(Self {
            config,
            params,
            bn,
            rng_seed,
            version: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn params(&self) -> &[Tensor<F>] {
        &self.params
    }

    /// Mutable parameters; invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> &mut [Tensor<F>] {
        self.version += 1;
        &mut self.params
    }

    pub fn bn_stats(&self) -> &[BnStats<F>; 2] {
        &self.bn
    }

    pub fn set_bn_stats(&mut self, layer: usize, stats: BnStats<F>) -> Result<(), ModelError> {
        let cur = self
            .bn
            .get(layer)
            .ok_or_else(|| ModelError::Shape(format!("no batch-norm layer {layer}")))?;
        if cur.mean.len() != stats.mean.len() || cur.var.len() != stats.var.len() {
            return Err(ModelError::Shape(format!(
                "batch-norm layer {layer} has {} maps, got {}",
                cur.mean.len(),
                stats.mean.len()
            )));
        }
        self.bn[layer] = stats;
        Ok(())
    }

    pub fn cast<G: Real>(&self) -> ModelState<G> {
        ModelState {
            config: self.config.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            bn: [self.bn[0].cast(), self.bn[1].cast()],
            rng_seed: self.rng_seed,
            version: 0,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|t| t.data.len()).sum()
    }

    /// Replaces the pooling plan; learned parameters are left untouched.
    pub fn apply_rap(&self, new_plan: RapPlan) -> Result<Self, ModelError> {
        new_plan
            .validate()
            .map_err(|e| ModelError::IncompatiblePlan(e.to_string()))?;
        let old = &self.config.rap_plan;
        if new_plan.sampling_frequency != old.sampling_frequency
            || new_plan.downsampling_kernels() != old.downsampling_kernels()
        {
            return Err(ModelError::IncompatiblePlan(format!(
                "plan for {} Hz with downsampling {:?} does not fit a model trained at {} Hz with {:?}",
                new_plan.sampling_frequency,
                new_plan.downsampling_kernels(),
                old.sampling_frequency,
                old.downsampling_kernels()
            )));
        }
        let mut config = self.config.clone();
        config.rap_plan = new_plan;
        config
            .validate()
            .map_err(|e| ModelError::IncompatiblePlan(e.to_string()))?;
        Ok(Self {
            config,
            params: self.params.clone(),
            bn: self.bn.clone(),
            rng_seed: self.rng_seed,
            version: self.version,
        })
    }

    fn layout(&self, n: usize) -> Result<Layout, ModelError> {
        let cfg = &self.config;
        let p = cfg.output_positions(n)?;
        let (l1, pooled, l2) = cfg.block_lengths(n).expect("checked by output_positions");
        let (pad1, pad2) = cfg.pads();
        Ok(Layout {
            c: cfg.channel_count,
            g: cfg.spatial_maps(),
            f2: cfg.second_block_filters,
            classes: cfg.class_count,
            k1: cfg.temporal_kernel,
            k2: cfg.second_kernel,
            d: cfg.depth_multiplier,
            pad1,
            pad2,
            l1,
            pooled,
            l2,
            kf: cfg.effective_final_kernel()?,
            sp: cfg.rap_plan.final_stride(),
            p,
        })
    }

    fn check_batch(&self, batch: &[&Matrix]) -> Result<Layout, ModelError> {
        let first = batch
            .first()
            .ok_or_else(|| ModelError::Shape("empty batch".into()))?;
        for x in batch {
            if x.rows() != self.config.channel_count {
                return Err(ModelError::Shape(format!(
                    "input has {} channels, model expects {}",
                    x.rows(),
                    self.config.channel_count
                )));
            }
            if x.cols() != first.cols() {
                return Err(ModelError::Shape("all inputs in a batch must share one length".into()));
            }
        }
        self.layout(first.cols())
    }

    fn forward_core(
        &self,
        batch: &[&Matrix],
        mut norm: Norm<'_, '_, F>,
        dropout_seed: Option<u64>,
        keep_cache: bool,
    ) -> Result<(Vec<Vec<F>>, Option<ForwardCache<F>>, [BnStats<F>; 2]), ModelError> {
        let lay = self.check_batch(batch)?;
        let n = batch[0].cols();
        let pr = &self.params;
        let eps = F::of(self.config.bn_eps);
        let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
        let rate = self.config.dropout_rate;

        // spatial then temporal convolution
        let mut xs = Vec::with_capacity(batch.len());
        let mut zs = Vec::with_capacity(batch.len());
        let mut a1s = Vec::with_capacity(batch.len());
        for x in batch {
            let xf: Vec<F> = x.as_slice().iter().map(|&v| F::of(v)).collect();
            let mut z = vec![F::zero(); lay.g * n];
            matmul(&pr[param::SPATIAL].data, &xf, lay.g, lay.c, n, &mut z);
            let mut a1 = vec![F::zero(); lay.g * lay.l1];
            for g in 0..lay.g {
                let f = g / lay.d;
                conv1d(
                    &z[g * n..(g + 1) * n],
                    &pr[param::TEMPORAL].data[f * lay.k1..(f + 1) * lay.k1],
                    lay.pad1,
                    &mut a1[g * lay.l1..(g + 1) * lay.l1],
                );
            }
            xs.push(xf);
            zs.push(z);
            a1s.push(a1);
        }

        let resolve = |layer: usize, rows: &[Vec<F>], maps: usize, len: usize, norm: &mut Norm<'_, '_, F>| {
            let views: Vec<&[F]> = rows.iter().map(Vec::as_slice).collect();
            match norm {
                Norm::Running => self.bn[layer].clone(),
                Norm::Batch => batch_stats(&views, maps, len),
                Norm::Hook(h) => h(layer, &batch_stats(&views, maps, len)),
            }
        };
        let stats1 = resolve(0, &a1s, lay.g, lay.l1, &mut norm);
        let inv1: Vec<F> = stats1.var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();

        let lp = *lay.pooled.last().expect("non-empty");
        let mut xhat1s = Vec::new();
        let mut e1s = Vec::new();
        let mut d1s = Vec::new();
        let mut mask1s = Vec::new();
        for a1 in &a1s {
            let mut xhat = vec![F::zero(); lay.g * lay.l1];
            let mut e = vec![F::zero(); lay.g * lay.l1];
            for g in 0..lay.g {
                let (mu, inv) = (stats1.mean[g], inv1[g]);
                let (gamma, beta) = (pr[param::BN1_WEIGHT].data[g], pr[param::BN1_BIAS].data[g]);
                for i in g * lay.l1..(g + 1) * lay.l1 {
                    xhat[i] = (a1[i] - mu) * inv;
                    e[i] = elu(gamma * xhat[i] + beta);
                }
            }
            let mut cur = e.clone();
            let mut len = lay.l1;
            for (&k, &next) in self.config.rap_plan.downsampling_kernels().iter().zip(&lay.pooled[1..]) {
                let mut out = vec![F::zero(); lay.g * next];
                for g in 0..lay.g {
                    mean_pool(&cur[g * len..(g + 1) * len], k, k, &mut out[g * next..(g + 1) * next]);
                }
                cur = out;
                len = next;
            }
            let mask = dropout_mask::<F>(lay.g * lp, rate, rng.as_mut());
            let d1: Vec<F> = cur.iter().zip(&mask).map(|(&a, &m)| a * m).collect();
            xhat1s.push(xhat);
            e1s.push(e);
            mask1s.push(mask);
            d1s.push(d1);
        }

        // separable convolution
        let mut ss = Vec::new();
        let mut a2s = Vec::new();
        for d1 in &d1s {
            let mut s = vec![F::zero(); lay.g * lay.l2];
            for g in 0..lay.g {
                conv1d(
                    &d1[g * lp..(g + 1) * lp],
                    &pr[param::DEPTHWISE].data[g * lay.k2..(g + 1) * lay.k2],
                    lay.pad2,
                    &mut s[g * lay.l2..(g + 1) * lay.l2],
                );
            }
            let mut a2 = vec![F::zero(); lay.f2 * lay.l2];
            matmul(&pr[param::POINTWISE].data, &s, lay.f2, lay.g, lay.l2, &mut a2);
            ss.push(s);
            a2s.push(a2);
        }
        let stats2 = resolve(1, &a2s, lay.f2, lay.l2, &mut norm);
        let inv2: Vec<F> = stats2.var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();

        let mut probs = Vec::with_capacity(batch.len());
        let mut trials = Vec::new();
        for (i, a2) in a2s.iter().enumerate() {
            let mut xhat = vec![F::zero(); lay.f2 * lay.l2];
            let mut e = vec![F::zero(); lay.f2 * lay.l2];
            for f in 0..lay.f2 {
                let (mu, inv) = (stats2.mean[f], inv2[f]);
                let (gamma, beta) = (pr[param::BN2_WEIGHT].data[f], pr[param::BN2_BIAS].data[f]);
                for j in f * lay.l2..(f + 1) * lay.l2 {
                    xhat[j] = (a2[j] - mu) * inv;
                    e[j] = elu(gamma * xhat[j] + beta);
                }
            }
            let mut q = vec![F::zero(); lay.f2 * lay.p];
            for f in 0..lay.f2 {
                mean_pool(&e[f * lay.l2..(f + 1) * lay.l2], lay.kf, lay.sp, &mut q[f * lay.p..(f + 1) * lay.p]);
            }
            let mask = dropout_mask::<F>(lay.f2 * lay.p, rate, rng.as_mut());
            let dq: Vec<F> = q.iter().zip(&mask).map(|(&a, &m)| a * m).collect();
            let mut logits = vec![F::zero(); lay.classes * lay.p];
            matmul(&pr[param::READOUT_WEIGHT].data, &dq, lay.classes, lay.f2, lay.p, &mut logits);
            for k in 0..lay.classes {
                let b = pr[param::READOUT_BIAS].data[k];
                logits[k * lay.p..(k + 1) * lay.p].iter_mut().for_each(|v| *v = *v + b);
            }
            softmax_columns(&mut logits, lay.classes, lay.p);
            probs.push(logits);
            if keep_cache {
                trials.push(TrialCache {
                    x: std::mem::take(&mut xs[i]),
                    z: std::mem::take(&mut zs[i]),
                    xhat1: std::mem::take(&mut xhat1s[i]),
                    e1: std::mem::take(&mut e1s[i]),
                    mask1: std::mem::take(&mut mask1s[i]),
                    d1: std::mem::take(&mut d1s[i]),
                    s: std::mem::take(&mut ss[i]),
                    xhat2: xhat,
                    e2: e,
                    mask2: mask,
                    dq,
                });
            }
        }
        let cache = keep_cache.then(|| ForwardCache {
            version: self.version,
            n,
            trials,
            inv_std: [inv1, inv2],
            probs: probs.clone(),
        });
        Ok((probs, cache, [stats1, stats2]))
    }

    fn to_prediction(&self, probs: &[F], classes: usize) -> Prediction {
        let p = probs.len() / classes;
        Prediction {
            probabilities: Matrix::from_fn(p, classes, |j, k| probs[k * p + j].to_f64().expect("finite")),
        }
    }

    /// Inference with running statistics and no dropout.
    pub fn predict(&self, x: &Matrix) -> Result<Prediction, ModelError> {
        Ok(self.predict_batch(&[x])?.remove(0))
    }

    pub fn predict_batch(&self, batch: &[&Matrix]) -> Result<Vec<Prediction>, ModelError> {
        let (probs, _, _) = self.forward_core(batch, Norm::Running, None, false)?;
        Ok(probs.iter().map(|p| self.to_prediction(p, self.config.class_count)).collect())
    }

    /// Inference where `hook` chooses each BN layer's statistics from the
    /// current input's statistics.
    pub fn predict_with_hook(&self, x: &Matrix, hook: &mut BnHook<'_, F>) -> Result<Prediction, ModelError> {
        let (probs, _, _) = self.forward_core(&[x], Norm::Hook(hook), None, false)?;
        Ok(self.to_prediction(&probs[0], self.config.class_count))
    }

    /// Per-layer population statistics of `batch` as seen by each BN layer,
    /// with BN layer 1 normalized by the batch's own statistics.
    pub fn batch_statistics(&self, batch: &[&Matrix]) -> Result<[BnStats<F>; 2], ModelError> {
        Ok(self.forward_core(batch, Norm::Batch, None, false)?.2)
    }

    /// Train-mode forward: batch statistics, dropout drawn from
    /// `dropout_seed`, running statistics updated.
    pub fn forward_train(
        &mut self,
        batch: &[&Matrix],
        dropout_seed: u64,
    ) -> Result<(Vec<Prediction>, ForwardCache<F>), ModelError> {
        let (probs, cache, stats) = self.forward_core(batch, Norm::Batch, Some(dropout_seed), true)?;
        let lay = self.layout(batch[0].cols())?;
        let count = [batch.len() * lay.l1, batch.len() * lay.l2];
        let m = F::of(self.config.bn_momentum);
        for (layer, s) in stats.iter().enumerate() {
            let n = count[layer] as f64;
            let unbias = F::of(if n > 1.0 { n / (n - 1.0) } else { 1.0 });
            let run = &mut self.bn[layer];
            for (r, &b) in run.mean.iter_mut().zip(&s.mean) {
                *r = (F::one() - m) * *r + m * b;
            }
            for (r, &b) in run.var.iter_mut().zip(&s.var) {
                *r = (F::one() - m) * *r + m * b * unbias;
            }
        }
        let mut cache = cache.expect("cache requested");
        cache.version = self.version;
        let preds = probs.iter().map(|p| self.to_prediction(p, self.config.class_count)).collect();
        Ok((preds, cache))
    }

    /// Parameter gradients given `dlogits` (per trial, classes × positions,
    /// the gradient of the loss with respect to the pre-softmax outputs).
    pub fn backward(&self, cache: &ForwardCache<F>, dlogits: &[Vec<F>]) -> Result<Gradients<F>, ModelError> {
        if cache.version != self.version {
            return Err(ModelError::InvalidState(
                "forward cache is stale: parameters changed since the forward pass".into(),
            ));
        }
        if dlogits.len() != cache.trials.len() {
            return Err(ModelError::Shape(format!(
                "{} upstream gradients for {} cached trials",
                dlogits.len(),
                cache.trials.len()
            )));
        }
        let lay = self.layout(cache.n)?;
        if let Some(bad) = dlogits.iter().find(|d| d.len() != lay.classes * lay.p) {
            return Err(ModelError::Shape(format!(
                "upstream gradient has {} entries, expected {}",
                bad.len(),
                lay.classes * lay.p
            )));
        }
        let pr = &self.params;
        let n = cache.n;
        let lp = *lay.pooled.last().expect("non-empty");
        let count = |len: usize| F::of((cache.trials.len() * len) as f64);

        // readout back to BN2 input
        let mut per_trial: Vec<Gradients<F>> = Vec::with_capacity(cache.trials.len());
        let mut dy2s = Vec::with_capacity(cache.trials.len());
        for (t, dl) in cache.trials.iter().zip(dlogits) {
            let mut gr = Gradients::zeros_like(pr);
            let mut ddq = vec![F::zero(); lay.f2 * lay.p];
            matmul_backward(
                &pr[param::READOUT_WEIGHT].data,
                &t.dq,
                dl,
                lay.classes,
                lay.f2,
                lay.p,
                &mut gr.tensors[param::READOUT_WEIGHT],
                Some(&mut ddq),
            );
            for k in 0..lay.classes {
                gr.tensors[param::READOUT_BIAS][k] = dl[k * lay.p..(k + 1) * lay.p].iter().copied().sum();
            }
            let dq: Vec<F> = ddq.iter().zip(&t.mask2).map(|(&g, &m)| g * m).collect();
            let mut de2 = vec![F::zero(); lay.f2 * lay.l2];
            for f in 0..lay.f2 {
                mean_pool_backward(&dq[f * lay.p..(f + 1) * lay.p], lay.kf, lay.sp, &mut de2[f * lay.l2..(f + 1) * lay.l2]);
            }
            let dy2: Vec<F> = de2.iter().zip(&t.e2).map(|(&g, &y)| g * elu_grad(y)).collect();
            for f in 0..lay.f2 {
                let r = f * lay.l2..(f + 1) * lay.l2;
                gr.tensors[param::BN2_BIAS][f] = dy2[r.clone()].iter().copied().sum();
                gr.tensors[param::BN2_WEIGHT][f] = dy2[r.clone()].iter().zip(&t.xhat2[r]).map(|(&a, &b)| a * b).sum();
            }
            per_trial.push(gr);
            dy2s.push(dy2);
        }
        let (sum_beta2, sum_gamma2) = Self::bn_sums(&per_trial, param::BN2_BIAS, param::BN2_WEIGHT, lay.f2);
        let n2 = count(lay.l2);

        let mut dy1s = Vec::with_capacity(cache.trials.len());
        for ((t, dy2), gr) in cache.trials.iter().zip(&dy2s).zip(per_trial.iter_mut()) {
            let mut da2 = vec![F::zero(); lay.f2 * lay.l2];
            for f in 0..lay.f2 {
                let scale = pr[param::BN2_WEIGHT].data[f] * cache.inv_std[1][f];
                let (mb, mg) = (sum_beta2[f] / n2, sum_gamma2[f] / n2);
                for j in f * lay.l2..(f + 1) * lay.l2 {
                    da2[j] = scale * (dy2[j] - mb - t.xhat2[j] * mg);
                }
            }
            let mut ds = vec![F::zero(); lay.g * lay.l2];
            matmul_backward(
                &pr[param::POINTWISE].data,
                &t.s,
                &da2,
                lay.f2,
                lay.g,
                lay.l2,
                &mut gr.tensors[param::POINTWISE],
                Some(&mut ds),
            );
            let mut dd1 = vec![F::zero(); lay.g * lp];
            for g in 0..lay.g {
                conv1d_backward(
                    &t.d1[g * lp..(g + 1) * lp],
                    &pr[param::DEPTHWISE].data[g * lay.k2..(g + 1) * lay.k2],
                    lay.pad2,
                    &ds[g * lay.l2..(g + 1) * lay.l2],
                    Some(&mut dd1[g * lp..(g + 1) * lp]),
                    &mut gr.tensors[param::DEPTHWISE][g * lay.k2..(g + 1) * lay.k2],
                );
            }
            let mut cur: Vec<F> = dd1.iter().zip(&t.mask1).map(|(&g, &m)| g * m).collect();
            let kernels = self.config.rap_plan.downsampling_kernels();
            for (i, &k) in kernels.iter().enumerate().rev() {
                let (outer, inner) = (lay.pooled[i], lay.pooled[i + 1]);
                let mut prev = vec![F::zero(); lay.g * outer];
                for g in 0..lay.g {
                    mean_pool_backward(&cur[g * inner..(g + 1) * inner], k, k, &mut prev[g * outer..(g + 1) * outer]);
                }
                cur = prev;
            }
            let dy1: Vec<F> = cur.iter().zip(&t.e1).map(|(&g, &y)| g * elu_grad(y)).collect();
            for g in 0..lay.g {
                let r = g * lay.l1..(g + 1) * lay.l1;
                gr.tensors[param::BN1_BIAS][g] = dy1[r.clone()].iter().copied().sum();
                gr.tensors[param::BN1_WEIGHT][g] = dy1[r.clone()].iter().zip(&t.xhat1[r]).map(|(&a, &b)| a * b).sum();
            }
            dy1s.push(dy1);
        }
        let (sum_beta1, sum_gamma1) = Self::bn_sums(&per_trial, param::BN1_BIAS, param::BN1_WEIGHT, lay.g);
        let n1 = count(lay.l1);

        for ((t, dy1), gr) in cache.trials.iter().zip(&dy1s).zip(per_trial.iter_mut()) {
            let mut dz = vec![F::zero(); lay.g * n];
            let mut dw1 = vec![F::zero(); lay.g * lay.k1];
            for g in 0..lay.g {
                let scale = pr[param::BN1_WEIGHT].data[g] * cache.inv_std[0][g];
                let (mb, mg) = (sum_beta1[g] / n1, sum_gamma1[g] / n1);
                let da1: Vec<F> = (g * lay.l1..(g + 1) * lay.l1)
                    .map(|j| scale * (dy1[j] - mb - t.xhat1[j] * mg))
                    .collect();
                let f = g / lay.d;
                conv1d_backward(
                    &t.z[g * n..(g + 1) * n],
                    &pr[param::TEMPORAL].data[f * lay.k1..(f + 1) * lay.k1],
                    lay.pad1,
                    &da1,
                    Some(&mut dz[g * n..(g + 1) * n]),
                    &mut dw1[g * lay.k1..(g + 1) * lay.k1],
                );
            }
            let temporal = &mut gr.tensors[param::TEMPORAL];
            for g in 0..lay.g {
                let f = g / lay.d;
                for k in 0..lay.k1 {
                    temporal[f * lay.k1 + k] = temporal[f * lay.k1 + k] + dw1[g * lay.k1 + k];
                }
            }
            matmul_backward(
                &pr[param::SPATIAL].data,
                &t.x,
                &dz,
                lay.g,
                lay.c,
                n,
                &mut gr.tensors[param::SPATIAL],
                None::<&mut [F]>,
            );
        }

        let mut total = Gradients::zeros_like(pr);
        for g in &per_trial {
            total.add_assign(g);
        }
        Ok(total)
    }

    fn bn_sums(per_trial: &[Gradients<F>], beta: usize, gamma: usize, maps: usize) -> (Vec<F>, Vec<F>) {
        let mut sb = vec![F::zero(); maps];
        let mut sg = vec![F::zero(); maps];
        for g in per_trial {
            for m in 0..maps {
                sb[m] = sb[m] + g.tensors[beta][m];
                sg[m] = sg[m] + g.tensors[gamma][m];
            }
        }
        (sb, sg)
    }

    /// Summed per-trial cross-entropy (each averaged over positions) and its
    /// parameter gradients for one train-mode step.
    pub fn loss_and_gradients(
        &mut self,
        batch: &[&Matrix],
        labels: &[usize],
        dropout_seed: u64,
    ) -> Result<(f64, Gradients<F>), ModelError> {
        if labels.len() != batch.len() {
            return Err(ModelError::Shape(format!("{} labels for {} inputs", labels.len(), batch.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.config.class_count) {
            return Err(ModelError::Shape(format!("label {bad} out of range")));
        }
        let (_, cache) = self.forward_train(batch, dropout_seed)?;
        let (loss, dlogits) = cross_entropy(&cache.probs, labels, self.config.class_count);
        let grads = self.backward(&cache, &dlogits)?;
        Ok((loss, grads))
    }
}

/// Summed over trials, averaged over positions. Returns the loss and the
/// gradient with respect to the logits.
pub fn cross_entropy<F: Real>(probs: &[Vec<F>], labels: &[usize], classes: usize) -> (f64, Vec<Vec<F>>) {
    let mut loss = 0.0;
    let grads = probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| {
            let positions = p.len() / classes;
            let inv = F::one() / F::of(positions as f64);
            let mut trial = 0.0;
            let g = p
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let k = i / positions;
                    if k == y {
                        trial -= v.to_f64().expect("finite").max(f64::MIN_POSITIVE).ln();
                        (v - F::one()) * inv
                    } else {
                        v * inv
                    }
                })
                .collect();
            loss += trial / positions as f64;
            g
        })
        .collect();
    (loss, grads)
}

/// Copy of `x` with row `channel` set to zero.
pub fn zero_electrode(x: &Matrix, channel: usize) -> Result<Matrix, ModelError> {
    if channel >= x.rows() {
        return Err(ModelError::ChannelIndex {
            index: channel,
            count: x.rows(),
        });
    }
    let mut out = x.clone();
    out.row_mut(channel).iter_mut().for_each(|v| *v = 0.0);
    Ok(out)
}

#[cfg(test)]
mod tests;
