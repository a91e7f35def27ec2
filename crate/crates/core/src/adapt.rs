//! Source-free adaptation: covariance alignment (EA/RA), AdaBN, and
//! supervised fine-tuning, in a calibration regime (target offline data) and
//! an online single-window regime.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, TrialSet};
use crate::linalg::{covariance, geodesic_step, karcher_mean, sqrt_and_inv_sqrt, LinalgError, Matrix, SpdMatrix};
use crate::model::{BnStats, ModelError, ModelState, Prediction, Real};
use crate::train::{fit, TrainConfig, TrainError};

pub const ADABN_MOMENTUM: f64 = 0.001;
pub const VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("degenerate reference covariance: {0}")]
    DegenerateReference(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unknown adaptation mode {0:?} (expected none|ft|ea|ra|adabn|ea+adabn|ra+adabn|ft+ea|ft+ra)")]
    Mode(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignMethod {
    Euclidean,
    Riemannian,
}

#[derive(Debug, Clone, PartialEq)]
struct RefState {
    mean: SpdMatrix,
    inv_sqrt: Matrix,
}

impl RefState {
    fn new(mean: SpdMatrix) -> Result<Self, AdaptError> {
        let (_, inv_sqrt) = sqrt_and_inv_sqrt(&mean).map_err(|e| AdaptError::DegenerateReference(e.to_string()))?;
        Ok(Self { mean, inv_sqrt })
    }
}

/// Mean reference covariance of one domain with its cached inverse square
/// root. An empty reference is initialized by its first online update.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentReference {
    method: AlignMethod,
    state: Option<RefState>,
    count: usize,
}

impl AlignmentReference {
    pub fn empty(method: AlignMethod) -> Self {
        Self {
            method,
            state: None,
            count: 0,
        }
    }

    /// A reference at `mean` that counts as `count` observed windows.
    pub fn from_mean(method: AlignMethod, mean: SpdMatrix, count: usize) -> Result<Self, AdaptError> {
        Ok(Self {
            method,
            state: Some(RefState::new(mean)?),
            count,
        })
    }

    pub fn method(&self) -> AlignMethod {
        self.method
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.state.is_none()
    }

    pub fn mean(&self) -> Option<&SpdMatrix> {
        self.state.as_ref().map(|s| &s.mean)
    }

    pub fn inv_sqrt(&self) -> Option<&Matrix> {
        self.state.as_ref().map(|s| &s.inv_sqrt)
    }

    /// `R̄^{-1/2} · x`.
    pub fn align(&self, x: &Matrix) -> Result<Matrix, AdaptError> {
        let s = self
            .state
            .as_ref()
            .ok_or_else(|| AdaptError::Config("alignment reference has seen no data".into()))?;
        if s.inv_sqrt.cols() != x.rows() {
            return Err(AdaptError::Shape(format!(
                "reference has {} channels, window has {}",
                s.inv_sqrt.cols(),
                x.rows()
            )));
        }
        Ok(s.inv_sqrt.matmul(x)?)
    }

    /// Equal-weight running update with one more window.
    pub fn update(&mut self, window: &Matrix) -> Result<(), AdaptError> {
        self.update_covariance(&covariance(window)?)
    }

    pub fn update_covariance(&mut self, cov: &SpdMatrix) -> Result<(), AdaptError> {
        let n = self.count + 1;
        let mean = match &self.state {
            None => cov.clone(),
            Some(s) => {
                if s.mean.dim() != cov.dim() {
                    return Err(AdaptError::Shape(format!(
                        "reference is {}×{}, covariance is {}×{}",
                        s.mean.dim(),
                        s.mean.dim(),
                        cov.dim(),
                        cov.dim()
                    )));
                }
                match self.method {
                    AlignMethod::Euclidean => {
                        let sum = s.mean.as_matrix().scale((n - 1) as f64).add(cov.as_matrix())?;
                        spd(sum.scale(1.0 / n as f64))?
                    }
                    AlignMethod::Riemannian => geodesic_step(&s.mean, cov, 1.0 / n as f64)?,
                }
            }
        };
        self.state = Some(RefState::new(mean)?);
        self.count = n;
        Ok(())
    }
}

fn spd(m: Matrix) -> Result<SpdMatrix, AdaptError> {
    SpdMatrix::new(m).map_err(|e| AdaptError::DegenerateReference(e.to_string()))
}

pub fn fit_reference(windows: &[Matrix], method: AlignMethod) -> Result<AlignmentReference, AdaptError> {
    let covs = windows.iter().map(covariance).collect::<Result<Vec<_>, _>>()?;
    fit_reference_covariances(&covs, method)
}

/// Arithmetic (euclidean) or Karcher (riemannian) mean of `covs`.
pub fn fit_reference_covariances(covs: &[SpdMatrix], method: AlignMethod) -> Result<AlignmentReference, AdaptError> {
    let first = covs
        .first()
        .ok_or_else(|| AdaptError::Config("reference needs at least one window".into()))?;
    if covs.iter().any(|c| c.dim() != first.dim()) {
        return Err(AdaptError::Shape("windows differ in channel count".into()));
    }
    let mean = match method {
        AlignMethod::Euclidean => {
            let mut acc = Matrix::zeros(first.dim(), first.dim());
            for c in covs {
                acc = acc.add(c.as_matrix())?;
            }
            spd(acc.scale(1.0 / covs.len() as f64))?
        }
        AlignMethod::Riemannian => karcher_mean(covs)?,
    };
    AlignmentReference::from_mean(method, mean, covs.len())
}

pub fn align(window: &Matrix, reference: &AlignmentReference) -> Result<Matrix, AdaptError> {
    reference.align(window)
}

pub fn update_reference_online(
    reference: &AlignmentReference,
    window: &Matrix,
) -> Result<AlignmentReference, AdaptError> {
    let mut next = reference.clone();
    next.update(window)?;
    Ok(next)
}

/// Fits a reference on the trial covariances of `set` and aligns every
/// trial with it.
pub fn align_set(set: &TrialSet, method: AlignMethod) -> Result<(TrialSet, AlignmentReference), AdaptError> {
    let windows: Vec<Matrix> = set.trials.iter().map(|t| t.data.clone()).collect();
    let reference = fit_reference(&windows, method)?;
    let aligned = set.map_data(|x| reference.align(x).map_err(|e| DataError::Domain(e.to_string())))?;
    Ok((aligned, reference))
}

/// Per-subject alignment applied to source training sets.
pub fn source_alignment(method: AlignMethod) -> impl Fn(TrialSet) -> Result<TrialSet, TrainError> + Sync {
    move |set| {
        align_set(&set, method)
            .map(|(s, _)| s)
            .map_err(|e| TrainError::Prepare(format!("{}: {e}", set.subject_id)))
    }
}

/// Exponentially updated BN statistics, seeded with the source statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaBnState {
    pub layers: Vec<BnStats<f64>>,
    pub momentum: f64,
    pub update_count: u64,
    /// Number of variance entries clamped to [`VARIANCE_FLOOR`].
    pub clamped: u64,
}

impl AdaBnState {
    pub fn new(source: Vec<BnStats<f64>>, momentum: f64) -> Result<Self, AdaptError> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(AdaptError::Config(format!("AdaBN momentum {momentum} outside (0, 1)")));
        }
        Ok(Self {
            layers: source,
            momentum,
            update_count: 0,
            clamped: 0,
        })
    }

    pub fn from_model<F: Real>(model: &ModelState<F>, momentum: f64) -> Result<Self, AdaptError> {
        Self::new(model.bn_stats().iter().map(|s| s.cast()).collect(), momentum)
    }

    /// One EMA step of every layer towards `batch`.
    pub fn update(&mut self, batch: &[BnStats<f64>]) -> Result<(), AdaptError> {
        if batch.len() != self.layers.len() {
            return Err(AdaptError::Shape(format!(
                "{} batch-norm layers, {} statistics given",
                self.layers.len(),
                batch.len()
            )));
        }
        for layer in 0..batch.len() {
            self.update_layer(layer, &batch[layer])?;
        }
        self.update_count += 1;
        Ok(())
    }

    fn update_layer(&mut self, layer: usize, batch: &BnStats<f64>) -> Result<(), AdaptError> {
        let a = self.momentum;
        let cur = &mut self.layers[layer];
        if cur.mean.len() != batch.mean.len() || cur.var.len() != batch.var.len() {
            return Err(AdaptError::Shape(format!("batch-norm layer {layer} size mismatch")));
        }
        for (m, &b) in cur.mean.iter_mut().zip(&batch.mean) {
            *m = (1.0 - a) * *m + a * b;
        }
        for (v, &b) in cur.var.iter_mut().zip(&batch.var) {
            *v = (1.0 - a) * *v + a * b;
            if !(*v > 0.0) {
                *v = VARIANCE_FLOOR;
                self.clamped += 1;
            }
        }
        Ok(())
    }

    /// Updates `layer` with the current window's statistics and returns the
    /// statistics to normalize it with. Counts one update per window.
    pub fn observe<F: Real>(&mut self, layer: usize, window: &BnStats<F>) -> Result<BnStats<F>, AdaptError> {
        if layer >= self.layers.len() {
            return Err(AdaptError::Shape(format!("no batch-norm layer {layer}")));
        }
        self.update_layer(layer, &window.cast())?;
        if layer + 1 == self.layers.len() {
            self.update_count += 1;
        }
        Ok(self.layers[layer].cast())
    }

    /// Copy of `model` normalizing with these statistics.
    pub fn apply<F: Real>(&self, model: &ModelState<F>) -> Result<ModelState<F>, AdaptError> {
        let mut out = model.clone();
        for (i, s) in self.layers.iter().enumerate() {
            out.set_bn_stats(i, s.cast())?;
        }
        Ok(out)
    }
}

pub fn adabn_update(state: &AdaBnState, batch: &[BnStats<f64>]) -> Result<AdaBnState, AdaptError> {
    let mut next = state.clone();
    next.update(batch)?;
    Ok(next)
}

/// Replaces the BN running statistics with the population statistics of
/// `calibration`.
pub fn adabn_replace<F: Real>(model: &ModelState<F>, calibration: &[&Matrix]) -> Result<ModelState<F>, AdaptError> {
    if calibration.is_empty() {
        return Err(AdaptError::Config("AdaBN needs at least one calibration window".into()));
    }
    let stats = model.batch_statistics(calibration)?;
    let mut out = model.clone();
    for (i, s) in stats.into_iter().enumerate() {
        out.set_bn_stats(i, s)?;
    }
    Ok(out)
}

/// Continues training from `model` on labeled target calibration trials.
pub fn supervised_finetune(
    model: &ModelState<f32>,
    calibration: &TrialSet,
    cfg: &TrainConfig,
) -> Result<ModelState<f32>, AdaptError> {
    if calibration.is_empty() {
        return Err(AdaptError::Config("fine-tuning needs at least one labeled trial".into()));
    }
    let mut out = model.clone();
    if cfg.epochs > 0 {
        let seed = *cfg
            .seeds
            .first()
            .ok_or_else(|| AdaptError::Config("at least one seed is required".into()))?;
        fit(&mut out, &calibration.trials, cfg, seed)?;
    }
    Ok(out)
}

/// One of `none | ft | ea | ra | adabn | ea+adabn | ra+adabn | ft+ea | ft+ra`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct AdaptMode {
    pub finetune: bool,
    pub align: Option<AlignMethod>,
    pub adabn: bool,
}

impl AdaptMode {
    pub const NONE: AdaptMode = AdaptMode {
        finetune: false,
        align: None,
        adabn: false,
    };

    pub fn all() -> Vec<AdaptMode> {
        ["none", "ft", "ea", "ra", "adabn", "ea+adabn", "ra+adabn", "ft+ea", "ft+ra"]
            .iter()
            .map(|s| s.parse().expect("listed mode"))
            .collect()
    }
}

impl FromStr for AdaptMode {
    type Err = AdaptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut mode = AdaptMode::NONE;
        if s == "none" {
            return Ok(mode);
        }
        let parts: Vec<&str> = s.split('+').collect();
        for p in &parts {
            match *p {
                "ft" if !mode.finetune => mode.finetune = true,
                "ea" if mode.align.is_none() => mode.align = Some(AlignMethod::Euclidean),
                "ra" if mode.align.is_none() => mode.align = Some(AlignMethod::Riemannian),
                "adabn" if !mode.adabn => mode.adabn = true,
                _ => return Err(AdaptError::Mode(s.into())),
            }
        }
        // supervised fine-tuning updates BN itself; AdaBN is not stacked on it
        if (mode.finetune && mode.adabn) || mode.to_string() != s {
            return Err(AdaptError::Mode(s.into()));
        }
        Ok(mode)
    }
}

impl fmt::Display for AdaptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.finetune {
            parts.push("ft");
        }
        match self.align {
            Some(AlignMethod::Euclidean) => parts.push("ea"),
            Some(AlignMethod::Riemannian) => parts.push("ra"),
            None => {}
        }
        if self.adabn {
            parts.push("adabn");
        }
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join("+"))
        }
    }
}

impl TryFrom<String> for AdaptMode {
    type Error = AdaptError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<AdaptMode> for String {
    fn from(m: AdaptMode) -> String {
        m.to_string()
    }
}

/// Decoder adapted once on target calibration data; the reference stays
/// fixed afterwards.
#[derive(Debug, Clone)]
pub struct Calibrated {
    pub model: ModelState<f32>,
    pub reference: Option<AlignmentReference>,
}

impl Calibrated {
    pub fn predict(&self, x: &Matrix) -> Result<Prediction, AdaptError> {
        match &self.reference {
            Some(r) => Ok(self.model.predict(&r.align(x)?)?),
            None => Ok(self.model.predict(x)?),
        }
    }
}

/// Calibration regime: align, then fine-tune or recompute BN statistics on
/// the aligned target offline trials.
pub fn calibrate(
    source: &ModelState<f32>,
    calibration: &TrialSet,
    mode: AdaptMode,
    finetune_cfg: &TrainConfig,
) -> Result<Calibrated, AdaptError> {
    let (data, reference) = match mode.align {
        Some(method) => {
            let (aligned, r) = align_set(calibration, method)?;
            (aligned, Some(r))
        }
        None => (calibration.clone(), None),
    };
    let mut model = source.clone();
    if mode.finetune {
        model = supervised_finetune(&model, &data, finetune_cfg)?;
    }
    if mode.adabn {
        let windows: Vec<&Matrix> = data.trials.iter().map(|t| &t.data).collect();
        model = adabn_replace(&model, &windows)?;
    }
    Ok(Calibrated { model, reference })
}

/// Online single-window regime: each window first updates the state, then
/// is decoded with it.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineAdapter {
    pub reference: Option<AlignmentReference>,
    pub adabn: Option<AdaBnState>,
    mode: AdaptMode,
    momentum: f64,
}

impl OnlineAdapter {
    pub fn new(mode: AdaptMode, model: &ModelState<f32>, momentum: f64) -> Result<Self, AdaptError> {
        if mode.finetune {
            return Err(AdaptError::Config(
                "fine-tuning needs labeled calibration data and has no online form".into(),
            ));
        }
        Ok(Self {
            reference: mode.align.map(AlignmentReference::empty),
            adabn: if mode.adabn {
                Some(AdaBnState::from_model(model, momentum)?)
            } else {
                None
            },
            mode,
            momentum,
        })
    }

    pub fn mode(&self) -> AdaptMode {
        self.mode
    }

    pub fn reset(&mut self, model: &ModelState<f32>) -> Result<(), AdaptError> {
        *self = Self::new(self.mode, model, self.momentum)?;
        Ok(())
    }

    pub fn decode(&mut self, model: &ModelState<f32>, window: &Matrix) -> Result<Prediction, AdaptError> {
        let aligned;
        let x = match &mut self.reference {
            Some(r) => {
                r.update(window)?;
                aligned = r.align(window)?;
                &aligned
            }
            None => window,
        };
        match &mut self.adabn {
            Some(state) => {
                let mut failure = None;
                let mut hook = |layer: usize, s: &BnStats<f32>| match state.observe(layer, s) {
                    Ok(v) => v,
                    Err(e) => {
                        failure.get_or_insert(e);
                        s.clone()
                    }
                };
                let p = model.predict_with_hook(x, &mut hook)?;
                match failure {
                    Some(e) => Err(e),
                    None => Ok(p),
                }
            }
            None => Ok(model.predict(x)?),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_window(rng: &mut ChaCha8Rng, c: usize, n: usize) -> Matrix {
        let mix = Matrix::from_fn(c, c, |i, j| if i == j { 1.0 } else { rng.random_range(-0.4..0.4) });
        mix.matmul(&Matrix::from_fn(c, n, |_, _| StandardNormal.sample(&mut *rng)))
            .unwrap()
    }

    fn windows(seed: u64, count: usize) -> Vec<Matrix> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| random_window(&mut rng, 4, 64)).collect()
    }

    fn alternating(amplitude: f64) -> Matrix {
        Matrix::from_fn(1, 8, |_, t| if t % 2 == 0 { amplitude } else { -amplitude })
    }

    #[test]
    fn singleton_reference_is_the_covariance() {
        let w = windows(1, 1);
        let cov = covariance(&w[0]).unwrap();
        for m in [AlignMethod::Euclidean, AlignMethod::Riemannian] {
            let r = fit_reference(&w, m).unwrap();
            assert!(r.mean().unwrap().as_matrix().sub(cov.as_matrix()).unwrap().max_abs() < 1e-12);
            assert_eq!(r.count(), 1);
        }
    }

    #[test]
    fn scalar_means() {
        let w = [alternating(1.0), alternating(2.0)];
        let e = fit_reference(&w, AlignMethod::Euclidean).unwrap();
        let r = fit_reference(&w, AlignMethod::Riemannian).unwrap();
        assert!((e.mean().unwrap().as_matrix()[(0, 0)] - 2.5).abs() < 1e-12);
        assert!((r.mean().unwrap().as_matrix()[(0, 0)] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn aligned_set_is_whitened() {
        let w = windows(2, 12);
        let e = fit_reference(&w, AlignMethod::Euclidean).unwrap();
        let mut acc = Matrix::zeros(4, 4);
        for x in &w {
            acc = acc.add(covariance(&e.align(x).unwrap()).unwrap().as_matrix()).unwrap();
        }
        let dev = acc.scale(1.0 / 12.0).sub(&Matrix::identity(4)).unwrap();
        assert!(dev.frobenius_norm() < 1e-8);

        let r = fit_reference(&w, AlignMethod::Riemannian).unwrap();
        let covs: Vec<SpdMatrix> = w.iter().map(|x| covariance(&r.align(x).unwrap()).unwrap()).collect();
        let g = karcher_mean(&covs).unwrap();
        assert!(g.as_matrix().sub(&Matrix::identity(4)).unwrap().frobenius_norm() < 1e-6);
    }

    #[test]
    fn identity_reference_keeps_window() {
        let w = windows(3, 1).remove(0);
        let r = AlignmentReference::from_mean(AlignMethod::Euclidean, SpdMatrix::identity(4), 1).unwrap();
        assert_eq!(align(&w, &r).unwrap(), w);
        assert!(matches!(align(&alternating(1.0), &r), Err(AdaptError::Shape(_))));
    }

    #[test]
    fn online_euclidean_matches_batch() {
        let w = windows(4, 9);
        let mut online = AlignmentReference::empty(AlignMethod::Euclidean);
        for n in 1..=w.len() {
            online = update_reference_online(&online, &w[n - 1]).unwrap();
            let batch = fit_reference(&w[..n], AlignMethod::Euclidean).unwrap();
            let d = online.mean().unwrap().as_matrix().sub(batch.mean().unwrap().as_matrix()).unwrap();
            assert!(d.max_abs() < 1e-10);
            assert_eq!(online.count(), n);
        }
    }

    #[test]
    fn online_riemannian_scalar_midpoint() {
        let mut r = AlignmentReference::empty(AlignMethod::Riemannian);
        r.update(&alternating(1.0)).unwrap();
        assert_eq!(r.count(), 1);
        assert!((r.mean().unwrap().as_matrix()[(0, 0)] - 1.0).abs() < 1e-12);
        r.update(&alternating(2f64.exp())).unwrap();
        assert!((r.mean().unwrap().as_matrix()[(0, 0)] - 2f64.exp()).abs() < 1e-10);
    }

    #[test]
    fn alignment_removes_scale() {
        let w = windows(5, 6);
        let scaled: Vec<Matrix> = w.iter().map(|x| x.scale(7.5)).collect();
        for m in [AlignMethod::Euclidean, AlignMethod::Riemannian] {
            let a = fit_reference(&w, m).unwrap();
            let b = fit_reference(&scaled, m).unwrap();
            for (x, y) in w.iter().zip(&scaled) {
                let d = a.align(x).unwrap().sub(&b.align(y).unwrap()).unwrap();
                assert!(d.max_abs() < 1e-9);
            }
        }
    }

    fn scalar_state(mu: f64, alpha: f64) -> AdaBnState {
        AdaBnState::new(
            vec![BnStats {
                mean: vec![mu],
                var: vec![1.0],
            }],
            alpha,
        )
        .unwrap()
    }

    #[test]
    fn adabn_constant_stream_closed_form() {
        let target = [BnStats {
            mean: vec![1.0],
            var: vec![1.0],
        }];
        let mut s = scalar_state(0.0, ADABN_MOMENTUM);
        for n in 1..=1000u32 {
            s.update(&target).unwrap();
            let expect = 1.0 - (1.0 - ADABN_MOMENTUM).powi(n as i32);
            assert!((s.layers[0].mean[0] - expect).abs() < 1e-12);
        }
        assert!((scalar_state(0.0, ADABN_MOMENTUM).layers[0].mean[0]).abs() < 1e-300);
        let half = adabn_update(
            &scalar_state(0.0, 0.5),
            &[BnStats {
                mean: vec![2.0],
                var: vec![1.0],
            }],
        )
        .unwrap();
        assert_eq!(half.layers[0].mean[0], 1.0);
        assert!(AdaBnState::new(vec![], 0.0).is_err());
    }

    #[test]
    fn adabn_source_stream_stays_near_source() {
        let alpha = 0.01;
        let mut s = scalar_state(0.0, alpha);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 2000;
        for _ in 0..n {
            let e: f64 = StandardNormal.sample(&mut rng);
            s.update(&[BnStats {
                mean: vec![e],
                var: vec![1.0],
            }])
            .unwrap();
        }
        let stderr = (alpha / (2.0 - alpha) * (1.0 - (1.0 - alpha).powi(2 * n))).sqrt();
        assert!(s.layers[0].mean[0].abs() < 5.0 * stderr);
    }

    #[test]
    fn adabn_clamps_variance() {
        let mut s = scalar_state(0.0, 0.5);
        s.update(&[BnStats {
            mean: vec![0.0],
            var: vec![-3.0],
        }])
        .unwrap();
        assert_eq!(s.layers[0].var[0], VARIANCE_FLOOR);
        assert_eq!(s.clamped, 1);
    }

    #[test]
    fn mode_grammar() {
        let all = AdaptMode::all();
        assert_eq!(all.len(), 9);
        for m in &all {
            assert_eq!(m.to_string().parse::<AdaptMode>().unwrap(), *m);
        }
        for bad in ["", "ea+ra", "adabn+ea", "ft+adabn", "ft+ft", "xx"] {
            assert!(bad.parse::<AdaptMode>().is_err(), "{bad}");
        }
        let json = serde_json::to_string(&all[5]).unwrap();
        assert_eq!(json, "\"ea+adabn\"");
    }
}

#[cfg(test)]
mod model_tests {
    use super::*;
    use crate::data::{generate_synth_cohort, SynthConfig};
    use crate::model::ModelConfig;
    use crate::rap::{plan_rap, OnlineTaskSpec};

    fn setup() -> (TrialSet, ModelState<f32>) {
        let synth = SynthConfig {
            subject_count: 1,
            trials_per_subject: 24,
            rng_seed: 9,
            ..SynthConfig::default()
        };
        let set = generate_synth_cohort(&synth).unwrap().remove(0).offline;
        let plan = plan_rap(128.0, &[4], &OnlineTaskSpec::new(1.0, 16.0, Some(4.75)).unwrap()).unwrap();
        let model = ModelState::new(ModelConfig::compact(8, plan), 3).unwrap();
        (set, model)
    }

    #[test]
    fn replacement_is_a_fixed_point() {
        let (set, model) = setup();
        let w: Vec<&Matrix> = set.trials.iter().map(|t| &t.data).collect();
        let replaced = adabn_replace(&model, &w).unwrap();
        let stats = model.batch_statistics(&w).unwrap();
        assert_eq!(replaced.bn_stats(), &stats);
        let again = replaced.batch_statistics(&w).unwrap();
        assert_eq!(again, stats);
        assert!(adabn_replace(&model, &[]).is_err());
    }

    #[test]
    fn single_window_replacement() {
        let (set, model) = setup();
        let x = set.trials[0].data.columns(0, 128).unwrap();
        let replaced = adabn_replace(&model, &[&x]).unwrap();
        assert_eq!(replaced.bn_stats(), &model.batch_statistics(&[&x]).unwrap());
    }

    #[test]
    fn replacement_on_training_data_recovers_running_stats() {
        let (set, mut model) = setup();
        // lr 0 leaves the weights fixed so the running averages settle on the
        // population statistics of the training data
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 60,
            warmup_epochs: 0,
            batch_size: 8,
            seeds: vec![0],
            ..TrainConfig::default()
        };
        let mut dropout_free = model.config().clone();
        dropout_free.dropout_rate = 0.0;
        model = ModelState::new(dropout_free, 3).unwrap();
        fit(&mut model, &set.trials, &cfg, 0).unwrap();
        let w: Vec<&Matrix> = set.trials.iter().map(|t| &t.data).collect();
        let exact = adabn_replace(&model, &w).unwrap();
        for (run, pop) in model.bn_stats().iter().zip(exact.bn_stats()) {
            for (a, b) in run.var.iter().zip(&pop.var) {
                assert!((a / b - 1.0).abs() < 0.1, "{a} vs {b}");
            }
            for ((a, b), v) in run.mean.iter().zip(&pop.mean).zip(&pop.var) {
                assert!((a - b).abs() < 0.1 * v.sqrt(), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_epoch_finetune_is_identity() {
        let (set, model) = setup();
        let cfg = TrainConfig {
            epochs: 0,
            warmup_epochs: 0,
            ..TrainConfig::finetune()
        };
        assert_eq!(supervised_finetune(&model, &set, &cfg).unwrap(), model);
    }

    #[test]
    fn online_adapter_cold_start_whitens_first_window() {
        let (set, model) = setup();
        let mut ad = OnlineAdapter::new("ea+adabn".parse().unwrap(), &model, ADABN_MOMENTUM).unwrap();
        let x = set.trials[0].data.columns(0, 128).unwrap();
        let p = ad.decode(&model, &x).unwrap();
        assert_eq!(p.positions(), 1);
        let r = ad.reference.as_ref().unwrap();
        assert_eq!(r.count(), 1);
        let c = covariance(&r.align(&x).unwrap()).unwrap();
        assert!(c.as_matrix().sub(&Matrix::identity(8)).unwrap().max_abs() < 1e-8);
        assert_eq!(ad.adabn.as_ref().unwrap().update_count, 1);
        assert!(OnlineAdapter::new("ft".parse().unwrap(), &model, ADABN_MOMENTUM).is_err());
    }
}
