//! Source training: Adam with linear warmup and cosine decay, joint decoding
//! of whole trials, within-subject and leave-one-subject-out splits.

use std::f64::consts::PI;
use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{CohortSource, DataError, Role, Trial, TrialSet};
use crate::linalg::Matrix;
use crate::model::{Gradients, ModelConfig, ModelError, ModelState, Real, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training diverged: non-finite gradient in {param}")]
    Diverged { param: String },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("preprocessing failed: {0}")]
    Prepare(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    WithinSubject,
    CrossSubjectLoso,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    pub split: Split,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 100,
            warmup_epochs: 20,
            batch_size: 64,
            seeds: vec![0, 1, 2, 3, 4],
            split: Split::CrossSubjectLoso,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    /// Fine-tuning budget: 20 epochs at 1e-4, no warmup, cosine to zero.
    pub fn finetune() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 20,
            warmup_epochs: 0,
            split: Split::WithinSubject,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(TrainError::Config(format!(
                "warmup_epochs ({}) must be below epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(TrainError::Config("at least one seed is required".into()));
        }
        if !(self.learning_rate >= 0.0 && (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(TrainError::Config("learning rate must be non-negative and betas in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Learning rate for `epoch`: linear ramp `lr·(epoch+1)/warmup`, then
/// half-cosine decay over the remaining epochs.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64, TrainError> {
    if epoch >= cfg.epochs {
        return Err(TrainError::Domain(format!(
            "epoch {epoch} outside [0, {})",
            cfg.epochs
        )));
    }
    let lr = cfg.learning_rate;
    let w = cfg.warmup_epochs;
    if epoch < w {
        return Ok(lr * (epoch + 1) as f64 / w as f64);
    }
    let progress = (epoch - w) as f64 / (cfg.epochs - w) as f64;
    Ok(lr * 0.5 * (1.0 + (PI * progress).cos()))
}

/// Bias-corrected Adam moments, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<F: Real> AdamState<F> {
    pub fn new(params: &[Tensor<F>], beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.iter().map(|t| vec![F::zero(); t.data.len()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

pub fn adam_step<F: Real>(
    params: &mut [Tensor<F>],
    grads: &Gradients<F>,
    state: &mut AdamState<F>,
    lr: f64,
) -> Result<(), TrainError> {
    if grads.tensors.len() != params.len()
        || params.iter().zip(&grads.tensors).any(|(p, g)| p.data.len() != g.len())
        || state.m.len() != params.len()
    {
        return Err(TrainError::Shape("gradients, moments and parameters differ in shape".into()));
    }
    if let Some((p, _)) = params
        .iter()
        .zip(&grads.tensors)
        .find(|(_, g)| g.iter().any(|v| !v.is_finite()))
    {
        return Err(TrainError::Diverged { param: p.name.clone() });
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (F::of(state.beta1), F::of(state.beta2));
    let c1 = F::of(1.0 - state.beta1.powi(t));
    let c2 = F::of(1.0 - state.beta2.powi(t));
    let (lr, eps) = (F::of(lr), F::of(state.eps));
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.data.iter_mut().enumerate() {
            let g = grads.tensors[i][j];
            m[j] = b1 * m[j] + (F::one() - b1) * g;
            v[j] = b2 * v[j] + (F::one() - b2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// One record per epoch of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-trial training loss over the epoch.
    pub loss: f64,
    pub wall_ms: f64,
}

pub fn write_log(out: &mut impl Write, log: &[EpochLog]) -> std::io::Result<()> {
    for rec in log {
        serde_json::to_writer(&mut *out, rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Trains `model` on `trials` in place and returns the per-epoch log.
pub fn fit(
    model: &mut ModelState<f32>,
    trials: &[Trial],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<EpochLog>, TrainError> {
    cfg.validate()?;
    if trials.is_empty() {
        return Err(TrainError::Config("empty training partition".into()));
    }
    let len = trials[0].n_samples();
    if trials.iter().any(|t| t.n_samples() != len) {
        return Err(TrainError::Config("training trials must share one length".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = AdamState::new(model.params(), cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut order: Vec<usize> = (0..trials.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = lr_at(epoch, cfg)?;
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Matrix> = chunk.iter().map(|&i| &trials[i].data).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| trials[i].label).collect();
            let (loss, mut grads) = model.loss_and_gradients(&batch, &labels, rng.random())?;
            total += loss;
            grads.scale(1.0 / chunk.len() as f32);
            adam_step(model.params_mut(), &grads, &mut adam, lr)?;
        }
        log.push(EpochLog {
            epoch,
            lr,
            loss: total / trials.len() as f64,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(log)
}

/// Transform applied to every loaded training set before training (for
/// example per-subject alignment).
pub type Prepare<'a> = dyn Fn(TrialSet) -> Result<TrialSet, TrainError> + Sync + 'a;

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub seed: u64,
    pub model: ModelState<f32>,
    pub log: Vec<EpochLog>,
}

/// Subjects whose offline data the split trains on.
pub fn training_subjects(cohort: &dyn CohortSource, target: &str, split: Split) -> Result<Vec<String>, TrainError> {
    let subjects = cohort.subjects();
    if !subjects.iter().any(|s| s == target) {
        return Err(TrainError::Config(format!("unknown target subject {target}")));
    }
    let chosen: Vec<String> = match split {
        Split::WithinSubject => vec![target.to_string()],
        Split::CrossSubjectLoso => {
            if subjects.len() < 2 {
                return Err(TrainError::Config("leave-one-subject-out needs at least two subjects".into()));
            }
            subjects.into_iter().filter(|s| s != target).collect()
        }
    };
    let chosen: Vec<String> = chosen.into_iter().filter(|s| cohort.has(s, Role::Offline)).collect();
    if chosen.is_empty() {
        return Err(TrainError::Config("empty training partition: no offline data".into()));
    }
    Ok(chosen)
}

pub fn run_training(
    cohort: &dyn CohortSource,
    target: &str,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<Vec<TrainOutcome>, TrainError> {
    run_training_with(cohort, target, model_cfg, cfg, &|s| Ok(s))
}

/// Loads only the offline data of the split's training subjects, applies
/// `prepare` to each subject's set and trains one model per seed.
pub fn run_training_with(
    cohort: &dyn CohortSource,
    target: &str,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    prepare: &Prepare<'_>,
) -> Result<Vec<TrainOutcome>, TrainError> {
    cfg.validate()?;
    model_cfg.validate()?;
    let mut trials = Vec::new();
    for s in training_subjects(cohort, target, cfg.split)? {
        let set = prepare(cohort.load(&s, Role::Offline)?)?;
        trials.extend(set.trials);
    }
    if trials.is_empty() {
        return Err(TrainError::Config("empty training partition".into()));
    }
    cfg.seeds
        .par_iter()
        .map(|&seed| {
            let mut model = ModelState::<f32>::new(model_cfg.clone(), seed)?;
            let log = fit(&mut model, &trials, cfg, seed)?;
            Ok(TrainOutcome { seed, model, log })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Set when only one seed was given; `std` is then reported as 0.
    pub single_seed: bool,
}

/// Mean and sample standard deviation per metric across seeds
/// (`results[seed][metric]`).
pub fn multi_seed_aggregate(results: &[Vec<f64>]) -> Result<Aggregate, TrainError> {
    let first = results
        .first()
        .ok_or_else(|| TrainError::Config("no seed results to aggregate".into()))?;
    let m = first.len();
    if results.iter().any(|r| r.len() != m) {
        return Err(TrainError::Shape("seeds report different numbers of metrics".into()));
    }
    let n = results.len() as f64;
    let mean: Vec<f64> = (0..m).map(|j| results.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let std = (0..m)
        .map(|j| {
            if results.len() < 2 {
                0.0
            } else {
                (results.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            }
        })
        .collect();
    Ok(Aggregate {
        mean,
        std,
        single_seed: results.len() == 1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainBenchmark {
    pub trials: usize,
    pub windows_per_trial: usize,
    pub joint_ms: f64,
    pub individual_ms: f64,
    pub measured_gain: f64,
    pub theoretical_gain: f64,
}

/// Wall-clock of one forward+backward step on whole trials versus on every
/// window of those trials decoded separately (best of `repetitions`).
pub fn bench_joint_vs_individual(
    model_cfg: &ModelConfig,
    trial_length: f64,
    trials: usize,
    repetitions: usize,
    seed: u64,
) -> Result<GainBenchmark, TrainError> {
    if trials == 0 || repetitions == 0 {
        return Err(TrainError::Config("benchmark needs at least one trial and repetition".into()));
    }
    let plan = &model_cfg.rap_plan;
    let task = plan.task(Some(trial_length));
    let n_w = crate::rap::windows_per_trial(&task).map_err(ModelError::from)?;
    let theoretical_gain = crate::rap::computational_gain(&task).map_err(ModelError::from)?;
    let n = crate::data::round_half_up(trial_length * plan.sampling_frequency) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<Matrix> = (0..trials)
        .map(|_| Matrix::from_fn(model_cfg.channel_count, n, |_, _| rng.random_range(-1.0..1.0)))
        .collect();
    let windows: Vec<Matrix> = data
        .iter()
        .flat_map(|x| {
            (0..n_w).map(move |j| {
                let s = j * plan.hop_samples();
                x.columns(s, s + plan.window_samples()).expect("window inside trial")
            })
        })
        .collect();
    let mut model = ModelState::<f32>::new(model_cfg.clone(), seed)?;
    let mut time = |inputs: &[Matrix]| -> Result<f64, TrainError> {
        let refs: Vec<&Matrix> = inputs.iter().collect();
        let labels = vec![0; refs.len()];
        let mut best = f64::INFINITY;
        for r in 0..repetitions {
            let t0 = Instant::now();
            let (_, g) = model.loss_and_gradients(&refs, &labels, r as u64)?;
            std::hint::black_box(g);
            best = best.min(t0.elapsed().as_secs_f64() * 1e3);
        }
        Ok(best)
    };
    let joint_ms = time(&data)?;
    let individual_ms = time(&windows)?;
    Ok(GainBenchmark {
        trials,
        windows_per_trial: n_w,
        joint_ms,
        individual_ms,
        measured_gain: individual_ms / joint_ms,
        theoretical_gain,
    })
}


#[cfg(test)]
mod cohort_tests {
    use super::*;
    use crate::data::{generate_synth_cohort, Cohort, SynthConfig};
    use crate::rap::{plan_rap, OnlineTaskSpec};

    fn small_setup() -> (Cohort, ModelConfig) {
        let synth = SynthConfig {
            subject_count: 3,
            trials_per_subject: 32,
            rng_seed: 4,
            ..SynthConfig::default()
        };
        let subjects = generate_synth_cohort(&synth).unwrap();
        let cohort = Cohort::from(subjects.as_slice());
        let plan = plan_rap(128.0, &[4], &OnlineTaskSpec::new(1.0, 16.0, Some(4.75)).unwrap()).unwrap();
        (cohort, ModelConfig::compact(8, plan))
    }

    #[test]
    fn loso_training_halves_loss() {
        let (cohort, model_cfg) = small_setup();
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            epochs: 40,
            warmup_epochs: 3,
            batch_size: 16,
            seeds: vec![1],
            ..TrainConfig::default()
        };
        let out = run_training(&cohort, "S01", &model_cfg, &cfg).unwrap();
        let log = &out[0].log;
        assert_eq!(log.len(), 40);
        let first = log[0].loss;
        let last = log[log.len() - 1].loss;
        assert!(last <= 0.5 * first, "loss {first} -> {last}");
        let again = run_training(&cohort, "S01", &model_cfg, &cfg).unwrap();
        assert_eq!(again[0].model, out[0].model);
    }

    #[test]
    fn splits_pick_subjects() {
        let (cohort, _) = small_setup();
        assert_eq!(training_subjects(&cohort, "S02", Split::CrossSubjectLoso).unwrap(), ["S01", "S03"]);
        assert_eq!(training_subjects(&cohort, "S02", Split::WithinSubject).unwrap(), ["S02"]);
        assert!(training_subjects(&cohort, "S09", Split::WithinSubject).is_err());
    }
}
