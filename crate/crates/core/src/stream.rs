//! Pseudo-online replay: trials are fed one sample at a time through a
//! one-window ring buffer, a window is decoded at every hop, and online
//! adaptation state advances strictly in emission order.

use std::io::Write;
use std::thread::sleep;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapt::{AdaBnState, AdaptError, AdaptMode, AlignmentReference, ADABN_MOMENTUM};
use crate::data::TrialSet;
use crate::eval::TrialPrediction;
use crate::linalg::Matrix;
use crate::mdm::{MdmError, MdmModel};
use crate::model::{BnStats, ModelError, ModelState};
use crate::rap::OnlineTaskSpec;

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("no latency samples: {0}")]
    EmptyStats(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Adapt(#[from] AdaptError),
    #[error(transparent)]
    Mdm(#[from] MdmError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// What turns a window into class probabilities.
#[derive(Debug, Clone)]
pub enum Decoder {
    Model(Box<ModelState<f32>>),
    /// MDM with a fixed recentering reference, or `None` when a
    /// [`Hook::Recenter`] supplies it.
    Mdm {
        model: MdmModel,
        reference: Option<AlignmentReference>,
    },
    /// Returns the same row for every window.
    Constant(Vec<f64>),
}

/// Online adaptation state, updated by every window before it is decoded.
#[derive(Debug, Clone, PartialEq)]
pub enum Hook {
    /// Running alignment reference; windows reach the decoder aligned.
    Align(AlignmentReference),
    /// Exponential BN statistics for a model decoder.
    AdaBn(AdaBnState),
    /// Running recentering reference for an MDM decoder.
    Recenter(AlignmentReference),
}

impl Hook {
    fn name(&self) -> &'static str {
        match self {
            Hook::Align(_) => "align",
            Hook::AdaBn(_) => "adabn",
            Hook::Recenter(_) => "recenter",
        }
    }
}

/// Hooks of an online adaptation mode for `model`.
pub fn hooks_for_mode(mode: AdaptMode, model: &ModelState<f32>) -> Result<Vec<Hook>, StreamError> {
    if mode.finetune {
        return Err(StreamError::Config("fine-tuning has no online hook".into()));
    }
    let mut hooks = Vec::new();
    if let Some(m) = mode.align {
        hooks.push(Hook::Align(AlignmentReference::empty(m)));
    }
    if mode.adabn {
        hooks.push(Hook::AdaBn(AdaBnState::from_model(model, ADABN_MOMENTUM)?));
    }
    Ok(hooks)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    /// Restore the initial hook state at every trial boundary.
    pub reset_per_trial: bool,
    /// Sleep so each window is emitted when its last sample would arrive.
    pub real_time: bool,
    /// Stop after this many events.
    pub max_events: Option<usize>,
    /// Artificial delay added to the decode of one tick.
    pub stall: Option<Stall>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stall {
    pub tick: u64,
    pub ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamEvent {
    pub tick: u64,
    pub trial: usize,
    pub window: usize,
    pub probabilities: Vec<f64>,
    pub latency_ms: f64,
    pub deadline_met: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean: f64,
    pub p95: f64,
    pub max: f64,
    pub count: usize,
}

impl LatencyStats {
    pub fn from_samples(samples: &[f64]) -> Result<Self, StreamError> {
        if samples.is_empty() {
            return Err(StreamError::EmptyStats("no windows were timed".into()));
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let rank = ((0.95 * s.len() as f64).ceil() as usize).max(1) - 1;
        Ok(Self {
            mean: s.iter().sum::<f64>() / s.len() as f64,
            p95: s[rank],
            max: s[s.len() - 1],
            count: s.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub events: usize,
    pub trials: usize,
    pub deadline_ms: f64,
    pub deadline_misses: usize,
    pub latency: LatencyStats,
    pub real_time: bool,
    /// Largest lateness of a paced emission behind its sample clock.
    pub max_jitter_ms: f64,
    pub wall_ms: f64,
}

/// Channels × one window, written one sample column at a time.
#[derive(Debug, Clone)]
struct RingBuffer {
    data: Vec<f64>,
    channels: usize,
    len: usize,
    head: usize,
    filled: usize,
}

impl RingBuffer {
    fn new(channels: usize, len: usize) -> Self {
        Self {
            data: vec![0.0; channels * len],
            channels,
            len,
            head: 0,
            filled: 0,
        }
    }

    fn clear(&mut self) {
        self.head = 0;
        self.filled = 0;
    }

    fn push(&mut self, x: &Matrix, t: usize) {
        for c in 0..self.channels {
            self.data[c * self.len + self.head] = x[(c, t)];
        }
        self.head = (self.head + 1) % self.len;
        self.filled = (self.filled + 1).min(self.len);
    }

    /// The buffered window, oldest sample first.
    fn window(&self) -> Matrix {
        let mut out = Matrix::zeros(self.channels, self.len);
        let tail = self.len - self.head;
        for c in 0..self.channels {
            let src = &self.data[c * self.len..(c + 1) * self.len];
            let dst = out.row_mut(c);
            dst[..tail].copy_from_slice(&src[self.head..]);
            dst[tail..].copy_from_slice(&src[..self.head]);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct StreamSession {
    task: OnlineTaskSpec,
    sampling_frequency: f64,
    channels: usize,
    window_samples: usize,
    hop_samples: usize,
    decoder: Decoder,
    hooks: Vec<Hook>,
    initial_hooks: Vec<Hook>,
    config: SessionConfig,
    buffer: RingBuffer,
    tick: u64,
    latency: Vec<f64>,
}

impl StreamSession {
    pub fn new(
        task: OnlineTaskSpec,
        sampling_frequency: f64,
        channels: usize,
        decoder: Decoder,
        hooks: Vec<Hook>,
        config: SessionConfig,
    ) -> Result<Self, StreamError> {
        task.validate().map_err(|e| StreamError::Config(e.to_string()))?;
        let window_samples = (task.window_length * sampling_frequency).round() as usize;
        let hop = sampling_frequency / task.update_frequency;
        if window_samples == 0 || (hop - hop.round()).abs() > 1e-9 || hop < 1.0 {
            return Err(StreamError::Config(format!(
                "{sampling_frequency} Hz gives no integer hop for {} Hz updates",
                task.update_frequency
            )));
        }
        let hop_samples = hop.round() as usize;
        match &decoder {
            Decoder::Model(m) => {
                let plan = &m.config().rap_plan;
                if m.config().channel_count != channels
                    || plan.window_samples() != window_samples
                    || plan.hop_samples() != hop_samples
                {
                    return Err(StreamError::Config(format!(
                        "model expects {} channels, {}-sample windows every {} samples; stream has {channels}, {window_samples}, {hop_samples}",
                        m.config().channel_count,
                        plan.window_samples(),
                        plan.hop_samples()
                    )));
                }
            }
            Decoder::Mdm { model, reference } => {
                if model.dim() != channels {
                    return Err(StreamError::Config(format!(
                        "MDM model is {}-channel, stream has {channels}",
                        model.dim()
                    )));
                }
                let recentered = hooks.iter().any(|h| matches!(h, Hook::Recenter(_)));
                if reference.is_none() && !recentered {
                    return Err(StreamError::Config("MDM decoder needs a reference or a recenter hook".into()));
                }
            }
            Decoder::Constant(row) => {
                if row.len() < 2 || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(StreamError::Config("constant decoder needs a probability row".into()));
                }
            }
        }
        let mut seen_adabn = false;
        for h in &hooks {
            match (h, &decoder) {
                (Hook::AdaBn(_), Decoder::Model(_)) => seen_adabn = true,
                (Hook::Align(_), Decoder::Model(_)) if seen_adabn => {
                    return Err(StreamError::Config("alignment must precede AdaBN".into()));
                }
                (Hook::Align(_), Decoder::Model(_)) | (Hook::Recenter(_), Decoder::Mdm { .. }) => {}
                (h, _) => {
                    return Err(StreamError::Config(format!("hook {} does not fit this decoder", h.name())));
                }
            }
        }
        Ok(Self {
            task,
            sampling_frequency,
            channels,
            window_samples,
            hop_samples,
            decoder,
            initial_hooks: hooks.clone(),
            hooks,
            config,
            buffer: RingBuffer::new(channels, window_samples),
            tick: 0,
            latency: Vec::new(),
        })
    }

    pub fn deadline_ms(&self) -> f64 {
        1000.0 / self.task.update_frequency
    }

    pub fn hooks(&self) -> &[Hook] {
        &self.hooks
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn latency_log(&self) -> &[f64] {
        &self.latency
    }

    pub fn reset_hooks(&mut self) {
        self.hooks = self.initial_hooks.clone();
    }

    /// Runs the hooks on `window` and decodes it.
    pub fn decode_window(&mut self, window: &Matrix) -> Result<Vec<f64>, StreamError> {
        let mut x = std::borrow::Cow::Borrowed(window);
        let mut adabn = None;
        let mut recenter = None;
        for h in self.hooks.iter_mut() {
            match h {
                Hook::Align(r) => {
                    r.update(&x)?;
                    x = std::borrow::Cow::Owned(r.align(&x)?);
                }
                Hook::AdaBn(s) => adabn = Some(s),
                Hook::Recenter(r) => {
                    r.update(&x)?;
                    recenter = Some(&*r);
                }
            }
        }
        match &self.decoder {
            Decoder::Model(m) => {
                let p = match adabn {
                    Some(state) => {
                        let mut failure = None;
                        let mut hook = |layer: usize, s: &BnStats<f32>| match state.observe(layer, s) {
                            Ok(v) => v,
                            Err(e) => {
                                failure.get_or_insert(e);
                                s.clone()
                            }
                        };
                        let p = m.predict_with_hook(&x, &mut hook)?;
                        if let Some(e) = failure {
                            return Err(e.into());
                        }
                        p
                    }
                    None => m.predict(&x)?,
                };
                Ok(p.row(0).to_vec())
            }
            Decoder::Mdm { model, reference } => {
                let r = recenter
                    .or(reference.as_ref())
                    .ok_or_else(|| StreamError::Config("MDM decoder has no reference".into()))?;
                Ok(crate::mdm::mdm_predict(&x, model, r)?)
            }
            Decoder::Constant(row) => Ok(row.clone()),
        }
    }

    fn check_trials(&self, set: &TrialSet) -> Result<(), StreamError> {
        if set.spec.channel_count() != self.channels {
            return Err(StreamError::Config(format!(
                "trials have {} channels, session expects {}",
                set.spec.channel_count(),
                self.channels
            )));
        }
        if (set.spec.sampling_frequency - self.sampling_frequency).abs() > 1e-9 {
            return Err(StreamError::Config("trial and session sampling rates differ".into()));
        }
        for (i, t) in set.trials.iter().enumerate() {
            let n = t.n_samples();
            if n < self.window_samples || !(n - self.window_samples).is_multiple_of(self.hop_samples) {
                return Err(StreamError::Config(format!(
                    "trial {i} has {n} samples; needs {} + a multiple of {}",
                    self.window_samples, self.hop_samples
                )));
            }
        }
        Ok(())
    }

    /// Streams every trial of `set` back to back.
    pub fn run(&mut self, set: &TrialSet) -> Result<(Vec<StreamEvent>, SessionSummary), StreamError> {
        self.check_trials(set)?;
        let deadline = self.deadline_ms();
        let limit = self.config.max_events.unwrap_or(usize::MAX);
        let started = Instant::now();
        let mut events = Vec::new();
        let mut max_jitter: f64 = 0.0;
        let mut clock_samples = 0usize;
        'trials: for (ti, trial) in set.trials.iter().enumerate() {
            if self.config.reset_per_trial && ti > 0 {
                self.reset_hooks();
            }
            self.buffer.clear();
            let mut window = 0;
            for t in 0..trial.n_samples() {
                self.buffer.push(&trial.data, t);
                clock_samples += 1;
                let end = t + 1;
                if end < self.window_samples || !(end - self.window_samples).is_multiple_of(self.hop_samples) {
                    continue;
                }
                if events.len() >= limit {
                    break 'trials;
                }
                if self.config.real_time {
                    let due = Duration::from_secs_f64(clock_samples as f64 / self.sampling_frequency);
                    let now = started.elapsed();
                    if now < due {
                        sleep(due - now);
                    } else {
                        max_jitter = max_jitter.max((now - due).as_secs_f64() * 1e3);
                    }
                }
                let t0 = Instant::now();
                let x = self.buffer.window();
                if let Some(s) = self.config.stall.filter(|s| s.tick == self.tick) {
                    sleep(Duration::from_secs_f64(s.ms / 1e3));
                }
                let probabilities = self.decode_window(&x)?;
                let latency_ms = t0.elapsed().as_secs_f64() * 1e3;
                self.latency.push(latency_ms);
                events.push(StreamEvent {
                    tick: self.tick,
                    trial: ti,
                    window,
                    probabilities,
                    latency_ms,
                    deadline_met: latency_ms <= deadline,
                });
                self.tick += 1;
                window += 1;
            }
        }
        let lat: Vec<f64> = events.iter().map(|e| e.latency_ms).collect();
        let summary = SessionSummary {
            events: events.len(),
            trials: events.last().map_or(0, |e| e.trial + 1),
            deadline_ms: deadline,
            deadline_misses: events.iter().filter(|e| !e.deadline_met).count(),
            latency: if lat.is_empty() {
                LatencyStats {
                    mean: 0.0,
                    p95: 0.0,
                    max: 0.0,
                    count: 0,
                }
            } else {
                LatencyStats::from_samples(&lat)?
            },
            real_time: self.config.real_time,
            max_jitter_ms: max_jitter,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        Ok((events, summary))
    }
}

pub fn run_session(
    session: &mut StreamSession,
    set: &TrialSet,
) -> Result<(Vec<StreamEvent>, SessionSummary), StreamError> {
    session.run(set)
}

/// Timing of the single-window decode path on windows cycled from `set`,
/// excluding the first `warmup` decodes.
pub fn measure_latency(
    session: &mut StreamSession,
    set: &TrialSet,
    repetitions: usize,
    warmup: usize,
) -> Result<LatencyStats, StreamError> {
    if repetitions == 0 {
        return Err(StreamError::EmptyStats("zero repetitions requested".into()));
    }
    session.check_trials(set)?;
    let windows: Vec<Matrix> = set
        .trials
        .iter()
        .flat_map(|t| {
            let n_w = (t.n_samples() - session.window_samples) / session.hop_samples + 1;
            (0..n_w).map(move |j| (t, j))
        })
        .map(|(t, j)| {
            let s = j * session.hop_samples;
            t.data.columns(s, s + session.window_samples).expect("window inside trial")
        })
        .collect();
    if windows.is_empty() {
        return Err(StreamError::EmptyStats("no windows in the trial set".into()));
    }
    let mut samples = Vec::with_capacity(repetitions);
    for i in 0..warmup + repetitions {
        let src = &windows[i % windows.len()];
        let t0 = Instant::now();
        let mut buf = RingBuffer::new(session.channels, session.window_samples);
        for t in 0..src.cols() {
            buf.push(src, t);
        }
        let p = session.decode_window(&buf.window())?;
        std::hint::black_box(p);
        if i >= warmup {
            samples.push(t0.elapsed().as_secs_f64() * 1e3);
        }
    }
    LatencyStats::from_samples(&samples)
}

pub fn write_events(out: &mut impl Write, events: &[StreamEvent]) -> std::io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut *out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Groups events back into per-trial prediction rows.
pub fn events_to_predictions(events: &[StreamEvent], set: &TrialSet) -> Result<Vec<TrialPrediction>, StreamError> {
    let mut rows: Vec<Vec<Vec<f64>>> = vec![Vec::new(); set.len()];
    for e in events {
        rows.get_mut(e.trial)
            .ok_or_else(|| StreamError::Config(format!("event for unknown trial {}", e.trial)))?
            .push(e.probabilities.clone());
    }
    rows.iter()
        .zip(&set.trials)
        .filter(|(r, _)| !r.is_empty())
        .map(|(r, t)| TrialPrediction::from_rows(r, t.label).map_err(|e| StreamError::Config(e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synth_cohort, SynthConfig};
    use crate::model::ModelConfig;
    use crate::rap::plan_rap;

    fn setup(trials: usize) -> (TrialSet, ModelState<f32>, OnlineTaskSpec) {
        let synth = SynthConfig {
            subject_count: 1,
            trials_per_subject: 2 * trials,
            subject_shift_scale: 0.5,
            rng_seed: 3,
            ..SynthConfig::default()
        };
        let set = generate_synth_cohort(&synth).unwrap().remove(0).online;
        let task = OnlineTaskSpec::new(1.0, 16.0, Some(4.75)).unwrap();
        let plan = plan_rap(128.0, &[4], &task).unwrap();
        (set, ModelState::new(ModelConfig::compact(8, plan), 2).unwrap(), task)
    }

    fn session(model: &ModelState<f32>, task: OnlineTaskSpec, hooks: Vec<Hook>, cfg: SessionConfig) -> StreamSession {
        StreamSession::new(task, 128.0, 8, Decoder::Model(Box::new(model.clone())), hooks, cfg).unwrap()
    }

    #[test]
    fn ring_buffer_orders_samples() {
        let x = Matrix::from_fn(2, 7, |c, t| (10 * c + t) as f64);
        let mut b = RingBuffer::new(2, 4);
        for t in 0..7 {
            b.push(&x, t);
        }
        assert_eq!(b.window(), x.columns(3, 7).unwrap());
    }

    #[test]
    fn replay_matches_batched_windows() {
        let (set, model, task) = setup(2);
        let mut s = session(&model, task, vec![], SessionConfig::default());
        let (events, summary) = s.run(&set).unwrap();
        assert_eq!(events.len(), 2 * 61);
        assert_eq!(summary.events, 122);
        for e in &events {
            let start = e.window * 8;
            let w = set.trials[e.trial].data.columns(start, start + 128).unwrap();
            assert_eq!(e.probabilities, model.predict(&w).unwrap().row(0).to_vec());
        }
        assert_eq!((events[61].trial, events[61].window), (1, 0));
    }

    #[test]
    fn prefix_determinism() {
        let (set, model, task) = setup(2);
        let hooks = hooks_for_mode("ea+adabn".parse().unwrap(), &model).unwrap();
        let (full, _) = session(&model, task, hooks.clone(), SessionConfig::default()).run(&set).unwrap();
        for cut in [1, 17, 61, 90] {
            let cfg = SessionConfig {
                max_events: Some(cut),
                ..SessionConfig::default()
            };
            let (part, _) = session(&model, task, hooks.clone(), cfg).run(&set).unwrap();
            assert_eq!(part.len(), cut);
            for (a, b) in part.iter().zip(&full) {
                assert_eq!(a.probabilities, b.probabilities);
            }
        }
    }

    #[test]
    fn reset_restarts_each_trial() {
        let (set, model, task) = setup(2);
        let hooks = hooks_for_mode("ea".parse().unwrap(), &model).unwrap();
        let cfg = SessionConfig {
            reset_per_trial: true,
            ..SessionConfig::default()
        };
        let (reset, _) = session(&model, task, hooks.clone(), cfg).run(&set).unwrap();
        let mut second = set.clone();
        second.trials.remove(0);
        let (alone, _) = session(&model, task, hooks, SessionConfig::default()).run(&second).unwrap();
        for (a, b) in reset[61..].iter().zip(&alone) {
            assert_eq!(a.probabilities, b.probabilities);
        }
    }

    #[test]
    fn stall_misses_one_deadline() {
        let (set, model, task) = setup(1);
        let cfg = SessionConfig {
            stall: Some(Stall { tick: 5, ms: 100.0 }),
            max_events: Some(10),
            ..SessionConfig::default()
        };
        let (events, summary) = session(&model, task, vec![], cfg).run(&set).unwrap();
        let missed: Vec<u64> = events.iter().filter(|e| !e.deadline_met).map(|e| e.tick).collect();
        assert_eq!(missed, vec![5]);
        assert_eq!(summary.deadline_misses, 1);
    }

    #[test]
    fn latency_stats() {
        let (set, model, task) = setup(1);
        let mut s = session(&model, task, vec![], SessionConfig::default());
        assert!(matches!(measure_latency(&mut s, &set, 0, 0), Err(StreamError::EmptyStats(_))));
        let st = measure_latency(&mut s, &set, 20, 2).unwrap();
        assert_eq!(st.count, 20);
        assert!(st.mean <= st.max && st.p95 <= st.max && st.p95 < 62.5);
        let mut c =
            StreamSession::new(task, 128.0, 8, Decoder::Constant(vec![0.5, 0.5]), vec![], SessionConfig::default())
                .unwrap();
        assert!(measure_latency(&mut c, &set, 50, 5).unwrap().p95 < 1.0);
        let p = LatencyStats::from_samples(&(1..=100).map(f64::from).collect::<Vec<_>>()).unwrap();
        assert_eq!((p.p95, p.max, p.mean), (95.0, 100.0, 50.5));
    }

    #[test]
    fn rejects_mismatched_geometry() {
        let (mut set, model, task) = setup(1);
        let other = OnlineTaskSpec::new(1.0, 8.0, None).unwrap();
        assert!(StreamSession::new(other, 128.0, 8, Decoder::Model(Box::new(model.clone())), vec![], SessionConfig::default()).is_err());
        let bad_order = vec![
            Hook::AdaBn(AdaBnState::from_model(&model, 0.001).unwrap()),
            Hook::Align(AlignmentReference::empty(crate::adapt::AlignMethod::Euclidean)),
        ];
        assert!(StreamSession::new(task, 128.0, 8, Decoder::Model(Box::new(model.clone())), bad_order, SessionConfig::default()).is_err());
        set.trials[0].data = set.trials[0].data.columns(0, 601).unwrap();
        let mut s = session(&model, task, vec![], SessionConfig::default());
        assert!(matches!(s.run(&set), Err(StreamError::Config(_))));
    }
}
