//! Synthetic motor-imagery cohort.
//!
//! Every channel carries a 10-12 Hz rhythm over pink background noise. On the
//! two lateral channels the rhythm amplitude depends on the class: class 0
//! attenuates C4, class 1 attenuates C3. Non-lateral channels carry the same
//! rhythm at the class-averaged power, so the source covariance is isotropic
//! in expectation and a subject's mixing matrix is its only spatial
//! signature. Each subject mixes its sources through an SPD matrix; online
//! data passes through a second, session-specific SPD matrix.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{bandpass, round_half_up, Cohort, DataError, RecordingSpec, Role, Trial, TrialSet};
use crate::linalg::{sym_exp, Matrix};

/// Names of the class-informative channels, always the first two.
pub const LATERAL_CHANNELS: [&str; 2] = ["C3", "C4"];
const EXTRA_CHANNELS: [&str; 25] = [
    "Cz", "FC3", "FC4", "CP3", "CP4", "C1", "C2", "C5", "C6", "FCz", "CPz", "FC1", "FC2", "CP1", "CP2", "FC5",
    "FC6", "CP5", "CP6", "Fz", "Pz", "F3", "F4", "P3", "P4",
];
const RHYTHM_BAND: (f64, f64) = (10.0, 12.0);
const RHYTHM_COMPONENTS: usize = 3;
/// Attenuation of the contralateral rhythm at full separability.
const MAX_ATTENUATION: f64 = 0.8;
const AMPLITUDE_JITTER: f64 = 0.2;
const PINK_GAIN: f64 = 0.11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub subject_count: usize,
    pub trials_per_subject: usize,
    pub class_separability: f64,
    pub subject_shift_scale: f64,
    pub session_shift_scale: f64,
    pub rng_seed: u64,
    pub channel_count: usize,
    pub sampling_frequency: f64,
    /// Seconds.
    pub trial_length: f64,
    /// Share of each subject's trials assigned to the offline role.
    pub offline_fraction: f64,
    /// Rhythm amplitude relative to the pink noise.
    pub rhythm_amplitude: f64,
    pub band: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            subject_count: 8,
            trials_per_subject: 60,
            class_separability: 1.0,
            subject_shift_scale: 0.0,
            session_shift_scale: 0.0,
            rng_seed: 0,
            channel_count: 8,
            sampling_frequency: 128.0,
            trial_length: 4.75,
            offline_fraction: 0.5,
            rhythm_amplitude: 1.0,
            band: (5.0, 35.0),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |m: String| Err(DataError::Config(m));
        if self.subject_count == 0 || self.trials_per_subject == 0 {
            return fail("subject and trial counts must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.class_separability) {
            return fail(format!("class separability {} outside [0, 1]", self.class_separability));
        }
        if !(self.subject_shift_scale >= 0.0 && self.session_shift_scale >= 0.0) {
            return fail("shift scales must be non-negative".into());
        }
        if self.channel_count < 2 || self.channel_count > 2 + EXTRA_CHANNELS.len() {
            return fail(format!(
                "channel count must be in 2..={}, got {}",
                2 + EXTRA_CHANNELS.len(),
                self.channel_count
            ));
        }
        if !(0.0..=1.0).contains(&self.offline_fraction) {
            return fail(format!("offline fraction {} outside [0, 1]", self.offline_fraction));
        }
        if !(self.trial_length > 0.0 && self.rhythm_amplitude >= 0.0) {
            return fail("trial length must be positive and rhythm amplitude non-negative".into());
        }
        if !(self.band.1 < self.sampling_frequency / 2.0 && RHYTHM_BAND.1 < self.sampling_frequency / 2.0) {
            return fail(format!(
                "sampling frequency {} Hz too low for the {}-{} Hz band",
                self.sampling_frequency, self.band.0, self.band.1
            ));
        }
        Ok(())
    }

    pub fn channel_names(&self) -> Vec<String> {
        LATERAL_CHANNELS
            .iter()
            .chain(EXTRA_CHANNELS.iter())
            .take(self.channel_count)
            .map(|s| s.to_string())
            .collect()
    }

    pub fn trial_samples(&self) -> usize {
        round_half_up(self.trial_length * self.sampling_frequency) as usize
    }
}

/// One generated subject with its ground-truth mixing.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSubject {
    pub offline: TrialSet,
    pub online: TrialSet,
    pub subject_mixing: Matrix,
    pub session_mixing: Matrix,
}

impl SynthSubject {
    pub fn subject_id(&self) -> &str {
        &self.offline.subject_id
    }
}

/// `exp(scale·S)` for a random symmetric `S` normalized to unit RMS
/// eigenvalue; the identity when `scale` is 0.
fn random_spd_mixing(c: usize, scale: f64, rng: &mut ChaCha8Rng) -> Result<Matrix, DataError> {
    let g = Matrix::from_fn(c, c, |_, _| rng.sample::<f64, _>(StandardNormal));
    let s = g.add(&g.transpose())?.scale(0.5);
    let rms = s.frobenius_norm() / (c as f64).sqrt();
    Ok(sym_exp(&s.scale(scale / rms))?.into_matrix())
}

fn pink_noise(n: usize, burn_in: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut b = [0.0f64; 7];
    let mut out = Vec::with_capacity(n);
    for i in 0..burn_in + n {
        let white: f64 = rng.sample(StandardNormal);
        b[0] = 0.99886 * b[0] + white * 0.0555179;
        b[1] = 0.99332 * b[1] + white * 0.0750759;
        b[2] = 0.96900 * b[2] + white * 0.1538520;
        b[3] = 0.86650 * b[3] + white * 0.3104856;
        b[4] = 0.55000 * b[4] + white * 0.5329522;
        b[5] = -0.7616 * b[5] - white * 0.0168980;
        let pink = b[..6].iter().sum::<f64>() + b[6] + white * 0.5362;
        b[6] = white * 0.115926;
        if i >= burn_in {
            out.push(pink * PINK_GAIN);
        }
    }
    out
}

fn rhythm(n: usize, fs: f64, amplitude: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let comps: Vec<(f64, f64)> = (0..RHYTHM_COMPONENTS)
        .map(|_| (rng.random_range(RHYTHM_BAND.0..RHYTHM_BAND.1), rng.random_range(0.0..2.0 * PI)))
        .collect();
    (0..n)
        .map(|t| {
            let time = t as f64 / fs;
            amplitude * comps.iter().map(|(f, p)| (2.0 * PI * f * time + p).sin()).sum::<f64>()
        })
        .collect()
}

/// Unmixed sources for one trial, channels × samples.
fn trial_sources(cfg: &SynthConfig, label: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = cfg.trial_samples();
    let fs = cfg.sampling_frequency;
    let attenuated = 1.0 - MAX_ATTENUATION * cfg.class_separability;
    let neutral = ((1.0 + attenuated * attenuated) / 2.0).sqrt();
    let jitter = Normal::new(0.0, AMPLITUDE_JITTER).expect("valid jitter");
    let burn_in = fs as usize;
    let mut x = Matrix::zeros(cfg.channel_count, n);
    for ch in 0..cfg.channel_count {
        let level = match (ch, label) {
            (1, 0) | (0, 1) => attenuated,
            (0, _) | (1, _) => 1.0,
            _ => neutral,
        };
        let amp = cfg.rhythm_amplitude * level * jitter.sample(rng).exp();
        let r = rhythm(n, fs, amp, rng);
        let noise = pink_noise(n, burn_in, rng);
        for (dst, (a, b)) in x.row_mut(ch).iter_mut().zip(r.iter().zip(&noise)) {
            *dst = a + b;
        }
    }
    x
}

fn generate_role(
    cfg: &SynthConfig,
    subject_id: &str,
    role: Role,
    count: usize,
    mixing: &Matrix,
    rng: &mut ChaCha8Rng,
) -> Result<TrialSet, DataError> {
    let mut labels: Vec<usize> = (0..count).map(|i| i % 2).collect();
    for i in (1..labels.len()).rev() {
        labels.swap(i, rng.random_range(0..=i));
    }
    let trials = labels
        .into_iter()
        .map(|label| {
            let mixed = mixing.matmul(&trial_sources(cfg, label, rng))?;
            let mut data = bandpass(&mixed, cfg.sampling_frequency, cfg.band.0, cfg.band.1)?;
            data.as_mut_slice().iter_mut().for_each(|v| *v = f64::from(*v as f32));
            Ok(Trial {
                data,
                label,
                trial_length: cfg.trial_length,
            })
        })
        .collect::<Result<_, DataError>>()?;
    Ok(TrialSet {
        subject_id: subject_id.to_string(),
        role,
        spec: RecordingSpec::new(cfg.sampling_frequency, cfg.channel_names())?,
        trials,
    })
}

/// Generates every subject's offline and online trial sets. Identical
/// configurations give identical samples.
pub fn generate_synth_cohort(cfg: &SynthConfig) -> Result<Vec<SynthSubject>, DataError> {
    cfg.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let seeds: Vec<u64> = (0..cfg.subject_count).map(|_| master.random()).collect();
    let n_offline = round_half_up(cfg.trials_per_subject as f64 * cfg.offline_fraction) as usize;
    let n_online = cfg.trials_per_subject - n_offline;
    seeds
        .iter()
        .enumerate()
        .map(|(i, &seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let id = format!("S{:02}", i + 1);
            let subject_mixing = random_spd_mixing(cfg.channel_count, cfg.subject_shift_scale, &mut rng)?;
            let session_mixing = random_spd_mixing(cfg.channel_count, cfg.session_shift_scale, &mut rng)?;
            let online_mixing = session_mixing.matmul(&subject_mixing)?;
            let offline = generate_role(cfg, &id, Role::Offline, n_offline, &subject_mixing, &mut rng)?;
            let online = generate_role(cfg, &id, Role::Online, n_online, &online_mixing, &mut rng)?;
            Ok(SynthSubject {
                offline,
                online,
                subject_mixing,
                session_mixing,
            })
        })
        .collect()
}

impl From<&[SynthSubject]> for Cohort {
    fn from(subjects: &[SynthSubject]) -> Self {
        let mut cohort = Cohort::new(vec!["left".into(), "right".into()]);
        for s in subjects {
            for set in [&s.offline, &s.online] {
                if !set.is_empty() {
                    cohort.insert(set.clone()).expect("generated sets share one layout");
                }
            }
        }
        cohort
    }
}

/// Log power ratio of the lateral channels in the rhythm band, one value per
/// trial.
pub(crate) fn lateral_log_ratio(set: &TrialSet) -> Result<Vec<f64>, DataError> {
    let idx: Vec<usize> = LATERAL_CHANNELS
        .iter()
        .map(|n| {
            set.spec
                .channel_index(n)
                .ok_or_else(|| DataError::Config(format!("channel {n} missing")))
        })
        .collect::<Result<_, _>>()?;
    let fs = set.spec.sampling_frequency;
    set.trials
        .iter()
        .map(|t| {
            let power = |ch: usize| -> Result<f64, DataError> {
                let row = Matrix::from_vec(1, t.n_samples(), t.data.row(ch).to_vec())?;
                let y = bandpass(&row, fs, RHYTHM_BAND.0 - 1.0, RHYTHM_BAND.1 + 1.0)?;
                Ok(y.as_slice().iter().map(|v| v * v).sum::<f64>() / t.n_samples() as f64)
            };
            Ok((power(idx[0])? / power(idx[1])?).ln())
        })
        .collect()
}

/// Accuracy of a band-power threshold on the lateral channels, with the
/// threshold placed midway between the class means of the log power ratio.
pub fn band_power_oracle(set: &TrialSet) -> Result<f64, DataError> {
    let ratio = lateral_log_ratio(set)?;
    let mean_of = |class: usize| {
        let v: Vec<f64> = ratio
            .iter()
            .zip(&set.trials)
            .filter(|(_, t)| t.label == class)
            .map(|(r, _)| *r)
            .collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    let threshold = (mean_of(0) + mean_of(1)) / 2.0;
    // class 0 attenuates C4, so its ratio C3/C4 is the larger one
    let correct = ratio
        .iter()
        .zip(&set.trials)
        .filter(|(r, t)| usize::from(**r <= threshold) == t.label)
        .count();
    Ok(correct as f64 / set.len() as f64)
}
