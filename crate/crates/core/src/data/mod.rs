//! Recordings, trials and cohorts: file ingestion, band-pass filtering,
//! resampling, epoch extraction and the synthetic cohort generator.

mod cohort;
mod eegb;
mod epochs;
mod filter;
mod resample;
mod synth;

use std::collections::HashSet;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{LinalgError, Matrix};

pub use cohort::{load_cohort, write_cohort, Cohort, CohortManifest, CohortSource, EpochWindow, FileCohort, ManifestEntry};
pub use eegb::{read_eegb, write_eegb, write_trialset, Recording, EEGB_MAGIC, EEGB_VERSION};
pub use epochs::{extract_epochs, round_half_up, Marker};
pub use filter::{bandpass, butter_bandpass, Biquad, SosFilter, BANDPASS_ORDER};
pub use resample::{rational_factors, resample, Resampler, CUTOFF_FRACTION};
pub use synth::{band_power_oracle, generate_synth_cohort, SynthConfig, SynthSubject, LATERAL_CHANNELS};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("unsupported operation: {0}")]
    Unsupported(String),
    #[error("epoch for marker {marker} (sample {sample}) spans [{start}, {end}) outside a recording of {n_samples} samples")]
    OutOfRange {
        marker: usize,
        sample: usize,
        start: i64,
        end: i64,
        n_samples: usize,
    },
    #[error("{}: parse error at byte {offset}: {message}", .file.display())]
    Parse {
        file: PathBuf,
        offset: u64,
        message: String,
    },
    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Offline (calibration/training) or online (feedback/test) data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Offline,
    Online,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Offline => "offline",
            Role::Online => "online",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingSpec {
    pub sampling_frequency: f64,
    pub channel_names: Vec<String>,
}

impl RecordingSpec {
    pub fn new(sampling_frequency: f64, channel_names: Vec<String>) -> Result<Self, DataError> {
        let spec = Self {
            sampling_frequency,
            channel_names,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if !(self.sampling_frequency > 0.0 && self.sampling_frequency.is_finite()) {
            return Err(DataError::Config(format!(
                "sampling frequency must be positive, got {}",
                self.sampling_frequency
            )));
        }
        let mut seen = HashSet::new();
        for name in &self.channel_names {
            if !seen.insert(name) {
                return Err(DataError::Config(format!("duplicate channel name {name:?}")));
            }
        }
        Ok(())
    }

    pub fn channel_count(&self) -> usize {
        self.channel_names.len()
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channel_names.iter().position(|n| n == name)
    }
}

/// One labeled epoch, channels × samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub data: Matrix,
    pub label: usize,
    /// Seconds.
    pub trial_length: f64,
}

impl Trial {
    pub fn n_samples(&self) -> usize {
        self.data.cols()
    }
}

/// Trials of one subject and role, sharing a recording layout.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialSet {
    pub subject_id: String,
    pub role: Role,
    pub spec: RecordingSpec,
    pub trials: Vec<Trial>,
}

impl TrialSet {
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.trials.iter().map(|t| t.label).collect()
    }

    /// Applies a channels × samples transform to every trial.
    pub fn map_data(&self, mut f: impl FnMut(&Matrix) -> Result<Matrix, DataError>) -> Result<Self, DataError> {
        let trials = self
            .trials
            .iter()
            .map(|t| {
                Ok(Trial {
                    data: f(&t.data)?,
                    label: t.label,
                    trial_length: t.trial_length,
                })
            })
            .collect::<Result<_, DataError>>()?;
        Ok(Self {
            subject_id: self.subject_id.clone(),
            role: self.role,
            spec: self.spec.clone(),
            trials,
        })
    }
}
