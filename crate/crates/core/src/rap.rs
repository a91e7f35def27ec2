//! Real-time adaptive pooling (RAP): re-planning a CNN's pooling stages from
//! the requirements of an online decoding task.
//!
//! The first `P − 1` pooling layers downsample the input from `f_s` to an
//! intermediate rate `f_inter` (kernel = stride). The last pooling layer
//! slides a window of `f_inter · T_w` positions with stride `f_inter / f_u`,
//! so a whole trial is decoded jointly into one prediction per sliding
//! window while a single window still maps to exactly one output.

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

const INTEGRAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum RapError {
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("incompatible task: {reason}{}", suggestion_text(.suggested_update_frequency))]
    IncompatibleTask {
        reason: String,
        suggested_update_frequency: Option<f64>,
    },
    #[error("window index {index} out of range (task has {count} windows)")]
    WindowIndex { index: usize, count: usize },
}

fn suggestion_text(s: &Option<f64>) -> String {
    match s {
        Some(f) => format!("; smallest compatible update frequency is {f} Hz"),
        None => String::new(),
    }
}

/// Returns `Some(n)` when `x` is (within rounding) the positive integer `n`.
pub(crate) fn as_count(x: f64) -> Option<usize> {
    let r = x.round();
    if r >= 1.0 && (x - r).abs() <= INTEGRAL_TOL * r.max(1.0) {
        Some(r as usize)
    } else {
        None
    }
}

/// Window length, update frequency and (optionally) trial length of an
/// online decoding task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OnlineTaskSpec {
    /// Seconds.
    pub window_length: f64,
    /// Hz.
    pub update_frequency: f64,
    /// Seconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trial_length: Option<f64>,
}

impl OnlineTaskSpec {
    pub fn new(window_length: f64, update_frequency: f64, trial_length: Option<f64>) -> Result<Self, RapError> {
        let task = Self {
            window_length,
            update_frequency,
            trial_length,
        };
        task.validate()?;
        Ok(task)
    }

    /// 1 s windows at 16 Hz over a 4.75 s trial.
    pub fn dreyer() -> Self {
        Self {
            window_length: 1.0,
            update_frequency: 16.0,
            trial_length: Some(4.75),
        }
    }

    /// 1 s windows at 16 Hz over a 3.75 s trial.
    pub fn lee() -> Self {
        Self {
            window_length: 1.0,
            update_frequency: 16.0,
            trial_length: Some(3.75),
        }
    }

    pub fn validate(&self) -> Result<(), RapError> {
        if !(self.window_length > 0.0 && self.window_length.is_finite()) {
            return Err(RapError::InvalidTask(format!(
                "window length must be positive, got {}",
                self.window_length
            )));
        }
        if !(self.update_frequency > 0.0 && self.update_frequency.is_finite()) {
            return Err(RapError::InvalidTask(format!(
                "update frequency must be positive, got {}",
                self.update_frequency
            )));
        }
        if let Some(t) = self.trial_length {
            if !(t >= self.window_length - INTEGRAL_TOL) {
                return Err(RapError::InvalidTask(format!(
                    "trial length {t} s is shorter than the window length {} s",
                    self.window_length
                )));
            }
        }
        Ok(())
    }

    /// Deadline for decoding one window, in milliseconds.
    pub fn deadline_ms(&self) -> f64 {
        1000.0 / self.update_frequency
    }

    fn trial_length_required(&self) -> Result<f64, RapError> {
        self.trial_length
            .ok_or_else(|| RapError::InvalidTask("trial length is required".into()))
    }
}

/// Pooling kernel/stride layout derived from an [`OnlineTaskSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RapPlan {
    pub kernel_sizes: Vec<usize>,
    pub strides: Vec<usize>,
    pub intermediate_frequency: f64,
    pub sampling_frequency: f64,
    pub window_length: f64,
    pub update_frequency: f64,
}

impl RapPlan {
    pub fn pooling_layer_count(&self) -> usize {
        self.kernel_sizes.len()
    }

    pub fn downsampling_kernels(&self) -> &[usize] {
        &self.kernel_sizes[..self.kernel_sizes.len() - 1]
    }

    /// Product of the downsampling kernels, `f_s / f_inter`.
    pub fn downsampling_factor(&self) -> usize {
        self.downsampling_kernels().iter().product()
    }

    /// `k_P`, the final pooling kernel in intermediate-rate positions.
    pub fn final_kernel(&self) -> usize {
        *self.kernel_sizes.last().expect("plan has at least one pooling layer")
    }

    /// `s_P`, the final pooling stride.
    pub fn final_stride(&self) -> usize {
        *self.strides.last().expect("plan has at least one pooling layer")
    }

    /// Samples per window at `f_s`.
    pub fn window_samples(&self) -> usize {
        self.final_kernel() * self.downsampling_factor()
    }

    /// Samples between consecutive windows at `f_s`.
    pub fn hop_samples(&self) -> usize {
        self.final_stride() * self.downsampling_factor()
    }

    /// Number of windows jointly decoded from an input of `n_samples`
    /// samples, or `None` when the length does not tile into whole hops.
    pub fn output_positions(&self, n_samples: usize) -> Option<usize> {
        let w = self.window_samples();
        let hop = self.hop_samples();
        if n_samples < w || !(n_samples - w).is_multiple_of(hop) {
            return None;
        }
        Some((n_samples - w) / hop + 1)
    }

    pub fn task(&self, trial_length: Option<f64>) -> OnlineTaskSpec {
        OnlineTaskSpec {
            window_length: self.window_length,
            update_frequency: self.update_frequency,
            trial_length,
        }
    }

    /// Checks every structural invariant of the plan.
    pub fn validate(&self) -> Result<(), RapError> {
        let p = self.kernel_sizes.len();
        let bad = |reason: String| RapError::IncompatibleTask {
            reason,
            suggested_update_frequency: None,
        };
        if p == 0 || self.strides.len() != p {
            return Err(bad("kernel and stride lists must be non-empty and equal length".into()));
        }
        if self.kernel_sizes.iter().chain(&self.strides).any(|&v| v == 0) {
            return Err(bad("pooling kernels and strides must be positive".into()));
        }
        if self.kernel_sizes[..p - 1] != self.strides[..p - 1] {
            return Err(bad("downsampling layers need kernel == stride".into()));
        }
        let f_inter = self.sampling_frequency / self.downsampling_factor() as f64;
        if (f_inter - self.intermediate_frequency).abs() > INTEGRAL_TOL * f_inter {
            return Err(bad(format!(
                "intermediate frequency {} does not match f_s / prod(k) = {f_inter}",
                self.intermediate_frequency
            )));
        }
        let expect = plan_rap(
            self.sampling_frequency,
            self.downsampling_kernels(),
            &self.task(None),
        )?;
        if expect.final_kernel() != self.final_kernel() || expect.final_stride() != self.final_stride() {
            return Err(bad(format!(
                "final pooling ({}, {}) does not match the task ({}, {})",
                self.final_kernel(),
                self.final_stride(),
                expect.final_kernel(),
                expect.final_stride()
            )));
        }
        Ok(())
    }

    /// Compact JSON form `{"k": [...], "s": [...], "f_inter": ...}`.
    pub fn summary_json(&self) -> serde_json::Value {
        json!({
            "k": self.kernel_sizes,
            "s": self.strides,
            "f_inter": number_json(self.intermediate_frequency),
        })
    }
}

/// Emits integral floats as JSON integers.
pub(crate) fn number_json(x: f64) -> serde_json::Value {
    if x.fract() == 0.0 && x.abs() < 9.0e15 {
        json!(x as i64)
    } else {
        json!(x)
    }
}

/// Plans the pooling layers for `task` given the sampling rate and the
/// caller-chosen downsampling kernels (`P − 1` of them, possibly none).
pub fn plan_rap(sampling_frequency: f64, downsampling_kernels: &[usize], task: &OnlineTaskSpec) -> Result<RapPlan, RapError> {
    task.validate()?;
    if !(sampling_frequency > 0.0 && sampling_frequency.is_finite()) {
        return Err(RapError::InvalidTask(format!(
            "sampling frequency must be positive, got {sampling_frequency}"
        )));
    }
    if downsampling_kernels.contains(&0) {
        return Err(RapError::InvalidTask("downsampling kernels must be positive".into()));
    }
    let product: usize = downsampling_kernels.iter().product();
    let f_inter = sampling_frequency / product as f64;
    let f_u = task.update_frequency;

    let ratio = f_inter / f_u;
    let Some(stride) = as_count(ratio) else {
        let multiples = (ratio + INTEGRAL_TOL).floor();
        let suggested = (multiples >= 1.0).then(|| f_inter / multiples);
        return Err(RapError::IncompatibleTask {
            reason: format!(
                "intermediate frequency {f_inter} Hz is not an integer multiple of the update frequency {f_u} Hz"
            ),
            suggested_update_frequency: suggested,
        });
    };
    let Some(kernel) = as_count(f_inter * task.window_length) else {
        return Err(RapError::IncompatibleTask {
            reason: format!(
                "final kernel f_inter * T_w = {} is not a positive integer",
                f_inter * task.window_length
            ),
            suggested_update_frequency: None,
        });
    };

    let mut kernel_sizes = downsampling_kernels.to_vec();
    let mut strides = downsampling_kernels.to_vec();
    kernel_sizes.push(kernel);
    strides.push(stride);
    Ok(RapPlan {
        kernel_sizes,
        strides,
        intermediate_frequency: f_inter,
        sampling_frequency,
        window_length: task.window_length,
        update_frequency: f_u,
    })
}

/// `N_w = (T_t − T_w) · f_u + 1`, flooring a trailing partial hop.
pub fn windows_per_trial(task: &OnlineTaskSpec) -> Result<usize, RapError> {
    task.validate()?;
    let t_t = task.trial_length_required()?;
    let hops = ((t_t - task.window_length) * task.update_frequency + INTEGRAL_TOL).floor();
    Ok(hops.max(0.0) as usize + 1)
}

/// Training-time saving of joint decoding, `(T_w / T_t) · N_w`.
pub fn computational_gain(task: &OnlineTaskSpec) -> Result<f64, RapError> {
    let n_w = windows_per_trial(task)?;
    let t_t = task.trial_length_required()?;
    Ok(task.window_length / t_t * n_w as f64)
}

/// Half-open sample range `[start, end)` of window `j` within a trial.
pub fn window_sample_range(j: usize, task: &OnlineTaskSpec, sampling_frequency: f64) -> Result<(usize, usize), RapError> {
    let count = windows_per_trial(task)?;
    if j >= count {
        return Err(RapError::WindowIndex { index: j, count });
    }
    let hop = as_count(sampling_frequency / task.update_frequency).ok_or_else(|| {
        RapError::IncompatibleTask {
            reason: format!(
                "sampling frequency {sampling_frequency} Hz is not a multiple of the update frequency {} Hz",
                task.update_frequency
            ),
            suggested_update_frequency: None,
        }
    })?;
    let len = as_count(task.window_length * sampling_frequency).ok_or_else(|| {
        RapError::InvalidTask("window length does not span a whole number of samples".into())
    })?;
    let start = j * hop;
    Ok((start, start + len))
}

/// Gain surface over a grid of trial and window lengths at a fixed update
/// frequency; cells with `T_w > T_t` are `None`.
pub fn gain_surface(trial_lengths: &[f64], window_lengths: &[f64], update_frequency: f64) -> Vec<Vec<Option<f64>>> {
    trial_lengths
        .iter()
        .map(|&t_t| {
            window_lengths
                .iter()
                .map(|&t_w| {
                    OnlineTaskSpec::new(t_w, update_frequency, Some(t_t))
                        .ok()
                        .and_then(|task| computational_gain(&task).ok())
                })
                .collect()
        })
        .collect()
}
