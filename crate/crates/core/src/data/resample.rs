//! Rational polyphase downsampling with a Kaiser-windowed sinc anti-alias
//! filter.

use std::f64::consts::PI;

use super::DataError;
use crate::linalg::Matrix;

/// Anti-alias cutoff as a fraction of the target rate.
pub const CUTOFF_FRACTION: f64 = 0.45;
const KAISER_BETA: f64 = 8.0;
/// Half filter length in upsampled taps per unit of `max(up, down)`.
const HALF_LENGTH_FACTOR: usize = 20;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Modified Bessel function of the first kind, order zero (power series).
fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= (half / k as f64).powi(2);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Reduced up/down factors for an integer-rate conversion.
pub fn rational_factors(from: f64, to: f64) -> Result<(usize, usize), DataError> {
    let as_int = |f: f64| -> Result<u64, DataError> {
        if f > 0.0 && f.fract() == 0.0 && f < 1e12 {
            Ok(f as u64)
        } else {
            Err(DataError::Domain(format!(
                "resampling needs positive integer rates, got {f} Hz"
            )))
        }
    };
    let (f, t) = (as_int(from)?, as_int(to)?);
    let g = gcd(f, t);
    Ok(((t / g) as usize, (f / g) as usize))
}

/// Polyphase resampler for a fixed `up/down` ratio.
///
/// Each phase's taps are normalized to unit sum, so constant signals pass
/// through exactly; the signal is extended with its edge values.
#[derive(Debug, Clone)]
pub struct Resampler {
    up: usize,
    down: usize,
    /// Per phase: offset of the first input sample relative to `t / up` and
    /// its taps.
    phases: Vec<(isize, Vec<f64>)>,
}

impl Resampler {
    pub fn new(up: usize, down: usize) -> Self {
        let half = (HALF_LENGTH_FACTOR * up.max(down)) as isize;
        let fc = CUTOFF_FRACTION / down as f64; // cycles per upsampled tap
        let denom = bessel_i0(KAISER_BETA);
        let tap = |m: isize| -> f64 {
            let r = m as f64 / half as f64;
            let window = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / denom;
            let arg = 2.0 * fc * m as f64;
            let sinc = if m == 0 { 1.0 } else { (PI * arg).sin() / (PI * arg) };
            sinc * window
        };
        let up_i = up as isize;
        let phases = (0..up_i)
            .map(|phase| {
                // input index i = q + r contributes h[phase - r * up]
                let r_min = (phase - half).div_euclid(up_i) + isize::from((phase - half).rem_euclid(up_i) != 0);
                let r_max = (phase + half).div_euclid(up_i);
                let mut taps: Vec<f64> = (r_min..=r_max).map(|r| tap(phase - r * up_i)).collect();
                let sum: f64 = taps.iter().sum();
                taps.iter_mut().for_each(|t| *t /= sum);
                (r_min, taps)
            })
            .collect();
        Self { up, down, phases }
    }

    pub fn output_len(&self, input_len: usize) -> usize {
        ((input_len * self.up) as f64 / self.down as f64).round() as usize
    }

    pub fn process(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len() as isize;
        if n == 0 {
            return Vec::new();
        }
        let out_len = self.output_len(x.len());
        let up = self.up as isize;
        (0..out_len)
            .map(|k| {
                let t = (k * self.down) as isize;
                let q = t.div_euclid(up);
                let (r_min, taps) = &self.phases[t.rem_euclid(up) as usize];
                taps.iter()
                    .enumerate()
                    .map(|(j, w)| w * x[(q + r_min + j as isize).clamp(0, n - 1) as usize])
                    .sum()
            })
            .collect()
    }
}

/// Downsamples every channel of `x` from `from` Hz to `to` Hz.
pub fn resample(x: &Matrix, from: f64, to: f64) -> Result<Matrix, DataError> {
    if !(to > 0.0) {
        return Err(DataError::Domain(format!("target rate must be positive, got {to}")));
    }
    if to > from {
        return Err(DataError::Unsupported(format!(
            "upsampling from {from} Hz to {to} Hz"
        )));
    }
    let (up, down) = rational_factors(from, to)?;
    if up == down {
        return Ok(x.clone());
    }
    let rs = Resampler::new(up, down);
    let cols = rs.output_len(x.cols());
    let mut out = Matrix::zeros(x.rows(), cols);
    for r in 0..x.rows() {
        out.row_mut(r).copy_from_slice(&rs.process(x.row(r)));
    }
    Ok(out)
}
