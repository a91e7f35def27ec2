//! Butterworth band-pass design and zero-phase filtering.

use std::f64::consts::PI;

use num_complex::Complex64;

use super::DataError;
use crate::linalg::Matrix;

/// Order of the analog low-pass prototype used for every band-pass.
pub const BANDPASS_ORDER: usize = 4;

/// One second-order section, `a[0] = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    fn response(&self, z_inv: Complex64) -> Complex64 {
        let z2 = z_inv * z_inv;
        (self.b[0] + self.b[1] * z_inv + self.b[2] * z2) / (self.a[0] + self.a[1] * z_inv + self.a[2] * z2)
    }

    fn dc_gain(&self) -> f64 {
        self.b.iter().sum::<f64>() / self.a.iter().sum::<f64>()
    }
}

/// Cascade of second-order sections.
#[derive(Debug, Clone, PartialEq)]
pub struct SosFilter {
    pub sections: Vec<Biquad>,
}

impl SosFilter {
    /// Complex frequency response at `freq` Hz.
    pub fn response(&self, freq: f64, fs: f64) -> Complex64 {
        let z_inv = Complex64::from_polar(1.0, -2.0 * PI * freq / fs);
        self.sections
            .iter()
            .fold(Complex64::new(1.0, 0.0), |acc, s| acc * s.response(z_inv))
    }

    /// Direct-form II transposed filtering of `x` in place, starting from
    /// the per-section states `zi`.
    fn run(&self, x: &mut [f64], mut zi: Vec<[f64; 2]>) {
        for (sec, z) in self.sections.iter().zip(zi.iter_mut()) {
            let [b0, b1, b2] = sec.b;
            let [_, a1, a2] = sec.a;
            let (mut z1, mut z2) = (z[0], z[1]);
            for v in x.iter_mut() {
                let input = *v;
                let y = b0 * input + z1;
                z1 = b1 * input - a1 * y + z2;
                z2 = b2 * input - a2 * y;
                *v = y;
            }
        }
    }

    /// Section states that make the cascade start in steady state for a
    /// constant input of level `level`.
    fn steady_state(&self, level: f64) -> Vec<[f64; 2]> {
        let mut input = level;
        self.sections
            .iter()
            .map(|sec| {
                let out = sec.dc_gain() * input;
                let z1 = out - sec.b[0] * input;
                let z2 = sec.b[2] * input - sec.a[2] * out;
                input = out;
                [z1, z2]
            })
            .collect()
    }

    /// Forward-backward (zero-phase) filtering of one signal with odd
    /// extension at both ends.
    pub fn filtfilt(&self, x: &[f64], padlen: usize) -> Vec<f64> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let pad = padlen.min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        for i in (1..=pad).rev() {
            ext.push(2.0 * x[0] - x[i]);
        }
        ext.extend_from_slice(x);
        for i in 1..=pad {
            ext.push(2.0 * x[n - 1] - x[n - 1 - i]);
        }
        let zi = self.steady_state(ext[0]);
        self.run(&mut ext, zi);
        ext.reverse();
        let zi = self.steady_state(ext[0]);
        self.run(&mut ext, zi);
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }
}

/// Designs a Butterworth band-pass from an `order`-pole low-pass prototype
/// via the low-pass → band-pass transform and the prewarped bilinear map.
pub fn butter_bandpass(order: usize, low: f64, high: f64, fs: f64) -> Result<SosFilter, DataError> {
    if order == 0 {
        return Err(DataError::Domain("filter order must be positive".into()));
    }
    if !(low > 0.0 && low < high && high < fs / 2.0) {
        return Err(DataError::Domain(format!(
            "band {low}-{high} Hz must satisfy 0 < low < high < {} Hz (Nyquist)",
            fs / 2.0
        )));
    }
    let warp = |f: f64| 2.0 * fs * (PI * f / fs).tan();
    let (wl, wh) = (warp(low), warp(high));
    let w0 = (wl * wh).sqrt();
    let bw = wh - wl;
    let k = 2.0 * fs;

    let bilinear = |s: Complex64| (k + s) / (k - s);
    let mut sections = Vec::with_capacity(order);
    let mut real_poles = Vec::new();
    for i in 0..order {
        let theta = PI * (2 * i + order + 1) as f64 / (2 * order) as f64;
        let proto = Complex64::from_polar(1.0, theta);
        if proto.im < -1e-12 {
            // the conjugate prototype pole produces the conjugate pair
            continue;
        }
        let pb = proto * bw;
        let disc = (pb * pb - 4.0 * w0 * w0).sqrt();
        let analog = [(pb + disc) / 2.0, (pb - disc) / 2.0];
        if proto.im.abs() <= 1e-12 {
            let z = analog.map(bilinear);
            if z[0].im.abs() > 1e-12 {
                sections.push(conjugate_section(z[0]));
            } else {
                real_poles.extend([z[0].re, z[1].re]);
            }
        } else {
            for s in analog {
                sections.push(conjugate_section(bilinear(s)));
            }
        }
    }
    for pair in real_poles.chunks(2) {
        let (p1, p2) = (pair[0], pair.get(1).copied().unwrap_or(0.0));
        sections.push(Biquad {
            b: [1.0, 0.0, -1.0],
            a: [1.0, -(p1 + p2), p1 * p2],
        });
    }

    let mut filter = SosFilter { sections };
    let center = fs / PI * (w0 / k).atan();
    let gain = 1.0 / filter.response(center, fs).norm();
    let per_section = gain.powf(1.0 / filter.sections.len() as f64);
    for s in &mut filter.sections {
        for b in &mut s.b {
            *b *= per_section;
        }
    }
    Ok(filter)
}

fn conjugate_section(z: Complex64) -> Biquad {
    Biquad {
        b: [1.0, 0.0, -1.0],
        a: [1.0, -2.0 * z.re, z.norm_sqr()],
    }
}

/// Padding applied on each side before forward-backward filtering: three
/// periods of the lower band edge.
fn default_padlen(fs: f64, low: f64) -> usize {
    (3.0 * fs / low).ceil() as usize
}

/// Zero-phase Butterworth band-pass of every channel (row) of `x`.
pub fn bandpass(x: &Matrix, fs: f64, low: f64, high: f64) -> Result<Matrix, DataError> {
    let filter = butter_bandpass(BANDPASS_ORDER, low, high, fs)?;
    let padlen = default_padlen(fs, low);
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let y = filter.filtfilt(x.row(r), padlen);
        out.row_mut(r).copy_from_slice(&y);
    }
    Ok(out)
}
