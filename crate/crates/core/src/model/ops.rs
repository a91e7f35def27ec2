//! Slice kernels shared by the forward and backward passes. Signals are
//! single rows; maps are stored row-major as `maps × len`.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

/// Floating-point type the network can run in.
pub trait Real: Float + FromPrimitive + Sum + Send + Sync + Debug + Default + 'static {
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Zero padding applied before a convolution of kernel `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Pad {
    pub left: usize,
    pub right: usize,
}

impl Pad {
    pub const NONE: Pad = Pad { left: 0, right: 0 };

    /// PyTorch `padding="same"`: the extra sample of an even kernel goes
    /// right.
    pub fn same(k: usize) -> Pad {
        let total = k - 1;
        Pad {
            left: total / 2,
            right: total - total / 2,
        }
    }

    pub fn out_len(self, n: usize, k: usize) -> Option<usize> {
        (n + self.left + self.right).checked_sub(k).map(|v| v + 1)
    }
}

/// Output index range `[lo, hi)` for which tap `j` reads inside the input.
fn tap_range(j: usize, pad_left: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    // input index = t + j - pad_left
    let lo = pad_left.saturating_sub(j);
    let hi = (n_in + pad_left).saturating_sub(j).min(n_out);
    (lo, hi.max(lo))
}

/// `out[t] = Σ_j w[j] · x[t + j − pad.left]`, out-of-range inputs read as 0.
pub(crate) fn conv1d<F: Real>(x: &[F], w: &[F], pad: Pad, out: &mut [F]) {
    out.iter_mut().for_each(|v| *v = F::zero());
    let n_out = out.len();
    for (j, &wj) in w.iter().enumerate() {
        let (lo, hi) = tap_range(j, pad.left, x.len(), n_out);
        let shift = j as isize - pad.left as isize;
        let src = &x[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
        for (o, &v) in out[lo..hi].iter_mut().zip(src) {
            *o = *o + wj * v;
        }
    }
}

/// Accumulates the gradients of [`conv1d`] into `dx` and `dw`.
pub(crate) fn conv1d_backward<F: Real>(x: &[F], w: &[F], pad: Pad, dout: &[F], dx: Option<&mut [F]>, dw: &mut [F]) {
    let n_out = dout.len();
    for (j, dwj) in dw.iter_mut().enumerate() {
        let (lo, hi) = tap_range(j, pad.left, x.len(), n_out);
        let shift = j as isize - pad.left as isize;
        let src = &x[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
        let mut acc = F::zero();
        for (&g, &v) in dout[lo..hi].iter().zip(src) {
            acc = acc + g * v;
        }
        *dwj = *dwj + acc;
    }
    if let Some(dx) = dx {
        for (j, &wj) in w.iter().enumerate() {
            let (lo, hi) = tap_range(j, pad.left, x.len(), n_out);
            let shift = j as isize - pad.left as isize;
            let dst = &mut dx[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
            for (d, &g) in dst.iter_mut().zip(&dout[lo..hi]) {
                *d = *d + wj * g;
            }
        }
    }
}

pub(crate) fn pool_len(n: usize, k: usize, s: usize) -> Option<usize> {
    n.checked_sub(k).map(|v| v / s + 1)
}

/// Mean pooling with kernel `k` and stride `s`, no padding.
pub(crate) fn mean_pool<F: Real>(x: &[F], k: usize, s: usize, out: &mut [F]) {
    let inv = F::one() / F::of(k as f64);
    for (i, o) in out.iter_mut().enumerate() {
        *o = x[i * s..i * s + k].iter().copied().sum::<F>() * inv;
    }
}

pub(crate) fn mean_pool_backward<F: Real>(dout: &[F], k: usize, s: usize, dx: &mut [F]) {
    let inv = F::one() / F::of(k as f64);
    for (i, &g) in dout.iter().enumerate() {
        let share = g * inv;
        for d in &mut dx[i * s..i * s + k] {
            *d = *d + share;
        }
    }
}

pub(crate) fn elu<F: Real>(x: F) -> F {
    if x > F::zero() {
        x
    } else {
        x.exp_m1()
    }
}

/// Derivative of ELU expressed through its output.
pub(crate) fn elu_grad<F: Real>(y: F) -> F {
    if y > F::zero() {
        F::one()
    } else {
        y + F::one()
    }
}

/// `out = a · b` for row-major `a` (m × k) and `b` (k × n).
pub(crate) fn matmul<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    out.iter_mut().for_each(|v| *v = F::zero());
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == F::zero() {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o = *o + aip * bv;
            }
        }
    }
}

/// `dA += dOut · bᵀ` and, when requested, `dB += aᵀ · dOut`.
pub(crate) fn matmul_backward<F: Real>(
    a: &[F],
    b: &[F],
    dout: &[F],
    m: usize,
    k: usize,
    n: usize,
    da: &mut [F],
    db: Option<&mut [F]>,
) {
    for i in 0..m {
        let g = &dout[i * n..(i + 1) * n];
        for p in 0..k {
            let mut acc = F::zero();
            for (&gv, &bv) in g.iter().zip(&b[p * n..(p + 1) * n]) {
                acc = acc + gv * bv;
            }
            da[i * k + p] = da[i * k + p] + acc;
        }
    }
    if let Some(db) = db {
        for i in 0..m {
            let g = &dout[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                for (d, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(g) {
                    *d = *d + aip * gv;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], pad: Pad) -> Vec<f64> {
        let n_out = pad.out_len(x.len(), w.len()).unwrap();
        (0..n_out)
            .map(|t| {
                (0..w.len())
                    .map(|j| {
                        let i = t as isize + j as isize - pad.left as isize;
                        if i < 0 || i >= x.len() as isize {
                            0.0
                        } else {
                            w[j] * x[i as usize]
                        }
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn conv_matches_naive() {
        let x: Vec<f64> = (0..23).map(|i| (i as f64 * 0.7).sin()).collect();
        let w = [0.3, -1.1, 0.5, 2.0];
        for pad in [Pad::NONE, Pad::same(4), Pad::same(3)] {
            let mut out = vec![0.0; pad.out_len(23, 4).unwrap()];
            conv1d(&x, &w, pad, &mut out);
            let expect = naive_conv(&x, &w, pad);
            for (a, b) in out.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_padding_keeps_length() {
        assert_eq!(Pad::same(64).out_len(256, 64), Some(256));
        assert_eq!(Pad::same(64), Pad { left: 31, right: 32 });
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> = <x, dx> and = <w, dw>
        let x: Vec<f64> = (0..17).map(|i| (i as f64 * 1.3).cos()).collect();
        let w = [0.2, 0.4, -0.9];
        let pad = Pad::same(3);
        let n_out = pad.out_len(17, 3).unwrap();
        let g: Vec<f64> = (0..n_out).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut y = vec![0.0; n_out];
        conv1d(&x, &w, pad, &mut y);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let mut dx = vec![0.0; 17];
        let mut dw = vec![0.0; 3];
        conv1d_backward(&x, &w, pad, &g, Some(&mut dx), &mut dw);
        let via_x: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        let via_w: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-12);
        assert!((lhs - via_w).abs() < 1e-12);
    }

    #[test]
    fn pooling() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
        assert_eq!(pool_len(7, 3, 2), Some(3));
        let mut out = [0.0; 3];
        mean_pool(&x, 3, 2, &mut out);
        assert_eq!(out, [2.0, 4.0, 6.0]);
        let mut dx = [0.0; 7];
        mean_pool_backward(&[3.0, 3.0, 3.0], 3, 2, &mut dx);
        assert_eq!(dx, [1.0, 1.0, 2.0, 1.0, 2.0, 1.0, 1.0]);
    }
}
