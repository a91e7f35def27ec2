use serde::{Deserialize, Serialize};

use super::{DataError, Trial};
use crate::linalg::Matrix;

/// Event marker in a continuous recording.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Marker {
    pub sample: usize,
    pub label: usize,
}

/// `floor(x + 0.5)`, independent of the platform's rounding mode.
pub fn round_half_up(x: f64) -> i64 {
    (x + 0.5).floor() as i64
}

/// Cuts one trial per marker, starting `start_offset` seconds after the
/// marker and lasting `trial_length` seconds.
pub fn extract_epochs(
    continuous: &Matrix,
    markers: &[Marker],
    start_offset: f64,
    trial_length: f64,
    fs: f64,
) -> Result<Vec<Trial>, DataError> {
    if !(trial_length > 0.0) || !(fs > 0.0) {
        return Err(DataError::Domain(format!(
            "trial length ({trial_length} s) and sampling rate ({fs} Hz) must be positive"
        )));
    }
    let offset = round_half_up(start_offset * fs);
    let len = round_half_up(trial_length * fs);
    let n = continuous.cols();
    markers
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let start = m.sample as i64 + offset;
            let end = start + len;
            if start < 0 || end > n as i64 {
                return Err(DataError::OutOfRange {
                    marker: i,
                    sample: m.sample,
                    start,
                    end,
                    n_samples: n,
                });
            }
            Ok(Trial {
                data: continuous.columns(start as usize, end as usize)?,
                label: m.label,
                trial_length,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn dreyer_epoch_bounds() {
        let x = Matrix::from_fn(2, 2048, |r, c| (r * 10_000 + c) as f64);
        let trials = extract_epochs(&x, &[Marker { sample: 0, label: 1 }], 3.25, 4.75, 256.0).unwrap();
        let t = &trials[0];
        assert_eq!(t.n_samples(), 1216);
        assert_eq!(t.data[(0, 0)], 832.0);
        assert_eq!(t.data[(1, 1215)], 10_000.0 + 2047.0);
        assert_eq!(t.label, 1);
    }

    #[test]
    fn identity_slice() {
        let x = Matrix::from_fn(3, 512, |r, c| (r + c) as f64);
        let trials = extract_epochs(&x, &[Marker { sample: 0, label: 0 }], 0.0, 2.0, 256.0).unwrap();
        assert_eq!(trials[0].data, x);
    }

    #[test]
    fn marker_too_close_to_end() {
        let x = Matrix::zeros(1, 1000);
        let markers = [Marker { sample: 0, label: 0 }, Marker { sample: 900, label: 1 }];
        match extract_epochs(&x, &markers, 0.0, 1.0, 256.0) {
            Err(DataError::OutOfRange { marker, sample, .. }) => {
                assert_eq!((marker, sample), (1, 900));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn half_up_rounding() {
        assert_eq!(round_half_up(2.5), 3);
        assert_eq!(round_half_up(3.5), 4);
        assert_eq!(round_half_up(-0.5), 0);
    }

    proptest! {
        #[test]
        fn never_slices_outside_bounds(
            n in 50usize..600,
            samples in prop::collection::vec(0usize..700, 1..6),
            offset in -1.0f64..1.0,
            length in 0.05f64..2.0,
        ) {
            let x = Matrix::from_fn(2, n, |r, c| (r * n + c) as f64);
            let markers: Vec<Marker> = samples.iter().map(|&s| Marker { sample: s, label: 0 }).collect();
            match extract_epochs(&x, &markers, offset, length, 100.0) {
                Ok(trials) => {
                    for (t, m) in trials.iter().zip(&markers) {
                        let start = m.sample as i64 + round_half_up(offset * 100.0);
                        prop_assert!(start >= 0);
                        prop_assert!(start as usize + t.n_samples() <= n);
                        prop_assert_eq!(t.data[(1, 0)], (n + start as usize) as f64);
                    }
                }
                Err(DataError::OutOfRange { start, end, .. }) => {
                    prop_assert!(start < 0 || end > n as i64);
                }
                Err(e) => prop_assert!(false, "unexpected error {e}"),
            }
        }
    }
}
