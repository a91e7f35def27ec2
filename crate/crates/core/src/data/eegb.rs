//! EEGB container: `"EEGB"`, version byte, `u32` little-endian header
//! length, UTF-8 JSON header, then `n_samples × C` little-endian `f32`
//! values in sample-major order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, Marker, RecordingSpec, TrialSet};
use crate::linalg::Matrix;

pub const EEGB_MAGIC: &[u8; 4] = b"EEGB";
pub const EEGB_VERSION: u8 = 1;
const PREAMBLE: usize = 9;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    fs: f64,
    channels: Vec<String>,
    n_samples: usize,
    markers: Vec<Marker>,
    /// Present in files written by [`write_trialset`]: every marker opens a
    /// trial of this many seconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    trial_length: Option<f64>,
}

/// A continuous multichannel recording with event markers.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub spec: RecordingSpec,
    /// Channels × samples.
    pub data: Matrix,
    pub markers: Vec<Marker>,
    pub trial_length: Option<f64>,
}

/// Byte offset of a 1-based (line, column) position.
pub(crate) fn byte_offset(text: &str, line: usize, column: usize) -> u64 {
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)) as u64
}

pub fn read_eegb(path: &Path) -> Result<Recording, DataError> {
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let err = |offset: usize, message: String| DataError::Parse {
        file: path.to_path_buf(),
        offset: offset as u64,
        message,
    };
    if bytes.len() < 4 || &bytes[..4] != EEGB_MAGIC {
        return Err(err(0, "missing EEGB magic".into()));
    }
    match bytes.get(4) {
        Some(&EEGB_VERSION) => {}
        Some(v) => return Err(err(4, format!("unsupported version {v}"))),
        None => return Err(err(4, "missing version byte".into())),
    }
    let Some(len_bytes) = bytes.get(5..PREAMBLE) else {
        return Err(err(5, "truncated header length".into()));
    };
    let header_len = u32::from_le_bytes(len_bytes.try_into().expect("4 bytes")) as usize;
    let data_start = PREAMBLE + header_len;
    let Some(header_bytes) = bytes.get(PREAMBLE..data_start) else {
        return Err(err(
            bytes.len(),
            format!("header declares {header_len} bytes but the file ends first"),
        ));
    };
    let text = std::str::from_utf8(header_bytes)
        .map_err(|e| err(PREAMBLE + e.valid_up_to(), "header is not UTF-8".into()))?;
    let header: Header = serde_json::from_str(text).map_err(|e| {
        let at = byte_offset(text, e.line(), e.column()) as usize;
        err(PREAMBLE + at, e.to_string())
    })?;
    let spec = RecordingSpec::new(header.fs, header.channels)
        .map_err(|e| err(PREAMBLE, e.to_string()))?;

    let c = spec.channel_count();
    let expected = header.n_samples * c * 4;
    let payload = &bytes[data_start..];
    if payload.len() < expected {
        return Err(err(
            bytes.len(),
            format!(
                "truncated data: header declares {} samples x {c} channels ({expected} bytes), found {} bytes",
                header.n_samples,
                payload.len()
            ),
        ));
    }
    if payload.len() > expected {
        return Err(err(
            data_start + expected,
            format!("{} trailing bytes after the data block", payload.len() - expected),
        ));
    }
    let mut data = Matrix::zeros(c, header.n_samples);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(err(data_start + 4 * i, "non-finite sample".into()));
        }
        let (sample, channel) = (i / c, i % c);
        data[(channel, sample)] = f64::from(v);
    }
    Ok(Recording {
        spec,
        data,
        markers: header.markers,
        trial_length: header.trial_length,
    })
}

/// Writes a recording; samples are stored as `f32`.
pub fn write_eegb(path: &Path, rec: &Recording) -> Result<(), DataError> {
    if rec.data.rows() != rec.spec.channel_count() {
        return Err(DataError::Config(format!(
            "data has {} rows but {} channels are named",
            rec.data.rows(),
            rec.spec.channel_count()
        )));
    }
    let header = Header {
        fs: rec.spec.sampling_frequency,
        channels: rec.spec.channel_names.clone(),
        n_samples: rec.data.cols(),
        markers: rec.markers.clone(),
        trial_length: rec.trial_length,
    };
    let json = serde_json::to_vec(&header).map_err(|e| DataError::Config(e.to_string()))?;
    let header_len = u32::try_from(json.len())
        .map_err(|_| DataError::Config("header exceeds 4 GiB".into()))?;
    let (c, n) = rec.data.shape();
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + 4 * c * n);
    out.extend_from_slice(EEGB_MAGIC);
    out.push(EEGB_VERSION);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&json);
    for s in 0..n {
        for ch in 0..c {
            out.extend_from_slice(&(rec.data[(ch, s)] as f32).to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Stores a trial set as back-to-back epochs with one marker per trial onset.
pub fn write_trialset(path: &Path, set: &TrialSet) -> Result<(), DataError> {
    let c = set.spec.channel_count();
    let first = set
        .trials
        .first()
        .ok_or_else(|| DataError::Config("cannot write an empty trial set".into()))?;
    let n = first.n_samples();
    if set.trials.iter().any(|t| t.n_samples() != n || t.data.rows() != c) {
        return Err(DataError::Config("trials must share one shape to be stored".into()));
    }
    let mut data = Matrix::zeros(c, n * set.len());
    let mut markers = Vec::with_capacity(set.len());
    for (i, t) in set.trials.iter().enumerate() {
        for ch in 0..c {
            data.row_mut(ch)[i * n..(i + 1) * n].copy_from_slice(t.data.row(ch));
        }
        markers.push(Marker {
            sample: i * n,
            label: t.label,
        });
    }
    write_eegb(
        path,
        &Recording {
            spec: set.spec.clone(),
            data,
            markers,
            trial_length: Some(first.trial_length),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_recording() -> Recording {
        Recording {
            spec: RecordingSpec::new(256.0, vec!["C3".into(), "C4".into()]).unwrap(),
            data: Matrix::from_fn(2, 10, |r, c| (r as f64 + 1.0) * c as f64 * 0.25),
            markers: vec![Marker { sample: 2, label: 1 }],
            trial_length: None,
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.eegb");
        let rec = sample_recording();
        write_eegb(&p, &rec).unwrap();
        assert_eq!(read_eegb(&p).unwrap(), rec);
    }

    #[test]
    fn sample_major_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.eegb");
        write_eegb(&p, &sample_recording()).unwrap();
        let bytes = fs::read(&p).unwrap();
        let hlen = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let data = &bytes[9 + hlen..];
        let value = |i: usize| f32::from_le_bytes(data[4 * i..4 * i + 4].try_into().unwrap());
        // sample 1: C3 = 0.25, C4 = 0.5
        assert_eq!((value(2), value(3)), (0.25, 0.5));
    }

    #[test]
    fn truncated_file_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.eegb");
        write_eegb(&p, &sample_recording()).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 6);
        fs::write(&p, &bytes).unwrap();
        match read_eegb(&p) {
            Err(DataError::Parse { offset, message, .. }) => {
                assert_eq!(offset as usize, bytes.len());
                assert!(message.contains("truncated"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.eegb");
        fs::write(&p, b"EEGX\x01").unwrap();
        assert!(matches!(read_eegb(&p), Err(DataError::Parse { offset: 0, .. })));
        fs::write(&p, b"EEGB\x02\0\0\0\0").unwrap();
        assert!(matches!(read_eegb(&p), Err(DataError::Parse { offset: 4, .. })));
    }

    #[test]
    fn malformed_header_offset_points_into_json() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.eegb");
        let json = br#"{"fs": 256, "channels": ["C3"], "n_samples": x}"#;
        let mut bytes = b"EEGB\x01".to_vec();
        bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
        bytes.extend_from_slice(json);
        fs::write(&p, &bytes).unwrap();
        match read_eegb(&p) {
            Err(DataError::Parse { offset, .. }) => {
                let x_at = 9 + json.iter().position(|&b| b == b'x').unwrap();
                assert!((offset as usize).abs_diff(x_at) <= 1, "{offset} vs {x_at}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
