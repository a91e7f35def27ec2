//! Continuous recording to EEGB and back, then band-pass, resample and
//! epoch extraction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rapstream::data::{bandpass, extract_epochs, read_eegb, resample, write_eegb, Marker, Recording, RecordingSpec};
use rapstream::linalg::Matrix;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fs = 250.0;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 30 * 250;
    let data = Matrix::from_fn(3, n, |c, t| {
        let s = t as f64 / fs;
        (2.0 * std::f64::consts::PI * 10.0 * s).sin() * (c + 1) as f64 + 0.05 * (t as f64 / 100.0) + rng.random::<f64>() - 0.5
    });
    let markers: Vec<Marker> = (0..6).map(|i| Marker { sample: 500 + i * 1100, label: i % 2 }).collect();
    let rec = Recording {
        spec: RecordingSpec::new(fs, vec!["C3".into(), "Cz".into(), "C4".into()])?,
        data,
        markers,
        trial_length: None,
    };

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("session.eegb");
    write_eegb(&path, &rec)?;
    let back = read_eegb(&path)?;
    println!("round trip: {} channels x {} samples, {} markers", back.data.rows(), back.data.cols(), back.markers.len());

    let filtered = bandpass(&back.data, fs, 8.0, 30.0)?;
    let at_128 = resample(&filtered, fs, 128.0)?;
    let markers: Vec<Marker> = back
        .markers
        .iter()
        .map(|m| Marker { sample: (m.sample as f64 * 128.0 / fs).round() as usize, label: m.label })
        .collect();
    let trials = extract_epochs(&at_128, &markers, 0.5, 3.75, 128.0)?;
    println!("resampled to {} samples, {} epochs of {} samples", at_128.cols(), trials.len(), trials[0].n_samples());
    Ok(())
}
