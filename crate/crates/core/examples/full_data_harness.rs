//! End-to-end harness over an EEGB cohort manifest. Pass a manifest path to
//! use real data; otherwise a small synthetic cohort is written first.

use rapstream::cli::{run_harness, HarnessConfig};
use rapstream::data::{generate_synth_cohort, write_cohort, Cohort, SynthConfig};
use rapstream::train::TrainConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let (manifest, cfg) = match std::env::args().nth(1) {
        Some(path) => (path.into(), HarnessConfig::default()),
        None => {
            let subjects = generate_synth_cohort(&SynthConfig {
                subject_count: 3,
                trials_per_subject: 16,
                subject_shift_scale: 1.0,
                ..SynthConfig::default()
            })?;
            let manifest = write_cohort(dir.path(), &Cohort::from(subjects.as_slice()))?;
            let cfg = HarnessConfig {
                modes: ["none", "ea", "ea+adabn", "ft+ea"].iter().map(|m| m.parse()).collect::<Result<_, _>>()?,
                train: TrainConfig {
                    learning_rate: 1e-2,
                    epochs: 8,
                    warmup_epochs: 2,
                    batch_size: 8,
                    seeds: vec![0, 1],
                    ..TrainConfig::default()
                },
                finetune: TrainConfig { epochs: 5, ..TrainConfig::finetune() },
                compact: true,
                ..HarnessConfig::default()
            };
            (manifest, cfg)
        }
    };
    let report = run_harness(&manifest, &cfg).map_err(|e| e.to_string())?;
    print!("{}", report.to_csv());
    for (r, t) in report.reports.iter().zip(&report.versus_none) {
        if let Some(t) = t {
            println!("{} vs none: t={:.3} p={:.3}", r.method, t.t, t.p);
        }
    }
    Ok(())
}
