//! Euclidean and Riemannian alignment of a shifted subject, batch and online.

use rapstream::adapt::{align_set, AlignMethod, AlignmentReference};
use rapstream::data::{generate_synth_cohort, SynthConfig};
use rapstream::linalg::{airm_distance, covariance, karcher_mean, Matrix, SpdMatrix};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let subject = generate_synth_cohort(&SynthConfig {
        subject_count: 1,
        trials_per_subject: 40,
        subject_shift_scale: 2.0,
        ..SynthConfig::default()
    })?
    .remove(0);
    let identity = SpdMatrix::new(Matrix::identity(8))?;

    let covs = |set: &rapstream::data::TrialSet| -> Result<Vec<SpdMatrix>, Box<dyn std::error::Error>> {
        Ok(set.trials.iter().map(|t| covariance(&t.data)).collect::<Result<_, _>>()?)
    };
    let raw = karcher_mean(&covs(&subject.offline)?)?;
    println!("raw mean covariance, distance to identity {:.3}", airm_distance(&raw, &identity)?);
    for method in [AlignMethod::Euclidean, AlignMethod::Riemannian] {
        let (aligned, _) = align_set(&subject.offline, method)?;
        let mean = karcher_mean(&covs(&aligned)?)?;
        println!("{method:?} aligned, distance to identity {:.3}", airm_distance(&mean, &identity)?);
    }

    let mut online = AlignmentReference::empty(AlignMethod::Euclidean);
    for (k, trial) in subject.online.trials.iter().enumerate() {
        online.update(&trial.data.columns(0, 128)?)?;
        if [0, 4, 19].contains(&k) {
            let d = airm_distance(online.mean().unwrap(), &raw)?;
            println!("online reference after {:2} windows, distance to offline mean {d:.3}", k + 1);
        }
    }
    Ok(())
}
