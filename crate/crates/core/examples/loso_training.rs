//! Leave-one-subject-out training on a synthetic cohort, with and without
//! per-subject Euclidean alignment of the source data.

use rapstream::adapt::{source_alignment, AlignMethod};
use rapstream::data::{generate_synth_cohort, Cohort, CohortSource, Role, SynthConfig};
use rapstream::eval::trial_accuracy;
use rapstream::model::ModelConfig;
use rapstream::rap::{plan_rap, OnlineTaskSpec};
use rapstream::stream::{events_to_predictions, hooks_for_mode, Decoder, SessionConfig, StreamSession};
use rapstream::train::{run_training, run_training_with, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let subjects = generate_synth_cohort(&SynthConfig {
        subject_count: 4,
        trials_per_subject: 30,
        subject_shift_scale: 2.0,
        rng_seed: 7,
        ..SynthConfig::default()
    })?;
    let cohort = Cohort::from(subjects.as_slice());
    let task = OnlineTaskSpec::new(1.0, 16.0, Some(4.75))?;
    let model_cfg = ModelConfig::compact(8, plan_rap(128.0, &[4], &task)?);
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        epochs: 15,
        warmup_epochs: 3,
        batch_size: 16,
        seeds: vec![0],
        ..TrainConfig::default()
    };

    for target in cohort.subjects() {
        let online = cohort.load(&target, Role::Online)?;
        let mut line = format!("{target}:");
        for (label, mode, outcome) in [
            ("none", "none", run_training(&cohort, &target, &model_cfg, &cfg)?.remove(0)),
            ("ea", "ea", run_training_with(&cohort, &target, &model_cfg, &cfg, &source_alignment(AlignMethod::Euclidean))?.remove(0)),
        ] {
            let hooks = hooks_for_mode(mode.parse()?, &outcome.model)?;
            let decoder = Decoder::Model(Box::new(outcome.model.clone()));
            let mut session = StreamSession::new(task, 128.0, 8, decoder, hooks, SessionConfig::default())?;
            let (events, _) = session.run(&online)?;
            let acc = trial_accuracy(&events_to_predictions(&events, &online)?)?;
            let last = outcome.log.last().unwrap();
            line += &format!("  {label} tacc {acc:.3} (final loss {:.3})", last.loss);
        }
        println!("{line}");
    }
    Ok(())
}
