//! Electrode deletion scores of a trained model: accuracy lost when one
//! channel is zeroed.

use rapstream::data::{generate_synth_cohort, Cohort, CohortSource, Role, SynthConfig};
use rapstream::eval::{eds_all, eds_per_class};
use rapstream::model::{ModelConfig, ModelState};
use rapstream::rap::{plan_rap, OnlineTaskSpec};
use rapstream::train::{fit, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let subject = generate_synth_cohort(&SynthConfig {
        subject_count: 1,
        trials_per_subject: 60,
        rng_seed: 8,
        ..SynthConfig::default()
    })?;
    let cohort = Cohort::from(subject.as_slice());
    let train = cohort.load("S01", Role::Offline)?;
    let test = cohort.load("S01", Role::Online)?;
    let task = OnlineTaskSpec::new(1.0, 16.0, Some(4.75))?;
    let model_cfg = ModelConfig::compact(8, plan_rap(128.0, &[4], &task)?);
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        epochs: 20,
        warmup_epochs: 4,
        batch_size: 16,
        seeds: vec![0],
        ..TrainConfig::default()
    };
    let mut model = ModelState::<f32>::new(model_cfg, 0)?;
    fit(&mut model, &train.trials, &cfg, 0)?;

    let scores = eds_all(&model, &test)?;
    for (i, (name, s)) in test.spec.channel_names.iter().zip(&scores).enumerate() {
        let per_class: Vec<String> = (0..2)
            .map(|c| eds_per_class(&model, &test, i, c).map(|v| format!("{v:+.3}")))
            .collect::<Result<_, _>>()?;
        println!("{name:<4} eds {s:+.3}  per class [{}]", per_class.join(", "));
    }
    Ok(())
}
