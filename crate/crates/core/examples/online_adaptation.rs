//! Streams a shifted target session under every adaptation mode, online and
//! with offline calibration. Modes that align use a source model trained on
//! per-subject aligned data.

use rapstream::adapt::{calibrate, source_alignment, AdaptMode, AlignMethod};
use rapstream::data::{generate_synth_cohort, Cohort, CohortSource, Role, SynthConfig};
use rapstream::eval::{evaluate, predict_set, TrialPrediction};
use rapstream::model::ModelConfig;
use rapstream::rap::{plan_rap, OnlineTaskSpec};
use rapstream::stream::{events_to_predictions, hooks_for_mode, Decoder, SessionConfig, StreamSession};
use rapstream::train::{run_training, run_training_with, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // a session shift separates calibration data from the online session
    for session_shift in [0.0, 0.5] {
        println!("session shift {session_shift}");
        let subjects = generate_synth_cohort(&SynthConfig {
            subject_count: 4,
            trials_per_subject: 30,
            subject_shift_scale: 1.5,
            session_shift_scale: session_shift,
            rng_seed: 3,
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
        let target = "S01";
        let plain = run_training(&cohort, target, &model_cfg, &cfg)?.remove(0).model;
        let aligned = run_training_with(&cohort, target, &model_cfg, &cfg, &source_alignment(AlignMethod::Euclidean))?
            .remove(0)
            .model;
        let source_for = |mode: AdaptMode| if mode.align.is_some() { &aligned } else { &plain };
        let offline = cohort.load(target, Role::Offline)?;
        let online = cohort.load(target, Role::Online)?;

        let show = |label: String, preds: &[TrialPrediction]| -> Result<(), Box<dyn std::error::Error>> {
            let r = evaluate(preds)?;
            println!("{label:<22} tacc {:.3}  utacc {:.3}  wacc {:.3}", r.tacc, r.utacc, r.wacc);
            Ok(())
        };
        for mode in ["none", "ea", "ra", "adabn", "ea+adabn", "ra+adabn"] {
            let mode: AdaptMode = mode.parse()?;
            let source = source_for(mode);
            let hooks = hooks_for_mode(mode, source)?;
            let decoder = Decoder::Model(Box::new(source.clone()));
            let mut session = StreamSession::new(task, 128.0, 8, decoder, hooks, SessionConfig::default())?;
            let (events, _) = session.run(&online)?;
            show(format!("online {mode}"), &events_to_predictions(&events, &online)?)?;
        }

        let finetune = TrainConfig { learning_rate: 1e-3, epochs: 10, ..TrainConfig::finetune() };
        for mode in ["adabn", "ea+adabn", "ft", "ft+ea"] {
            let mode: AdaptMode = mode.parse()?;
            let tuned = calibrate(source_for(mode), &offline, mode, &finetune)?;
            let aligned = match &tuned.reference {
                Some(r) => online.map_data(|x| r.align(x).map_err(|e| rapstream::data::DataError::Config(e.to_string())))?,
                None => online.clone(),
            };
            show(format!("calibrated {mode}"), &predict_set(&tuned.model, &aligned)?)?;
        }
    }
    Ok(())
}
