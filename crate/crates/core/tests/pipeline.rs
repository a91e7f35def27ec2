use rapstream::adapt::{calibrate, fit_reference, source_alignment, AdaptMode, AlignMethod};
use rapstream::data::{
    generate_synth_cohort, write_cohort, Cohort, CohortSource, FileCohort, Role, SynthConfig, SynthSubject, TrialSet,
};
use rapstream::eval::{argmax, eds_all, predict_set, trial_accuracy};
use rapstream::linalg::Matrix;
use rapstream::mdm::{mdm_fit, mdm_predict, par_update, MdmDomain, MdmModel};
use rapstream::model::{ModelConfig, ModelState};
use rapstream::rap::{plan_rap, OnlineTaskSpec};
use rapstream::stream::{hooks_for_mode, Decoder, SessionConfig, StreamEvent, StreamSession};
use rapstream::train::{fit, run_training, run_training_with, Split, TrainConfig};

fn task() -> OnlineTaskSpec {
    OnlineTaskSpec::new(1.0, 16.0, Some(4.75)).unwrap()
}

fn compact() -> ModelConfig {
    ModelConfig::compact(8, plan_rap(128.0, &[4], &task()).unwrap())
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-2,
        epochs,
        warmup_epochs: epochs / 5,
        batch_size: 16,
        seeds: vec![0],
        ..TrainConfig::default()
    }
}

fn cohort(subjects: usize, trials: usize, subject_shift: f64, seed: u64) -> Vec<SynthSubject> {
    generate_synth_cohort(&SynthConfig {
        subject_count: subjects,
        trials_per_subject: trials,
        subject_shift_scale: subject_shift,
        rng_seed: seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn stream(model: &ModelState<f32>, mode: &str, set: &TrialSet, config: SessionConfig) -> Vec<StreamEvent> {
    let hooks = hooks_for_mode(mode.parse().unwrap(), model).unwrap();
    let mut s = StreamSession::new(task(), 128.0, 8, Decoder::Model(Box::new(model.clone())), hooks, config).unwrap();
    s.run(set).unwrap().0
}

#[test]
fn loso_never_opens_target_files() {
    let dir = tempfile::tempdir().unwrap();
    let subjects = cohort(3, 8, 1.0, 1);
    let manifest = write_cohort(dir.path(), &Cohort::from(subjects.as_slice())).unwrap();
    // canary: the target's files are unreadable garbage
    for role in ["offline", "online"] {
        std::fs::write(dir.path().join(format!("S02_{role}.eegb")), b"not an eegb file").unwrap();
    }
    let files = FileCohort::open(&manifest).unwrap();
    let cfg = TrainConfig {
        split: Split::CrossSubjectLoso,
        ..quick(1)
    };
    run_training(&files, "S02", &compact(), &cfg).unwrap();
    run_training_with(&files, "S02", &compact(), &cfg, &source_alignment(AlignMethod::Riemannian)).unwrap();
    let log = files.access_log();
    assert!(!log.is_empty());
    assert!(log.iter().all(|p| !p.to_string_lossy().contains("S02")), "{log:?}");
}

#[test]
fn paced_replay_matches_unpaced_and_keeps_the_clock() {
    let set = cohort(1, 2, 1.0, 2).remove(0).online;
    assert_eq!(set.len(), 1);
    let model = ModelState::<f32>::new(compact(), 2).unwrap();
    let fast = stream(&model, "ea+adabn", &set, SessionConfig::default());
    let hooks = hooks_for_mode("ea+adabn".parse().unwrap(), &model).unwrap();
    let config = SessionConfig {
        real_time: true,
        ..SessionConfig::default()
    };
    let mut s = StreamSession::new(task(), 128.0, 8, Decoder::Model(Box::new(model)), hooks, config).unwrap();
    let (paced, summary) = s.run(&set).unwrap();
    assert_eq!(fast.len(), 61);
    for (a, b) in fast.iter().zip(&paced) {
        assert_eq!(a.probabilities, b.probabilities);
    }
    // the last window closes 4.75 s into the trial
    assert!((4700.0..5500.0).contains(&summary.wall_ms), "{}", summary.wall_ms);
    assert_eq!(summary.deadline_misses, 0);
}

#[test]
fn reset_per_trial_equals_fresh_sessions() {
    let set = cohort(1, 6, 1.0, 3).remove(0).online;
    let model = ModelState::<f32>::new(compact(), 3).unwrap();
    let reset = SessionConfig {
        reset_per_trial: true,
        ..SessionConfig::default()
    };
    let all = stream(&model, "ra+adabn", &set, reset);
    let carried = stream(&model, "ra+adabn", &set, SessionConfig::default());
    for (i, trial) in set.trials.iter().enumerate() {
        let single = TrialSet {
            trials: vec![trial.clone()],
            ..set.clone()
        };
        let fresh = stream(&model, "ra+adabn", &single, SessionConfig::default());
        let mine: Vec<_> = all.iter().filter(|e| e.trial == i).collect();
        assert_eq!(mine.len(), fresh.len());
        for (a, b) in mine.iter().zip(&fresh) {
            assert_eq!(a.probabilities, b.probabilities);
        }
    }
    // without the reset, state carries over and later trials differ
    assert_ne!(all.last().unwrap().probabilities, carried.last().unwrap().probabilities);
}

#[test]
fn electrode_scores_peak_on_a_lateral_channel() {
    let subjects = cohort(1, 60, 0.0, 8);
    let train = &subjects[0].offline;
    let test = &subjects[0].online;
    let mut model = ModelState::<f32>::new(compact(), 0).unwrap();
    fit(&mut model, &train.trials, &quick(20), 0).unwrap();
    let scores = eds_all(&model, test).unwrap();
    let best = argmax(&scores);
    let name = &test.spec.channel_names[best];
    assert!(name == "C3" || name == "C4", "{name}: {scores:?}");
    assert!(scores[best] > 0.1);
}

#[test]
fn finetune_on_calibration_beats_the_source() {
    let subjects = cohort(4, 30, 1.5, 3);
    let c = Cohort::from(subjects.as_slice());
    let source = run_training(&c, "S01", &compact(), &quick(10)).unwrap().remove(0).model;
    let offline = c.load("S01", Role::Offline).unwrap();
    let online = c.load("S01", Role::Online).unwrap();
    let tuned = calibrate(
        &source,
        &offline,
        "ft".parse::<AdaptMode>().unwrap(),
        &TrainConfig {
            learning_rate: 1e-3,
            epochs: 100,
            batch_size: 8,
            ..TrainConfig::finetune()
        },
    )
    .unwrap();
    let before = trial_accuracy(&predict_set(&source, &online).unwrap()).unwrap();
    let after = trial_accuracy(&predict_set(&tuned.model, &online).unwrap()).unwrap();
    assert!(after >= before, "fine-tuned {after} < source {before}");
    let on_calibration = trial_accuracy(&predict_set(&tuned.model, &offline).unwrap()).unwrap();
    assert!(on_calibration > 0.8, "{on_calibration}");
}

fn windows(set: &TrialSet) -> (Vec<Matrix>, Vec<usize>) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for t in &set.trials {
        for k in 0..t.n_samples() / 128 {
            xs.push(t.data.columns(k * 128, (k + 1) * 128).unwrap());
            ys.push(t.label);
        }
    }
    (xs, ys)
}

fn mdm_accuracy(xs: &[Matrix], ys: &[usize], model: &MdmModel, reference: &rapstream::adapt::AlignmentReference) -> f64 {
    let hits = xs
        .iter()
        .zip(ys)
        .filter(|(x, &y)| argmax(&mdm_predict(x, model, reference).unwrap()) == y)
        .count();
    hits as f64 / xs.len() as f64
}

#[test]
fn par_is_no_worse_than_the_unadapted_mdm() {
    let subjects = cohort(5, 40, 2.0, 4);
    let (target, sources) = subjects.split_last().unwrap();
    let domains: Vec<MdmDomain> = sources
        .iter()
        .map(|s| {
            let (xs, ys) = windows(&s.offline);
            MdmDomain::from_windows(&xs, &ys).unwrap()
        })
        .collect();
    let model = mdm_fit(&domains, 2).unwrap();
    let (cal_x, cal_y) = windows(&target.offline);
    let (xs, ys) = windows(&target.online);

    let none = mdm_accuracy(&xs, &ys, &model, &model.gr_reference(1).unwrap());
    let ra = mdm_accuracy(&xs, &ys, &model, &fit_reference(&cal_x, AlignMethod::Riemannian).unwrap());
    let par = par_update(&model, &MdmDomain::from_windows(&cal_x, &cal_y).unwrap(), 0.5).unwrap();
    let par_acc = mdm_accuracy(&xs, &ys, &par.model, &par.reference);
    assert!(par_acc >= none, "par {par_acc} < none {none}");
    assert!(ra > none, "ra {ra} <= none {none}");
    assert!(par.warnings.is_empty());
}
