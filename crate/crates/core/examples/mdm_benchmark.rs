//! Minimum distance to Riemannian mean across subjects: no adaptation,
//! online recentering, calibration recentering, and PAR.

use rapstream::adapt::{fit_reference, AlignMethod};
use rapstream::data::{generate_synth_cohort, SynthConfig, TrialSet};
use rapstream::eval::{argmax, binomial_test_greater};
use rapstream::linalg::Matrix;
use rapstream::mdm::{gr_update, mdm_fit, mdm_predict, par_update, MdmDomain, MdmModel};
use rapstream::adapt::AlignmentReference;

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

fn accuracy(
    xs: &[Matrix],
    ys: &[usize],
    model: &MdmModel,
    mut reference: impl FnMut(&Matrix) -> AlignmentReference,
) -> Result<f64, Box<dyn std::error::Error>> {
    let mut hits = 0;
    for (x, &y) in xs.iter().zip(ys) {
        let r = reference(x);
        hits += usize::from(argmax(&mdm_predict(x, model, &r)?) == y);
    }
    Ok(hits as f64 / xs.len() as f64)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let subjects = generate_synth_cohort(&SynthConfig {
        subject_count: 5,
        trials_per_subject: 40,
        subject_shift_scale: 2.0,
        rng_seed: 4,
        ..SynthConfig::default()
    })?;
    let (target, sources) = subjects.split_last().unwrap();
    let domains = sources
        .iter()
        .map(|s| {
            let (xs, ys) = windows(&s.offline);
            MdmDomain::from_windows(&xs, &ys)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let model = mdm_fit(&domains, 2)?;

    let (cal_x, cal_y) = windows(&target.offline);
    let (xs, ys) = windows(&target.online);
    let source_ref = model.gr_reference(usize::MAX)?;
    let none = accuracy(&xs, &ys, &model, |_| source_ref.clone())?;

    let mut running = model.gr_reference(1)?;
    let gr = accuracy(&xs, &ys, &model, |x| {
        running = gr_update(&running, x).unwrap();
        running.clone()
    })?;

    let cal_ref = fit_reference(&cal_x, AlignMethod::Riemannian)?;
    let ra = accuracy(&xs, &ys, &model, |_| cal_ref.clone())?;

    let par = par_update(&model, &MdmDomain::from_windows(&cal_x, &cal_y)?, 0.5)?;
    let par_acc = accuracy(&xs, &ys, &par.model, |_| par.reference.clone())?;

    let n = xs.len() as u64;
    for (name, acc) in [("none", none), ("gr", gr), ("ra", ra), ("par", par_acc)] {
        let p = binomial_test_greater((acc * n as f64).round() as u64, n, 0.5)?;
        println!("mdm {name:<5} window accuracy {acc:.3}  (p vs chance {p:.1e})");
    }
    Ok(())
}
