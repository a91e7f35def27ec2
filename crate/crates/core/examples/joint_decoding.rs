//! Decodes whole trials in one pass and checks each output row against the
//! matching window decoded alone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rapstream::linalg::Matrix;
use rapstream::model::{ModelConfig, ModelState};
use rapstream::train::bench_joint_vs_individual;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ModelConfig::default();
    let model = ModelState::<f32>::new(cfg.clone(), 0)?;
    let plan = cfg.rap_plan.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let trial = Matrix::from_fn(27, 1216, |_, _| rng.sample(StandardNormal));

    let joint = model.predict(&trial)?;
    let mut worst: f64 = 0.0;
    for j in 0..joint.positions() {
        let s = j * plan.hop_samples();
        let single = model.predict(&trial.columns(s, s + plan.window_samples())?)?;
        for (a, b) in joint.row(j).iter().zip(single.row(0)) {
            worst = worst.max((a - b).abs());
        }
    }
    println!("{} windows, max joint/individual difference {worst:.2e}", joint.positions());

    let bench = bench_joint_vs_individual(&cfg, 4.75, 4, 2, 0)?;
    println!(
        "train step on {} trials: joint {:.1} ms, per window {:.1} ms, {:.2}x measured / {:.2}x theoretical",
        bench.trials, bench.joint_ms, bench.individual_ms, bench.measured_gain, bench.theoretical_gain
    );
    Ok(())
}
