//! Plans the pooling layout for a few recording setups and prints the
//! theoretical gain of joint over per-window decoding.

use rapstream::rap::{computational_gain, gain_surface, plan_rap, windows_per_trial, OnlineTaskSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for (name, fs, down, task) in [
        ("dreyer 256 Hz", 256.0, vec![8], OnlineTaskSpec::dreyer()),
        ("lee at 256 Hz", 256.0, vec![8], OnlineTaskSpec::lee()),
        ("synthetic 128 Hz", 128.0, vec![4], OnlineTaskSpec::new(1.0, 16.0, Some(4.75))?),
    ] {
        let plan = plan_rap(fs, &down, &task)?;
        println!(
            "{name:<18} plan {}  windows/trial {}  gain {:.4}",
            plan.summary_json(),
            windows_per_trial(&task)?,
            computational_gain(&task)?
        );
    }

    // 250 Hz has no integer kernel reaching a multiple of 16 Hz
    if let Err(e) = plan_rap(250.0, &[8], &OnlineTaskSpec::lee()) {
        println!("lee at 250 Hz       {e}");
    }

    let trial_lengths = [2.0, 3.0, 4.0, 5.0];
    let window_lengths = [0.5, 1.0, 1.5];
    println!("\ngain at 16 Hz updates (rows: trial length, cols: window length)");
    for (t, row) in trial_lengths.iter().zip(gain_surface(&trial_lengths, &window_lengths, 16.0)) {
        let cells: Vec<String> = row
            .iter()
            .map(|g| g.map_or("     -".into(), |g| format!("{g:6.2}")))
            .collect();
        println!("{t:4.1} s {}", cells.join(" "));
    }
    Ok(())
}
