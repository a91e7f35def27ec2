//! Replays one session at the sample clock and reports latency against the
//! update deadline, then injects a stall to show a deadline miss.

use rapstream::data::{generate_synth_cohort, SynthConfig};
use rapstream::model::{ModelConfig, ModelState};
use rapstream::rap::OnlineTaskSpec;
use rapstream::stream::{hooks_for_mode, write_events, Decoder, SessionConfig, Stall, StreamSession};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let set = generate_synth_cohort(&SynthConfig {
        subject_count: 1,
        trials_per_subject: 4,
        channel_count: 27,
        sampling_frequency: 256.0,
        ..SynthConfig::default()
    })?
    .remove(0)
    .online;
    let model = ModelState::<f32>::new(ModelConfig::default(), 0)?;

    for stall in [None, Some(Stall { tick: 10, ms: 80.0 })] {
        let config = SessionConfig { real_time: true, stall, ..SessionConfig::default() };
        let hooks = hooks_for_mode("ea+adabn".parse()?, &model)?;
        let decoder = Decoder::Model(Box::new(model.clone()));
        let mut session = StreamSession::new(OnlineTaskSpec::dreyer(), 256.0, 27, decoder, hooks, config)?;
        let (events, summary) = session.run(&set)?;
        println!(
            "{} events in {:.0} ms wall; latency p95 {:.2} ms (deadline {:.1}), misses {}, max jitter {:.2} ms",
            summary.events, summary.wall_ms, summary.latency.p95, summary.deadline_ms, summary.deadline_misses, summary.max_jitter_ms
        );
        if stall.is_none() {
            let mut head = Vec::new();
            write_events(&mut head, &events[..2])?;
            print!("{}", String::from_utf8(head)?);
        }
    }
    Ok(())
}
