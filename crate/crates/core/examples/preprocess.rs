//! Runs the preprocessing chain on a synthetic recording and cuts it into
//! labeled mini-trials, printing per-stage statistics.
//!
//!     cargo run --release --example preprocess -- [sensors]

use neurovq::data::{average_reference, channel_stats, downsample, highpass, preprocess, split, PipelineConfig, Recording, SplitSpec};
use neurovq::synth::{generate, SynthConfig};

fn spread(rec: &Recording) -> neurovq::Result<(f64, f64)> {
    let stats = channel_stats(rec, &[0..rec.samples()])?;
    let mean = stats.mean.iter().map(|m| m.abs()).fold(0.0, f64::max);
    let sd = stats.std.iter().sum::<f64>() / stats.std.len() as f64;
    Ok((mean, sd))
}

fn main() -> neurovq::Result<()> {
    let sensors = std::env::args().nth(1).map_or(16, |a| a.parse().expect("sensor count"));
    let raw = generate(&SynthConfig { sensors, trials_per_class: 10, ..SynthConfig::default() })?;
    let cfg = PipelineConfig::default();

    let down = downsample(&raw, cfg.downsample_factor)?;
    let filtered = highpass(&down, cfg.highpass_hz)?;
    let referenced = average_reference(&filtered)?;
    let done = preprocess(&raw, &cfg)?;
    for (name, rec) in [("raw", &raw), ("downsampled", &down), ("high-passed", &filtered), ("re-referenced", &referenced), ("standardized", &done)] {
        let (mean, sd) = spread(rec)?;
        println!("{name:>14}: {:>6} samples at {:>5} Hz, max |mean| {mean:.4}, mean sd {sd:.4}", rec.samples(), rec.sampling_rate_hz());
    }
    let common: f64 = (0..referenced.samples()).map(|t| (0..sensors).map(|s| referenced.row(s)[t]).sum::<f64>().abs()).fold(0.0, f64::max);
    println!("largest cross-sensor sum after re-referencing: {common:.2e}");

    let session = split(&done, &SplitSpec::default(), 250.0)?;
    println!(
        "{}: {}-sample windows; trials {} / {} / {}, mini-trials {} / {} / {}",
        session.key,
        session.window,
        session.partition.train.len(),
        session.partition.val.len(),
        session.partition.test.len(),
        session.train.len(),
        session.val.len(),
        session.test.len()
    );

    let dir = std::env::temp_dir().join("neurovq-preprocess-example");
    let path = dir.join(format!("{}.nvrc", done.key()));
    done.save(&path)?;
    // samples are stored as f32
    let back = Recording::load(&path)?;
    let worst = back.data().iter().zip(done.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert_eq!(back.trials(), done.trials());
    println!("round-tripped through {} (largest change {worst:.1e})", path.display());
    Ok(())
}
