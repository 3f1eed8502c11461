//! Generates one desk-scale synthetic session and reports the matched-filter
//! ceiling across noise levels.
//!
//!     cargo run --release --example synth_oracle -- [sensors] [trials_per_class]

use std::time::Instant;

use neurovq::synth::{generate, oracle_accuracy, SynthConfig};

fn main() -> neurovq::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().expect("integer argument"));
    let sensors = args.next().unwrap_or(32);
    let trials_per_class = args.next().unwrap_or(40);
    let base = SynthConfig { sensors, trials_per_class, ..SynthConfig::default() };

    let t0 = Instant::now();
    let rec = generate(&base)?;
    println!(
        "{}: {} sensors x {} samples at {} Hz, {} trials ({:.2}s)",
        rec.key(),
        rec.sensors(),
        rec.samples(),
        rec.sampling_rate_hz(),
        rec.trials().len(),
        t0.elapsed().as_secs_f64()
    );

    for noise in [0.0, 0.5, 1.0, 2.0, 4.0] {
        let cfg = SynthConfig { noise_level: noise, ..base.clone() };
        println!("noise {noise:>4}: oracle accuracy {:.3}", oracle_accuracy(&cfg)?);
    }
    Ok(())
}
