//! Sweeps the fraction of failed test sensors from 0 to 100 % for both
//! pipelines on desk-scale data, then prints the curves and their
//! difference (positive where the token pipeline decodes better).
//!
//!     cargo run --release --example failure_sweep -- [jobs]

use neurovq::cli::{Preset, RunConfig};
use neurovq::data::prepare_session;
use neurovq::eval::{accuracy_diff_report, run_cases, CaseKind, CaseSpec, ModelKind, Sessions, ALL_PCTS};
use neurovq::synth::generate;

fn main() -> neurovq::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let jobs = std::env::args().nth(1).map_or(2, |a| a.parse().expect("job count"));
    let cfg = RunConfig::preset(Preset::Desk);
    let synth = &cfg.synth.configs()[0];
    let session = prepare_session(&generate(synth)?, &cfg.pipeline, &cfg.split, cfg.window_ms)?;
    let sessions: Sessions = [session].into_iter().collect();

    let specs: Vec<CaseSpec> = [ModelKind::TokenPipeline, ModelKind::CnnBaseline]
        .into_iter()
        .map(|model| CaseSpec {
            kind: CaseKind::Within,
            train_session: synth.key(),
            test_session: synth.key(),
            failure_pcts: ALL_PCTS.to_vec(),
            model_seeds: vec![0],
            failure_seeds: cfg.seeds.failure.clone(),
            model,
        })
        .collect();
    let outs = run_cases(&specs, &sessions, &cfg.models, jobs)?;

    println!("{:>5}  {:>15}  {:>15}", "pct", "token pipeline", "cnn baseline");
    for (a, b) in outs[0].results.iter().zip(&outs[1].results) {
        println!("{:>4}%  {:.3} ± {:.3}    {:.3} ± {:.3}", a.failure_pct, a.mean, a.sem, b.mean, b.sem);
    }
    for out in &outs {
        println!("{} slope {:.2e} per point", out.spec.model.name(), out.curve().slope);
    }
    assert_eq!(outs[0].failures, outs[1].failures, "both models lose the same sensors");
    let diff = accuracy_diff_report(&outs[0].results, &outs[1].results)?;
    println!("mean difference {:+.3}", diff.mean_difference);
    Ok(())
}
