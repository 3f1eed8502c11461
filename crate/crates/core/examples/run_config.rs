//! Drives the command pipeline from a JSON run config, the same way the
//! `neurovq` binary does: resolve the config over its preset, run each stage
//! into an output directory, then run again to show the manifest skip.
//!
//!     cargo run --release --example run_config -- [config.json]

use std::path::Path;

use neurovq::cli::{self, Flags, RunConfig};

const TINY: &str = r#"{
    "synth": {"base": {"sensors": 8, "trials_per_class": 10, "trial_seconds": 1.0, "raw_rate_hz": 256.0, "gap_seconds": 0.25}},
    "models": {
        "tokenizer": {"compression": 4, "codeword_dim": 8, "codebook_size": 16, "channels": [4, 8], "epochs": 2, "series_per_epoch": 256},
        "classifier": {"embed_dim": 8, "heads": 2, "temporal_layers": 1, "spatial_layers": 1, "fit": {"epochs": 3, "batch_size": 16}},
        "cnn": {"f1": 2, "f2": 4, "kernel_len": 8, "separable_len": 4, "fit": {"epochs": 3, "batch_size": 16}}
    },
    "seeds": {"model": [0], "failure": [0, 1, 2]}
}"#;

fn main() -> neurovq::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut cfg = match std::env::args().nth(1) {
        Some(path) => RunConfig::load(Path::new(&path))?,
        None => RunConfig::from_json(TINY, Path::new("tiny.json"))?,
    };
    cfg.out_dir = std::env::temp_dir().join("neurovq-run");
    println!("config {} ({:?} preset), output in {}", cfg.hash()?, cfg.preset, cfg.out_dir.display());
    for spec in cfg.case_specs(false)? {
        println!("  case {} {} → {} with {}", spec.kind.name(), spec.train_session, spec.test_session, spec.model.name());
    }

    let flags = Flags { retrain_under_failure: Some(50), jobs: 1 };
    for round in ["first", "second"] {
        println!("{round} pass");
        let outcomes = [
            cli::cmd_synth(&cfg)?,
            cli::cmd_preprocess(&cfg)?,
            cli::cmd_train_tokenizer(&cfg)?,
            cli::cmd_train_classifier(&cfg)?,
            cli::cmd_train_cnn(&cfg)?,
            cli::cmd_eval(&cfg, &flags)?,
            cli::cmd_analyze_codebooks(&cfg, &flags)?,
        ];
        for o in &outcomes {
            let state = if o.skipped { "skipped" } else { "ran" };
            println!("  {:<18} {state:<8} {} outputs, {:.2} s", o.manifest.command, o.manifest.outputs.len(), o.manifest.wall_time_s);
        }
        if round == "second" {
            for line in outcomes.iter().flat_map(|o| o.lines()) {
                println!("  {line}");
            }
        }
    }
    Ok(())
}
