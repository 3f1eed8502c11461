//! Trains the tokenizer on one synthetic session and reports held-out
//! reconstruction error, per-epoch progress and codebook usage.
//!
//!     RUST_LOG=info cargo run --release --example train_tokenizer -- [compression] [epochs]

use std::time::Instant;

use neurovq::cli::{Preset, RunConfig};
use neurovq::data::prepare_session;
use neurovq::models::tokenizer::codebook_usage;
use neurovq::models::{train_tokenizer, TokenizerConfig};
use neurovq::synth::generate;

fn main() -> neurovq::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let run = RunConfig::preset(Preset::Desk);
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().expect("integer argument"));
    let cfg = TokenizerConfig {
        compression: args.next().unwrap_or(run.models.tokenizer.compression),
        epochs: args.next().unwrap_or(run.models.tokenizer.epochs),
        ..run.models.tokenizer.clone()
    };

    let raw = generate(&run.synth.configs()[0])?;
    let session = prepare_session(&raw, &run.pipeline, &run.split, run.window_ms)?;
    drop(raw);
    println!("{}: {} train / {} val / {} test mini-trials", session.key, session.train.len(), session.val.len(), session.test.len());

    let t0 = Instant::now();
    let (tok, log) = train_tokenizer(&session.train, &session.val, &cfg, 0)?;
    println!("F = {}, K = {}, D = {}; trained in {:.1} s", cfg.compression, cfg.codebook_size, cfg.codeword_dim, t0.elapsed().as_secs_f64());
    println!("held-out mse before training {:.4}", log.initial_val_mse);
    for e in &log.epochs {
        println!("  epoch {}: loss {:.4}, train mse {:.4}, held-out mse {:.4}", e.epoch, e.train_loss, e.train_recon_mse, e.val_recon_mse);
    }

    let t1 = Instant::now();
    let tokens = tok.tokenize_all(&session.test)?;
    println!(
        "tokenized {} test mini-trials into {}x{} grids in {:.1} s; {} of {} codewords used",
        tokens.len(),
        tokens[0].sensors,
        tokens[0].len,
        t1.elapsed().as_secs_f64(),
        codebook_usage(&tok, &tokens),
        tok.codebook().len()
    );
    Ok(())
}
