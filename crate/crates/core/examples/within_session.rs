//! Trains the token pipeline and the convolutional baseline on one synthetic
//! session with the desk preset and reports test accuracy against the
//! matched-filter ceiling.
//!
//!     RUST_LOG=info cargo run --release --example within_session -- [seed]

use std::time::Instant;

use neurovq::cli::{Preset, RunConfig};
use neurovq::data::prepare_session;
use neurovq::models::{accuracy, train_classifier, train_cnn, train_tokenizer};
use neurovq::synth::{generate, oracle_accuracy};

fn main() -> neurovq::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let seed = std::env::args().nth(1).map_or(0, |a| a.parse().expect("integer seed"));
    let cfg = RunConfig::preset(Preset::Desk);
    let synth = &cfg.synth.configs()[0];
    let models = &cfg.models;

    println!("{}: oracle accuracy {:.3}, chance 0.25", synth.key(), oracle_accuracy(synth)?);
    let raw = generate(synth)?;
    let session = prepare_session(&raw, &cfg.pipeline, &cfg.split, cfg.window_ms)?;
    drop(raw);
    let truth: Vec<u8> = session.test.iter().map(|m| m.label).collect();

    let t0 = Instant::now();
    let (tok, tlog) = train_tokenizer(&session.train, &session.val, &models.tokenizer, seed)?;
    let tokens = |part| tok.tokenize_all(part);
    let (train, val, test) = (tokens(&session.train)?, tokens(&session.val)?, tokens(&session.test)?);
    let (cls, log) = train_classifier(&train, &val, &models.classifier, tok.codebook().len(), seed)?;
    println!(
        "token pipeline: held-out reconstruction {:.3}, best epoch {}, val {:.3}, test {:.3} ({:.0} s)",
        tlog.epochs.last().map_or(f64::NAN, |e| e.val_recon_mse),
        log.best_epoch,
        log.best_val_accuracy,
        accuracy(&cls.predict(&test)?, &truth),
        t0.elapsed().as_secs_f64()
    );

    let t1 = Instant::now();
    let (cnn, log) = train_cnn(&session.train, &session.val, &models.cnn, seed)?;
    println!(
        "cnn baseline: best epoch {}, val {:.3}, test {:.3} ({:.0} s)",
        log.best_epoch,
        log.best_val_accuracy,
        accuracy(&cnn.predict(&session.test)?, &truth),
        t1.elapsed().as_secs_f64()
    );
    Ok(())
}
