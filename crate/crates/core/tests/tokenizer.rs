mod common;

use common::tiny;
use neurovq::models::tokenizer::codebook_usage;
use neurovq::models::{train_classifier, train_tokenizer, TokenizerConfig};

/// Default architecture (F = 4, K = 256, D = 64) on a small session.
fn trained() -> (neurovq::data::SessionData, neurovq::models::Tokenizer, neurovq::models::TokenizerLog) {
    let session = tiny::session("A", "1", 1, 1);
    let cfg = TokenizerConfig { epochs: 6, series_per_epoch: 2048, batch_size: 32, ..TokenizerConfig::default() };
    let (tok, log) = train_tokenizer(&session.train, &session.val, &cfg, 0).unwrap();
    (session, tok, log)
}

#[test]
fn training_reconstructs_held_out_series_and_uses_the_codebook() {
    let (session, tok, log) = trained();
    let mse: Vec<f64> = log.epochs.iter().map(|e| e.val_recon_mse).collect();
    let last = *mse.last().unwrap();
    assert!(last < 0.25, "held-out mse {mse:?}");
    assert!(last < log.initial_val_mse, "{} -> {last}", log.initial_val_mse);
    // the first epoch is the unquantized warm-up; the codebook is set after it
    for w in mse[1..].windows(2).take(4) {
        assert!(w[1] <= w[0] * 1.05, "held-out mse rose more than 5 %: {mse:?}");
    }
    let flat: Vec<f32> = session.test.iter().flat_map(|m| m.data.iter().copied()).collect();
    assert!(tok.reconstruction_mse(&flat, session.window).unwrap() < 0.25);

    let tokens = tok.tokenize_all(&session.train).unwrap();
    let used = codebook_usage(&tok, &tokens);
    assert!(used > tok.codebook().len() / 2, "{used} of {} codewords used", tok.codebook().len());
}

#[test]
fn classifier_training_leaves_the_codebook_alone_and_repeats_per_seed() {
    let (session, tok, _) = trained();
    let before = tok.codebook().clone();
    let cfg = tiny::configs().classifier;
    let train = tok.tokenize_all(&session.train).unwrap();
    let val = tok.tokenize_all(&session.val).unwrap();
    let dirs: Vec<_> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for d in &dirs {
        let (cls, _) = train_classifier(&train, &val, &cfg, tok.codebook().len(), 4).unwrap();
        cls.save(d.path()).unwrap();
    }
    assert_eq!(tok.codebook(), &before);
    assert!(tok.codebook().is_frozen());
    assert_eq!(tok.codebook().encode(), before.encode());
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("classifier.nvck")).unwrap();
    assert_eq!(read(&dirs[0]), read(&dirs[1]));
}
