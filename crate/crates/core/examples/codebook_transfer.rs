//! Trains tokenizers on several synthetic sessions and matches each codebook
//! against the first, with a moment-matched Gaussian codebook as a floor.
//! The MSE matrices and match tables land in a temporary directory.
//!
//!     cargo run --release --example codebook_transfer

use neurovq::analysis::{export_analysis, gaussian_codebook_like, highlighted, match_codebooks};
use neurovq::cli::{Preset, RunConfig};
use neurovq::data::prepare_session;
use neurovq::models::{train_tokenizer, Codebook};
use neurovq::synth::generate;

fn main() -> neurovq::Result<()> {
    let cfg = RunConfig::preset(Preset::Desk);
    let mut books: Vec<(String, Codebook)> = Vec::new();
    for synth in cfg.synth.configs().iter().take(3) {
        let session = prepare_session(&generate(synth)?, &cfg.pipeline, &cfg.split, cfg.window_ms)?;
        let (tok, _) = train_tokenizer(&session.train, &session.val, &cfg.models.tokenizer, 0)?;
        println!("trained {} ({} codewords of dimension {})", synth.key(), tok.codebook().len(), tok.codebook().dim());
        books.push((synth.key(), tok.codebook().clone()));
    }

    let out = std::env::temp_dir().join("neurovq-codebooks");
    let (oid, original) = &books[0];
    for (nid, new) in &books {
        let r = match_codebooks(new, nid, original, oid)?;
        println!("{nid} → {oid}: average MSE {:.4}, {} of {} subselected", r.average_mse, r.num_subselected, original.len());
        for m in highlighted(&r) {
            println!("    codeword {:>3} ↔ {:>3}  mse {:.4}", m.new_index, m.original_index, m.mse);
        }
        export_analysis(&out.join(format!("{nid}_to_{oid}")), &r, new, original)?;
    }
    let noise = gaussian_codebook_like(&books[1].1, 1)?;
    let r = match_codebooks(&noise, "gaussian", original, oid)?;
    println!("gaussian → {oid}: average MSE {:.4}, {} subselected", r.average_mse, r.num_subselected);
    println!("tables in {}", out.display());
    Ok(())
}
