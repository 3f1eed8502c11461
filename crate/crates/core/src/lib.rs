//! Decoders for multichannel neural time series: a vector-quantized
//! tokenizer with a sensor-agnostic token classifier, and a compact
//! convolutional baseline, plus the harness that scores both across
//! sessions, subjects and simulated sensor failure.
//!
//! ## Examples
//!
//! ```text
//! examples/
//! ├── synth_oracle.rs       # synthetic sessions and the oracle decoder
//! ├── preprocess.rs         # filtering, decimation, re-referencing, splits
//! ├── autodiff.rs           # the tape engine, gradient checks, Adam
//! ├── train_tokenizer.rs    # vector-quantized tokenizer on one session
//! ├── within_session.rs     # both pipelines trained and scored on A1
//! ├── failure_sweep.rs      # accuracy as sensors fail, all three cases
//! ├── codebook_transfer.rs  # matching codebooks across sessions
//! └── run_config.rs         # config files and resumable commands
//! ```
//!
//! Run one with `cargo run --release --example within_session`.

pub mod analysis;
pub mod binio;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod models;
pub mod numerics;
pub mod synth;

pub use error::{Error, Result};
