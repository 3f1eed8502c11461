//! The vector-quantized tokenizer, the token transformer classifier and the
//! convolutional baseline.

pub mod classifier;
pub mod cnn;
pub mod codebook;
mod common;
mod fit;
pub mod tokenizer;

pub use classifier::{train_classifier, ClassifierConfig, TokenClassifier, TokenShape};
pub use cnn::{train_cnn, Cnn, CnnConfig, InputShape};
pub use codebook::Codebook;
pub use common::{accuracy, argmax};
pub use fit::{EpochRecord, FitConfig, FitLog};
pub use tokenizer::{train_tokenizer, Tokenizer, TokenizerConfig, TokenizerLog, Tokens};
