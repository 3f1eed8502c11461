use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{AccessLog, MiniTrial, SessionData};
use crate::error::{Error, Result};
use crate::models::{accuracy, train_classifier, train_cnn, train_tokenizer, ClassifierConfig, Cnn, CnnConfig, TokenClassifier, Tokenizer, TokenizerConfig, Tokens};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    TokenPipeline,
    CnnBaseline,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::TokenPipeline => "token-pipeline",
            ModelKind::CnnBaseline => "cnn-baseline",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfigs {
    pub tokenizer: TokenizerConfig,
    pub classifier: ClassifierConfig,
    pub cnn: CnnConfig,
}

/// A trained model of either kind.
#[derive(Clone, Debug)]
pub enum TrainedModel {
    Tokens { tokenizer: Tokenizer, classifier: TokenClassifier },
    Cnn(Cnn),
}

impl TrainedModel {
    /// Trains on the train split of `data`, selecting on its validation
    /// split. Returns the union of every gradient step's data access.
    pub fn train(kind: ModelKind, data: &SessionData, cfgs: &ModelConfigs, seed: u64) -> Result<(Self, AccessLog)> {
        match kind {
            ModelKind::TokenPipeline => {
                let (tokenizer, tlog) = train_tokenizer(&data.train, &data.val, &cfgs.tokenizer, seed)?;
                let train = tokenizer.tokenize_all(&data.train)?;
                let val = tokenizer.tokenize_all(&data.val)?;
                let (classifier, clog) = train_classifier(&train, &val, &cfgs.classifier, tokenizer.codebook().len(), seed)?;
                let mut access = tlog.access;
                access.merge(&clog.access);
                Ok((TrainedModel::Tokens { tokenizer, classifier }, access))
            }
            ModelKind::CnnBaseline => {
                let (cnn, log) = train_cnn(&data.train, &data.val, &cfgs.cnn, seed)?;
                Ok((TrainedModel::Cnn(cnn), log.access))
            }
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            TrainedModel::Tokens { .. } => ModelKind::TokenPipeline,
            TrainedModel::Cnn(_) => ModelKind::CnnBaseline,
        }
    }

    pub fn predict(&self, trials: &[MiniTrial]) -> Result<Vec<usize>> {
        match self {
            TrainedModel::Tokens { tokenizer, classifier } => classifier.predict(&tokenizer.tokenize_all(trials)?),
            TrainedModel::Cnn(cnn) => cnn.predict(trials),
        }
    }

    /// Prepares repeated evaluation of `test` under different failed sets.
    pub fn evaluator<'a>(&'a self, test: &'a [MiniTrial]) -> Result<Evaluator<'a>> {
        let cache = match self {
            TrainedModel::Tokens { tokenizer, .. } => {
                let samples = test.first().map_or(0, |m| m.samples);
                let zero = if test.is_empty() { Vec::new() } else { tokenizer.zero_series_tokens(samples)? };
                Some((tokenizer.tokenize_all(test)?, zero))
            }
            TrainedModel::Cnn(_) => None,
        };
        Ok(Evaluator { model: self, test, cache })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        match self {
            TrainedModel::Tokens { tokenizer, classifier } => {
                tokenizer.save(dir)?;
                classifier.save(dir)
            }
            TrainedModel::Cnn(cnn) => cnn.save(dir),
        }
    }

    pub fn load(kind: ModelKind, dir: &Path) -> Result<Self> {
        match kind {
            ModelKind::TokenPipeline => {
                let tokenizer = Tokenizer::load(dir)?;
                let classifier = TokenClassifier::load(dir)?;
                if classifier.shape.vocab != tokenizer.codebook().len() {
                    return Err(Error::format(dir, "classifier vocabulary does not match the codebook"));
                }
                Ok(TrainedModel::Tokens { tokenizer, classifier })
            }
            ModelKind::CnnBaseline => Ok(TrainedModel::Cnn(Cnn::load(dir)?)),
        }
    }
}

/// Test-set accuracy under sensor failure. The token pipeline tokenizes the
/// intact test set once and swaps in the token row of an all-zero series for
/// every failed sensor, which is exactly what tokenizing the zeroed data
/// would produce since each sensor is tokenized independently.
pub struct Evaluator<'a> {
    model: &'a TrainedModel,
    test: &'a [MiniTrial],
    cache: Option<(Vec<Tokens>, Vec<u16>)>,
}

impl Evaluator<'_> {
    pub fn truth(&self) -> Vec<u8> {
        self.test.iter().map(|m| m.label).collect()
    }

    /// Tokens of the test set with `failed` sensors replaced.
    pub fn failed_tokens(&self, failed: &[usize]) -> Option<Vec<Tokens>> {
        let (tokens, zero) = self.cache.as_ref()?;
        Some(
            tokens
                .iter()
                .map(|t| {
                    let mut t = t.clone();
                    for &s in failed {
                        t.row_mut(s).copy_from_slice(zero);
                    }
                    t
                })
                .collect(),
        )
    }

    pub fn predict(&self, failed: &[usize]) -> Result<Vec<usize>> {
        if let Some(&bad) = failed.iter().find(|&&s| self.test.first().is_some_and(|m| s >= m.sensors)) {
            return Err(Error::invalid(format!("failed sensor {bad} out of range")));
        }
        match (self.model, self.failed_tokens(failed)) {
            (TrainedModel::Tokens { classifier, .. }, Some(tokens)) => classifier.predict(&tokens),
            _ => self.model.predict(&super::failure::zero_sensors(self.test, failed)?),
        }
    }

    pub fn accuracy(&self, failed: &[usize]) -> Result<f64> {
        Ok(accuracy(&self.predict(failed)?, &self.truth()))
    }
}
