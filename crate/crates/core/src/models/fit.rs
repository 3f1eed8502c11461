//! Supervised training loop with best-validation selection.

use log::info;
use serde::{Deserialize, Serialize};

use super::common::{accuracy, argmax, ensure_finite, permutation, rng, step_seed};
use crate::data::{AccessLog, Sample};
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, AdamState, Graph, Mode, NodeId, ParamId, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            epochs: 20,
            batch_size: 32,
            adam: AdamConfig::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitLog {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    /// Samples that contributed to gradient steps.
    #[serde(skip)]
    pub access: AccessLog,
}

/// Buffer values (batch-norm running statistics) produced by a training
/// forward pass, written back after the optimizer step.
pub(crate) type BufferUpdates = Vec<(ParamId, Tensor<f32>)>;

pub(crate) trait Trainable {
    type Item: Sample;
    /// Logits `[B, C]` for a batch.
    fn forward(&self, g: &mut Graph<f32>, store: &ParamStore<f32>, batch: &[&Self::Item]) -> Result<(NodeId, BufferUpdates)>;
    fn predict(&self, store: &ParamStore<f32>, items: &[Self::Item]) -> Result<Vec<usize>>;
    /// Projection applied after every optimizer step.
    fn constrain(&self, _store: &mut ParamStore<f32>) {}
}

/// Minimises cross-entropy; the parameters with the best validation accuracy
/// (earliest on ties) are left in `store`.
pub(crate) fn fit<M: Trainable>(
    model: &M,
    store: &mut ParamStore<f32>,
    train: &[M::Item],
    val: &[M::Item],
    cfg: &FitConfig,
    seed: u64,
    what: &str,
) -> Result<FitLog> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid(format!("{what} training needs at least one sample")));
    }
    let mut adam = AdamState::new(cfg.adam, store)?;
    let mut r = rng(seed, 3);
    let mut log = FitLog {
        best_val_accuracy: -1.0,
        ..FitLog::default()
    };
    let mut best = store.clone();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let order = permutation(&mut r, train.len());
        let (mut loss_sum, mut hits, mut batches) = (0.0, 0usize, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&M::Item> = chunk.iter().map(|&i| &train[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|s| s.label() as usize).collect();
            let mut g = Graph::new(Mode::Train, step_seed(seed, step));
            let (logits, buffers) = model.forward(&mut g, store, &batch)?;
            let loss = g.cross_entropy(logits, &labels)?;
            let lv = g.value(loss).item() as f64;
            ensure_finite(lv, &format!("{what} loss"), epoch, b, || {
                format!("logits finite: {}", g.value(logits).all_finite())
            })?;
            let lg = g.value(logits);
            let c = lg.shape()[1];
            hits += lg
                .data()
                .chunks_exact(c)
                .zip(&labels)
                .filter(|(row, &l)| argmax(row) == l)
                .count();
            let grads = g.backward(loss)?;
            adam.step(store, &grads)?;
            for (id, v) in buffers {
                store.set(id, v)?;
            }
            model.constrain(store);
            for s in &batch {
                log.access.record(*s);
            }
            loss_sum += lv;
            batches += 1;
            step += 1;
        }
        let val_accuracy = if val.is_empty() {
            0.0
        } else {
            let pred = model.predict(store, val)?;
            let truth: Vec<u8> = val.iter().map(|s| s.label()).collect();
            accuracy(&pred, &truth)
        };
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            train_accuracy: hits as f64 / train.len() as f64,
            val_accuracy,
        };
        info!(
            "{what} epoch {epoch}: loss {:.4}, train acc {:.3}, val acc {:.3}",
            rec.train_loss, rec.train_accuracy, rec.val_accuracy
        );
        if val.is_empty() || val_accuracy > log.best_val_accuracy {
            log.best_val_accuracy = val_accuracy;
            log.best_epoch = epoch;
            best = store.clone();
        }
        log.epochs.push(rec);
    }
    *store = best;
    Ok(log)
}
