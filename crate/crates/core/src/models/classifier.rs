//! Token transformer: a temporal stage over each sensor's token sequence with
//! shared weights, mean-pooled to one vector per sensor, then a spatial stage
//! over the sensor vectors, mean-pooled again into a linear head.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::common::{argmax, rng, uniform};
use super::fit::{fit, BufferUpdates, FitConfig, FitLog, Trainable};
use super::tokenizer::Tokens;
use crate::binio;
use crate::data::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::numerics::{checkpoint, Graph, NodeId, ParamStore, Real, Tensor};

const LN_EPS: f64 = 1e-5;
const INFER_BATCH: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub temporal_layers: usize,
    pub spatial_layers: usize,
    /// Feed-forward width; `None` means four times `embed_dim`.
    pub ff_dim: Option<usize>,
    pub dropout: f64,
    pub classes: usize,
    /// Adds a learned per-sensor vector before the spatial stage. This ties
    /// the model to a fixed sensor count and order.
    pub sensor_embedding: bool,
    pub fit: FitConfig,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            embed_dim: 64,
            heads: 4,
            temporal_layers: 2,
            spatial_layers: 2,
            ff_dim: None,
            dropout: 0.1,
            classes: NUM_CLASSES,
            sensor_embedding: false,
            fit: FitConfig::default(),
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embedding dim {} must be a positive multiple of {} heads",
                self.embed_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.classes < 2 || self.ff() == 0 {
            return Err(Error::Config("need at least two classes and a non-empty feed-forward layer".into()));
        }
        self.fit.validate()
    }

    pub fn ff(&self) -> usize {
        self.ff_dim.unwrap_or(4 * self.embed_dim)
    }
}

/// Input geometry fixed at initialisation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenShape {
    /// Codebook size `K`.
    pub vocab: usize,
    /// Tokens per sensor `T'`.
    pub len: usize,
    /// Sensor count; only binding when the sensor embedding is enabled.
    pub sensors: usize,
}

fn block_params<T: Real>(store: &mut ParamStore<T>, r: &mut rand_chacha::ChaCha8Rng, prefix: &str, e: usize, ff: usize) {
    let ln = |store: &mut ParamStore<T>, name: &str| {
        store.insert(format!("{prefix}.{name}.g"), Tensor::full(vec![e], T::one()), true).unwrap();
        store.insert(format!("{prefix}.{name}.b"), Tensor::zeros(vec![e]), true).unwrap();
    };
    ln(store, "ln1");
    ln(store, "ln2");
    let mut lin = |store: &mut ParamStore<T>, name: &str, fin: usize, fout: usize| {
        let bound = 1.0 / (fin as f64).sqrt();
        store.insert(format!("{prefix}.{name}.w"), uniform(r, &[fin, fout], bound), true).unwrap();
        store.insert(format!("{prefix}.{name}.b"), Tensor::zeros(vec![fout]), true).unwrap();
    };
    for name in ["q", "k", "v", "o"] {
        lin(store, name, e, e);
    }
    lin(store, "ff1", e, ff);
    lin(store, "ff2", ff, e);
}

pub fn init_params<T: Real>(cfg: &ClassifierConfig, shape: TokenShape, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    if shape.vocab == 0 || shape.len == 0 || shape.sensors == 0 {
        return Err(Error::invalid(format!("empty token shape {shape:?}")));
    }
    let e = cfg.embed_dim;
    let mut r = rng(seed, 4);
    let mut store = ParamStore::new();
    store.insert("tok_embed", uniform(&mut r, &[shape.vocab, e], 1.0), true)?;
    store.insert("pos", uniform(&mut r, &[shape.len, e], 0.5), true)?;
    if cfg.sensor_embedding {
        store.insert("sensor_embed", uniform(&mut r, &[shape.sensors, e], 0.5), true)?;
    }
    for l in 0..cfg.temporal_layers {
        block_params(&mut store, &mut r, &format!("temporal.{l}"), e, cfg.ff());
    }
    for l in 0..cfg.spatial_layers {
        block_params(&mut store, &mut r, &format!("spatial.{l}"), e, cfg.ff());
    }
    for stage in ["temporal", "spatial"] {
        store.insert(format!("{stage}.ln.g"), Tensor::full(vec![e], T::one()), true)?;
        store.insert(format!("{stage}.ln.b"), Tensor::zeros(vec![e]), true)?;
    }
    let bound = 1.0 / (e as f64).sqrt();
    store.insert("head.w", uniform(&mut r, &[e, cfg.classes], bound), true)?;
    store.insert("head.b", Tensor::zeros(vec![cfg.classes]), true)?;
    Ok(store)
}

fn p<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, name: &str) -> Result<NodeId> {
    let id = store
        .id(name)
        .ok_or_else(|| Error::invalid(format!("classifier parameter `{name}` missing")))?;
    Ok(g.param(store, id))
}

fn lin<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, name: &str, x: NodeId) -> Result<NodeId> {
    let w = p(g, store, &format!("{name}.w"))?;
    let b = p(g, store, &format!("{name}.b"))?;
    g.linear(x, w, Some(b))
}

fn norm<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, name: &str, x: NodeId) -> Result<NodeId> {
    let gamma = p(g, store, &format!("{name}.g"))?;
    let beta = p(g, store, &format!("{name}.b"))?;
    g.layer_norm(x, gamma, beta, LN_EPS)
}

/// Pre-norm encoder block on `[N, L, E]`.
fn block<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, cfg: &ClassifierConfig, prefix: &str, x: NodeId) -> Result<NodeId> {
    let h = norm(g, store, &format!("{prefix}.ln1"), x)?;
    let q = lin(g, store, &format!("{prefix}.q"), h)?;
    let k = lin(g, store, &format!("{prefix}.k"), h)?;
    let v = lin(g, store, &format!("{prefix}.v"), h)?;
    let a = g.attention(q, k, v, cfg.heads)?;
    let a = lin(g, store, &format!("{prefix}.o"), a)?;
    let a = g.dropout(a, cfg.dropout)?;
    let x = g.add(x, a)?;
    let h = norm(g, store, &format!("{prefix}.ln2"), x)?;
    let h = lin(g, store, &format!("{prefix}.ff1"), h)?;
    let h = g.gelu(h);
    let h = lin(g, store, &format!("{prefix}.ff2"), h)?;
    let h = g.dropout(h, cfg.dropout)?;
    g.add(x, h)
}

/// Logits `[B, C]` for a batch of token grids sharing one shape.
pub fn logits_graph<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, cfg: &ClassifierConfig, batch: &[&Tokens]) -> Result<NodeId> {
    let first = batch.first().ok_or_else(|| Error::invalid("empty classifier batch"))?;
    let (s, l) = (first.sensors, first.len);
    if batch.iter().any(|t| t.sensors != s || t.len != l) {
        return Err(Error::invalid("token grids in one batch must share a shape"));
    }
    let pos_id = store.id("pos").ok_or_else(|| Error::invalid("classifier parameter `pos` missing"))?;
    let trained_len = store.get(pos_id).shape()[0];
    if l != trained_len {
        return Err(Error::invalid(format!(
            "classifier was built for {trained_len} tokens per sensor, got {l}"
        )));
    }
    let b = batch.len();
    let e = cfg.embed_dim;
    let idx: Vec<usize> = batch.iter().flat_map(|t| t.indices.iter().map(|&i| i as usize)).collect();
    let table = p(g, store, "tok_embed")?;
    let mut x = g.embedding(table, &idx, &[b * s, l])?;
    let pos = g.param(store, pos_id);
    x = g.add(x, pos)?;
    x = g.dropout(x, cfg.dropout)?;
    for layer in 0..cfg.temporal_layers {
        x = block(g, store, cfg, &format!("temporal.{layer}"), x)?;
    }
    x = norm(g, store, "temporal.ln", x)?;
    x = g.mean_axis(x, 1)?;
    x = g.reshape(x, &[b, s, e])?;
    if cfg.sensor_embedding {
        let se = p(g, store, "sensor_embed")?;
        if g.shape(se)[0] != s {
            return Err(Error::invalid(format!(
                "sensor embedding was built for {} sensors, got {s}",
                g.shape(se)[0]
            )));
        }
        x = g.add(x, se)?;
    }
    for layer in 0..cfg.spatial_layers {
        x = block(g, store, cfg, &format!("spatial.{layer}"), x)?;
    }
    x = norm(g, store, "spatial.ln", x)?;
    x = g.mean_axis(x, 1)?;
    lin(g, store, "head", x)
}

/// Trained token classifier.
#[derive(Clone, Debug)]
pub struct TokenClassifier {
    pub config: ClassifierConfig,
    pub shape: TokenShape,
    pub params: ParamStore<f32>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ClassifierConfig,
    shape: TokenShape,
}

impl TokenClassifier {
    pub fn new(config: ClassifierConfig, shape: TokenShape, seed: u64) -> Result<Self> {
        let params = init_params(&config, shape, seed)?;
        Ok(TokenClassifier { config, shape, params })
    }

    /// Eval-mode logits, `C` values per token grid.
    pub fn logits(&self, tokens: &[Tokens]) -> Result<Vec<f32>> {
        logits_with(&self.config, &self.params, tokens)
    }

    pub fn predict(&self, tokens: &[Tokens]) -> Result<Vec<usize>> {
        let c = self.config.classes;
        Ok(self.logits(tokens)?.chunks_exact(c).map(argmax).collect())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        checkpoint::save(&dir.join("classifier.nvck"), &self.params)?;
        let header = Header {
            config: self.config.clone(),
            shape: self.shape,
        };
        binio::write_atomic(&dir.join("classifier.json"), serde_json::to_string_pretty(&header)?.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let json = dir.join("classifier.json");
        if !json.exists() {
            return Err(Error::MissingArtifact {
                path: json,
                command: "train-classifier".into(),
            });
        }
        let header: Header = serde_json::from_slice(&binio::read_file(&json)?)?;
        let mut model = TokenClassifier::new(header.config, header.shape, 0)?;
        checkpoint::load_into(&dir.join("classifier.nvck"), &mut model.params)?;
        Ok(model)
    }
}

fn logits_with(cfg: &ClassifierConfig, store: &ParamStore<f32>, tokens: &[Tokens]) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(tokens.len() * cfg.classes);
    for chunk in tokens.chunks(INFER_BATCH) {
        let refs: Vec<&Tokens> = chunk.iter().collect();
        let mut g = Graph::inference();
        let y = logits_graph(&mut g, store, cfg, &refs)?;
        out.extend_from_slice(g.value(y).data());
    }
    Ok(out)
}

struct Model<'a>(&'a ClassifierConfig);

impl Trainable for Model<'_> {
    type Item = Tokens;

    fn forward(&self, g: &mut Graph<f32>, store: &ParamStore<f32>, batch: &[&Tokens]) -> Result<(NodeId, BufferUpdates)> {
        Ok((logits_graph(g, store, self.0, batch)?, Vec::new()))
    }

    fn predict(&self, store: &ParamStore<f32>, items: &[Tokens]) -> Result<Vec<usize>> {
        let c = self.0.classes;
        Ok(logits_with(self.0, store, items)?.chunks_exact(c).map(argmax).collect())
    }
}

/// Trains on token grids from a frozen tokenizer, keeping the parameters of
/// the epoch with the best validation accuracy.
pub fn train_classifier(
    train: &[Tokens],
    val: &[Tokens],
    cfg: &ClassifierConfig,
    vocab: usize,
    seed: u64,
) -> Result<(TokenClassifier, FitLog)> {
    let first = train
        .first()
        .ok_or_else(|| Error::invalid("classifier training needs at least one token grid"))?;
    let shape = TokenShape {
        vocab,
        len: first.len,
        sensors: first.sensors,
    };
    let mut model = TokenClassifier::new(cfg.clone(), shape, seed)?;
    let log = fit(&Model(cfg), &mut model.params, train, val, &cfg.fit, seed, "classifier")?;
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::data::Split;
    use crate::numerics::gradcheck::{self, GradCheckOptions};
    use crate::numerics::Mode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(sensors: usize, len: usize, vocab: usize, seed: u64) -> Tokens {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tokens {
            sensors,
            len,
            indices: (0..sensors * len).map(|_| r.random_range(0..vocab as u16)).collect(),
            label: (seed % 4) as u8,
            session: Arc::from("A1"),
            trial: 0,
            split: Split::Train,
        }
    }

    fn small() -> ClassifierConfig {
        ClassifierConfig {
            embed_dim: 8,
            heads: 2,
            temporal_layers: 1,
            spatial_layers: 1,
            ..ClassifierConfig::default()
        }
    }

    #[test]
    fn default_shapes_give_four_logits() {
        let cfg = ClassifierConfig::default();
        let shape = TokenShape { vocab: 256, len: 128, sensors: 128 };
        let m = TokenClassifier::new(cfg, shape, 1).unwrap();
        let logits = m.logits(&[grid(128, 128, 256, 3)]).unwrap();
        assert_eq!(logits.len(), 4);
        assert!(logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn permuting_sensors_keeps_logits() {
        let shape = TokenShape { vocab: 16, len: 6, sensors: 5 };
        let m = TokenClassifier::new(small(), shape, 2).unwrap();
        let t = grid(5, 6, 16, 4);
        let mut p = t.clone();
        for (dst, src) in [4, 2, 0, 3, 1].into_iter().enumerate() {
            p.row_mut(dst).copy_from_slice(t.row(src));
        }
        let a = m.logits(&[t]).unwrap();
        let b = m.logits(&[p]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-5 * (1.0 + x.abs()), "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn single_sensor_and_repeated_inference() {
        let shape = TokenShape { vocab: 16, len: 6, sensors: 5 };
        let m = TokenClassifier::new(small(), shape, 2).unwrap();
        let one = [grid(1, 6, 16, 9)];
        let a = m.logits(&one).unwrap();
        assert_eq!(a.len(), 4);
        assert_eq!(a, m.logits(&one).unwrap());
    }

    #[test]
    fn bad_indices_and_lengths_are_rejected() {
        let shape = TokenShape { vocab: 16, len: 6, sensors: 2 };
        let m = TokenClassifier::new(small(), shape, 2).unwrap();
        let mut t = grid(2, 6, 16, 1);
        t.indices[3] = 16;
        assert!(m.logits(&[t]).is_err());
        assert!(m.logits(&[grid(2, 5, 16, 1)]).is_err());
    }

    #[test]
    fn full_graph_matches_finite_differences() {
        let cfg = ClassifierConfig { dropout: 0.1, ..small() };
        let shape = TokenShape { vocab: 10, len: 4, sensors: 2 };
        let store: ParamStore<f64> = init_params(&cfg, shape, 5).unwrap();
        let batch: Vec<Tokens> = (0..3).map(|i| grid(2, 4, 10, 20 + i)).collect();
        let labels: Vec<usize> = batch.iter().map(|t| t.label as usize).collect();
        let opts = GradCheckOptions { mode: Mode::Train, ..GradCheckOptions::default() };
        let report = gradcheck::check(&store, opts, |g, s| {
            let refs: Vec<&Tokens> = batch.iter().collect();
            let y = logits_graph(g, s, &cfg, &refs)?;
            g.cross_entropy(y, &labels)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }

    #[test]
    fn sensor_embedding_fixes_the_sensor_count() {
        let cfg = ClassifierConfig { sensor_embedding: true, ..small() };
        let shape = TokenShape { vocab: 16, len: 6, sensors: 3 };
        let m = TokenClassifier::new(cfg, shape, 2).unwrap();
        assert!(m.logits(&[grid(3, 6, 16, 1)]).is_ok());
        assert!(m.logits(&[grid(4, 6, 16, 1)]).is_err());
    }
}
