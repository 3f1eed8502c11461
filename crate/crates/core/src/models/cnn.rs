//! Compact convolutional baseline: temporal filters, a depthwise spatial
//! filter spanning every sensor, a separable temporal convolution and a
//! linear head. The input shape is fixed when the model is built.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::common::{argmax, rng, uniform};
use super::fit::{fit, BufferUpdates, FitConfig, FitLog, Trainable};
use crate::binio;
use crate::data::{MiniTrial, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::numerics::{checkpoint, same_padding, Graph, Mode, NodeId, ParamStore, Real, Tensor};

const BN_EPS: f64 = 1e-3;
const INFER_BATCH: usize = 64;
const BN_LAYERS: [&str; 3] = ["bn1", "bn2", "bn3"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnConfig {
    pub f1: usize,
    pub depth: usize,
    pub f2: usize,
    /// Temporal kernel length in samples.
    pub kernel_len: usize,
    /// Kernel length of the separable block's depthwise convolution.
    pub separable_len: usize,
    pub pool1: usize,
    pub pool2: usize,
    pub dropout: f64,
    pub classes: usize,
    /// Per-filter norm bound on the spatial kernels.
    pub spatial_max_norm: f64,
    /// Per-class norm bound on the head weights.
    pub dense_max_norm: f64,
    /// Weight of the newest batch in the running batch-norm statistics.
    pub bn_momentum: f64,
    pub fit: FitConfig,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig {
            f1: 8,
            depth: 2,
            f2: 16,
            kernel_len: 64,
            separable_len: 16,
            pool1: 4,
            pool2: 8,
            dropout: 0.5,
            classes: NUM_CLASSES,
            spatial_max_norm: 1.0,
            dense_max_norm: 0.25,
            bn_momentum: 0.1,
            fit: FitConfig::default(),
        }
    }
}

/// Input geometry `[sensors × samples]` the network is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub sensors: usize,
    pub samples: usize,
}

impl CnnConfig {
    pub fn validate(&self, shape: InputShape) -> Result<()> {
        let positive = [self.f1, self.depth, self.f2, self.kernel_len, self.separable_len, self.pool1, self.pool2];
        if positive.contains(&0) || self.classes < 2 {
            return Err(Error::Config("CNN sizes must be positive with at least two classes".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("dropout must be in [0, 1) and momentum in [0, 1]".into()));
        }
        if self.kernel_len >= shape.samples {
            return Err(Error::Config(format!(
                "temporal kernel of {} samples must be shorter than the {}-sample window",
                self.kernel_len, shape.samples
            )));
        }
        if shape.sensors == 0 || self.flat_len(shape.samples) == 0 {
            return Err(Error::Config(format!("window {shape:?} too small for pooling {} × {}", self.pool1, self.pool2)));
        }
        self.fit.validate()
    }

    /// Length of the flattened feature vector entering the head.
    pub fn flat_len(&self, samples: usize) -> usize {
        self.f2 * (samples / self.pool1 / self.pool2)
    }
}

pub fn init_params<T: Real>(cfg: &CnnConfig, shape: InputShape, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate(shape)?;
    let mut r = rng(seed, 5);
    let mut store = ParamStore::new();
    let fd = cfg.f1 * cfg.depth;
    let fan = |n: usize| 1.0 / (n as f64).sqrt();
    store.insert("temporal.w", uniform(&mut r, &[cfg.f1, 1, 1, cfg.kernel_len], fan(cfg.kernel_len)), true)?;
    store.insert("spatial.w", uniform(&mut r, &[fd, 1, shape.sensors, 1], fan(shape.sensors)), true)?;
    store.insert("separable.w", uniform(&mut r, &[fd, 1, 1, cfg.separable_len], fan(cfg.separable_len)), true)?;
    store.insert("pointwise.w", uniform(&mut r, &[cfg.f2, fd, 1, 1], fan(fd)), true)?;
    for (name, c) in BN_LAYERS.into_iter().zip([cfg.f1, fd, cfg.f2]) {
        store.insert(format!("{name}.g"), Tensor::full(vec![c], T::one()), true)?;
        store.insert(format!("{name}.b"), Tensor::zeros(vec![c]), true)?;
        store.insert(format!("{name}.mean"), Tensor::zeros(vec![c]), false)?;
        store.insert(format!("{name}.var"), Tensor::full(vec![c], T::one()), false)?;
    }
    let flat = cfg.flat_len(shape.samples);
    store.insert("head.w", uniform(&mut r, &[flat, cfg.classes], fan(flat)), true)?;
    store.insert("head.b", Tensor::zeros(vec![cfg.classes]), true)?;
    apply_max_norm(cfg, &mut store);
    Ok(store)
}

fn p<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, name: &str) -> Result<NodeId> {
    let id = store
        .id(name)
        .ok_or_else(|| Error::invalid(format!("CNN parameter `{name}` missing")))?;
    Ok(g.param(store, id))
}

fn shape_of<T: Real>(store: &ParamStore<T>, name: &str) -> Result<Vec<usize>> {
    let id = store
        .id(name)
        .ok_or_else(|| Error::invalid(format!("CNN parameter `{name}` missing")))?;
    Ok(store.get(id).shape().to_vec())
}

fn batch_norm<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &CnnConfig,
    name: &str,
    x: NodeId,
    updates: &mut Vec<(String, Tensor<T>)>,
) -> Result<NodeId> {
    let gamma = p(g, store, &format!("{name}.g"))?;
    let beta = p(g, store, &format!("{name}.b"))?;
    let mean_id = store.id(&format!("{name}.mean")).expect("running mean");
    let var_id = store.id(&format!("{name}.var")).expect("running variance");
    if g.mode() == Mode::Eval {
        return g.batch_norm_eval(x, gamma, beta, store.get(mean_id), store.get(var_id), BN_EPS);
    }
    let (y, stats) = g.batch_norm_train(x, gamma, beta, BN_EPS)?;
    let m = T::lit(cfg.bn_momentum);
    let blend = |old: &Tensor<T>, new: &[T]| {
        let v = old.data().iter().zip(new).map(|(&o, &n)| o + m * (n - o)).collect();
        Tensor::new(old.shape().to_vec(), v).expect("same shape")
    };
    updates.push((format!("{name}.mean"), blend(store.get(mean_id), &stats.mean)));
    updates.push((format!("{name}.var"), blend(store.get(var_id), &stats.var)));
    Ok(y)
}

/// Logits `[B, C]` for `x [B, 1, S, T]`, with the running-statistic updates
/// of a train-mode pass.
pub fn logits_graph<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &CnnConfig,
    x: NodeId,
) -> Result<(NodeId, Vec<(String, Tensor<T>)>)> {
    let xs = g.shape(x).to_vec();
    let spatial = shape_of(store, "spatial.w")?;
    let flat = shape_of(store, "head.w")?[0];
    let expected_t = flat / cfg.f2 * cfg.pool1 * cfg.pool2;
    if xs.len() != 4 || xs[1] != 1 || xs[2] != spatial[2] || cfg.flat_len(xs[3]) != flat {
        return Err(Error::invalid(format!(
            "CNN was built for [{} sensors × {expected_t} samples] input, got {:?}",
            spatial[2],
            &xs[2.min(xs.len())..]
        )));
    }
    let b = xs[0];
    let mut updates = Vec::new();
    let (l, r) = same_padding(cfg.kernel_len);
    let w = p(g, store, "temporal.w")?;
    let mut h = g.conv2d(x, w, None, (1, 1), [0, 0, l, r], 1)?;
    h = batch_norm(g, store, cfg, "bn1", h, &mut updates)?;
    let w = p(g, store, "spatial.w")?;
    h = g.depthwise_conv2d(h, w, [0; 4])?;
    h = batch_norm(g, store, cfg, "bn2", h, &mut updates)?;
    h = g.elu(h);
    h = g.avg_pool2d(h, 1, cfg.pool1)?;
    h = g.dropout(h, cfg.dropout)?;
    let (l, r) = same_padding(cfg.separable_len);
    let w = p(g, store, "separable.w")?;
    h = g.depthwise_conv2d(h, w, [0, 0, l, r])?;
    let w = p(g, store, "pointwise.w")?;
    h = g.pointwise_conv2d(h, w, None)?;
    h = batch_norm(g, store, cfg, "bn3", h, &mut updates)?;
    h = g.elu(h);
    h = g.avg_pool2d(h, 1, cfg.pool2)?;
    h = g.dropout(h, cfg.dropout)?;
    h = g.reshape(h, &[b, flat])?;
    let w = p(g, store, "head.w")?;
    let bias = p(g, store, "head.b")?;
    Ok((g.linear(h, w, Some(bias))?, updates))
}

fn renorm<T: Real>(data: &mut [T], groups: impl Iterator<Item = Vec<usize>>, bound: f64) {
    for idx in groups {
        let norm = idx.iter().map(|&i| data[i].as_f64().powi(2)).sum::<f64>().sqrt();
        if norm > bound {
            let s = T::lit(bound / norm);
            idx.iter().for_each(|&i| data[i] *= s);
        }
    }
}

/// Rescales each spatial filter and each head column onto its norm ball.
pub fn apply_max_norm<T: Real>(cfg: &CnnConfig, store: &mut ParamStore<T>) {
    let id = store.id("spatial.w").expect("spatial kernel");
    let t = store.get(id);
    let per = t.numel() / t.shape()[0];
    let mut d = t.to_vec();
    renorm(&mut d, (0..t.shape()[0]).map(|f| (f * per..(f + 1) * per).collect()), cfg.spatial_max_norm);
    let shape = t.shape().to_vec();
    store.set(id, Tensor::new(shape, d).unwrap()).unwrap();

    let id = store.id("head.w").expect("head weights");
    let t = store.get(id);
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    let mut d = t.to_vec();
    renorm(&mut d, (0..cols).map(|c| (0..rows).map(|r| r * cols + c).collect()), cfg.dense_max_norm);
    let shape = t.shape().to_vec();
    store.set(id, Tensor::new(shape, d).unwrap()).unwrap();
}

/// Largest filter norms `(spatial, head)` currently in `store`.
pub fn max_norms<T: Real>(store: &ParamStore<T>) -> (f64, f64) {
    let t = store.get(store.id("spatial.w").expect("spatial kernel"));
    let per = t.numel() / t.shape()[0];
    let spatial = t
        .data()
        .chunks(per)
        .map(|f| f.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let t = store.get(store.id("head.w").expect("head weights"));
    let cols = t.shape()[1];
    let head = (0..cols)
        .map(|c| t.data().iter().skip(c).step_by(cols).map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    (spatial, head)
}

fn stack(batch: &[&MiniTrial]) -> Result<Tensor<f32>> {
    let (s, t) = (batch[0].sensors, batch[0].samples);
    if batch.iter().any(|m| m.sensors != s || m.samples != t) {
        return Err(Error::invalid("mini-trials in one batch must share a shape"));
    }
    let mut data = Vec::with_capacity(batch.len() * s * t);
    for m in batch {
        data.extend_from_slice(&m.data);
    }
    Tensor::new(vec![batch.len(), 1, s, t], data)
}

#[derive(Clone, Debug)]
pub struct Cnn {
    pub config: CnnConfig,
    pub shape: InputShape,
    pub params: ParamStore<f32>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: CnnConfig,
    shape: InputShape,
}

impl Cnn {
    pub fn new(config: CnnConfig, shape: InputShape, seed: u64) -> Result<Self> {
        let params = init_params(&config, shape, seed)?;
        Ok(Cnn { config, shape, params })
    }

    pub fn logits(&self, trials: &[MiniTrial]) -> Result<Vec<f32>> {
        logits_with(&self.config, &self.params, trials)
    }

    pub fn predict(&self, trials: &[MiniTrial]) -> Result<Vec<usize>> {
        let c = self.config.classes;
        Ok(self.logits(trials)?.chunks_exact(c).map(argmax).collect())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        checkpoint::save(&dir.join("cnn.nvck"), &self.params)?;
        let header = Header {
            config: self.config.clone(),
            shape: self.shape,
        };
        binio::write_atomic(&dir.join("cnn.json"), serde_json::to_string_pretty(&header)?.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let json = dir.join("cnn.json");
        if !json.exists() {
            return Err(Error::MissingArtifact {
                path: json,
                command: "train-cnn".into(),
            });
        }
        let header: Header = serde_json::from_slice(&binio::read_file(&json)?)?;
        let mut model = Cnn::new(header.config, header.shape, 0)?;
        checkpoint::load_into(&dir.join("cnn.nvck"), &mut model.params)?;
        Ok(model)
    }
}

fn logits_with(cfg: &CnnConfig, store: &ParamStore<f32>, trials: &[MiniTrial]) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(trials.len() * cfg.classes);
    for chunk in trials.chunks(INFER_BATCH) {
        let refs: Vec<&MiniTrial> = chunk.iter().collect();
        let mut g = Graph::inference();
        let x = g.input(stack(&refs)?);
        let (y, _) = logits_graph(&mut g, store, cfg, x)?;
        out.extend_from_slice(g.value(y).data());
    }
    Ok(out)
}

struct Model<'a>(&'a CnnConfig);

impl Trainable for Model<'_> {
    type Item = MiniTrial;

    fn forward(&self, g: &mut Graph<f32>, store: &ParamStore<f32>, batch: &[&MiniTrial]) -> Result<(NodeId, BufferUpdates)> {
        let x = g.input(stack(batch)?);
        let (y, updates) = logits_graph(g, store, self.0, x)?;
        let updates = updates
            .into_iter()
            .map(|(name, t)| (store.id(&name).expect("buffer"), t))
            .collect();
        Ok((y, updates))
    }

    fn predict(&self, store: &ParamStore<f32>, items: &[MiniTrial]) -> Result<Vec<usize>> {
        let c = self.0.classes;
        Ok(logits_with(self.0, store, items)?.chunks_exact(c).map(argmax).collect())
    }

    fn constrain(&self, store: &mut ParamStore<f32>) {
        apply_max_norm(self.0, store);
    }
}

/// Trains on raw mini-trials; the input shape is taken from the first one.
pub fn train_cnn(train: &[MiniTrial], val: &[MiniTrial], cfg: &CnnConfig, seed: u64) -> Result<(Cnn, FitLog)> {
    let first = train
        .first()
        .ok_or_else(|| Error::invalid("CNN training needs at least one mini-trial"))?;
    let shape = InputShape {
        sensors: first.sensors,
        samples: first.samples,
    };
    let mut model = Cnn::new(cfg.clone(), shape, seed)?;
    let log = fit(&Model(cfg), &mut model.params, train, val, &cfg.fit, seed, "cnn")?;
    Ok((model, log))
}
