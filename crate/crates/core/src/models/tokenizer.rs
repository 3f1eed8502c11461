//! Per-series vector-quantized autoencoder: strided convolutional encoder,
//! nearest-codeword quantization with a straight-through gradient, and a
//! transposed-convolution decoder.

use std::path::Path;
use std::sync::Arc;

use log::info;
use serde::{Deserialize, Serialize};

use super::codebook::{nearest_rows, Codebook};
use super::common::{ensure_finite, permutation, rng, step_seed, uniform};
use crate::binio;
use crate::data::{AccessLog, MiniTrial, Sample, Split};
use crate::error::{Error, Result};
use crate::numerics::{checkpoint, AdamConfig, AdamState, Graph, Mode, NodeId, ParamStore, Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    /// Input samples per token (`F`).
    pub compression: usize,
    pub codeword_dim: usize,
    pub codebook_size: usize,
    /// Commitment cost `β`.
    pub beta: f64,
    /// Widths of the two hidden encoder layers; the decoder mirrors them.
    pub channels: [usize; 2],
    pub epochs: usize,
    pub batch_size: usize,
    /// Series drawn (without replacement) from the pooled training sensors
    /// per epoch; 0 uses all of them.
    pub series_per_epoch: usize,
    /// Held-out series used for the per-epoch reconstruction score.
    pub val_series: usize,
    /// Leading epochs trained as a plain autoencoder (no quantization); the
    /// codebook is initialised from encoder outputs when they end.
    pub warmup_epochs: usize,
    pub adam: AdamConfig,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            compression: 4,
            codeword_dim: 64,
            codebook_size: 256,
            beta: 0.25,
            channels: [32, 64],
            epochs: 10,
            batch_size: 64,
            series_per_epoch: 8192,
            val_series: 512,
            warmup_epochs: 1,
            adam: AdamConfig::default(),
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.compression == 0 || self.codeword_dim == 0 || self.codebook_size == 0 {
            return Err(Error::Config("compression, codeword dim and codebook size must be positive".into()));
        }
        if self.channels.contains(&0) || self.batch_size == 0 {
            return Err(Error::Config("channel widths and batch size must be positive".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!("commitment cost {} must be non-negative", self.beta)));
        }
        Ok(())
    }

    /// Three strides with product `F`, largest first.
    pub fn strides(&self) -> [usize; 3] {
        let mut f = self.compression;
        let mut primes = Vec::new();
        let mut p = 2;
        while f > 1 {
            while f % p == 0 {
                primes.push(p);
                f /= p;
            }
            p += 1;
        }
        let mut bins = [1usize; 3];
        for q in primes.into_iter().rev() {
            let smallest = (0..3).min_by_key(|&i| bins[i]).unwrap();
            bins[smallest] *= q;
        }
        bins.sort_unstable_by(|a, b| b.cmp(a));
        bins
    }

    pub fn tokens_per_window(&self, samples: usize) -> Result<usize> {
        if samples == 0 || samples % self.compression != 0 {
            return Err(Error::invalid(format!(
                "series length {samples} is not divisible by the compression factor {}",
                self.compression
            )));
        }
        Ok(samples / self.compression)
    }
}

/// Kernel and padding that map length `L` to exactly `L / stride`.
fn kernel_for(stride: usize) -> (usize, usize) {
    match stride {
        1 => (3, 1),
        s if s % 2 == 0 => (2 * s, s / 2),
        s => (s, 0),
    }
}

fn widths(cfg: &TokenizerConfig) -> [usize; 4] {
    [1, cfg.channels[0], cfg.channels[1], cfg.codeword_dim]
}

pub fn init_params<T: Real>(cfg: &TokenizerConfig, seed: u64) -> ParamStore<T> {
    let mut r = rng(seed, 1);
    let mut store = ParamStore::new();
    let w = widths(cfg);
    for (i, &s) in cfg.strides().iter().enumerate() {
        let (k, _) = kernel_for(s);
        let bound = 1.0 / ((w[i] * k) as f64).sqrt();
        store.insert(format!("enc.{i}.w"), uniform(&mut r, &[w[i + 1], w[i], k], bound), true).unwrap();
        store.insert(format!("enc.{i}.b"), uniform(&mut r, &[w[i + 1]], bound), true).unwrap();
    }
    for (j, &s) in cfg.strides().iter().enumerate().rev() {
        let (k, _) = kernel_for(s);
        let (cin, cout) = (w[j + 1], w[j]);
        let bound = 1.0 / ((cout * k) as f64).sqrt();
        store.insert(format!("dec.{j}.w"), uniform(&mut r, &[cin, cout, k], bound), true).unwrap();
        store.insert(format!("dec.{j}.b"), uniform(&mut r, &[cout], bound), true).unwrap();
    }
    let kk = cfg.codebook_size as f64;
    store
        .insert("codebook", uniform(&mut r, &[cfg.codebook_size, cfg.codeword_dim], 1.0 / kk), true)
        .unwrap();
    store
}

fn p<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, name: &str) -> Result<NodeId> {
    let id = store
        .id(name)
        .ok_or_else(|| Error::invalid(format!("tokenizer parameter `{name}` missing")))?;
    Ok(g.param(store, id))
}

/// `x [N, 1, T]` → latents `[N, D, T/F]`.
pub fn encode_graph<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, cfg: &TokenizerConfig, x: NodeId) -> Result<NodeId> {
    let mut h = x;
    for (i, &s) in cfg.strides().iter().enumerate() {
        let (_, pad) = kernel_for(s);
        let w = p(g, store, &format!("enc.{i}.w"))?;
        let b = p(g, store, &format!("enc.{i}.b"))?;
        h = g.conv1d(h, w, Some(b), s, pad)?;
        if i < 2 {
            h = g.gelu(h);
        }
    }
    Ok(h)
}

/// Latents `[N, D, T/F]` → reconstruction `[N, 1, T]`.
pub fn decode_graph<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, cfg: &TokenizerConfig, z: NodeId) -> Result<NodeId> {
    let mut h = z;
    for (j, &s) in cfg.strides().iter().enumerate().rev() {
        let (_, pad) = kernel_for(s);
        let w = p(g, store, &format!("dec.{j}.w"))?;
        let b = p(g, store, &format!("dec.{j}.b"))?;
        h = g.conv_transpose1d(h, w, Some(b), s, pad)?;
        if j > 0 {
            h = g.gelu(h);
        }
    }
    Ok(h)
}

/// How the decoder input is tied to the encoder output.
pub enum StraightThrough<T> {
    /// `z + sg(zq − z)`: forward value `zq`, gradient copied to `z`.
    StopGradient,
    /// `z + δ` with a constant `δ`. With `δ = zq − z` taken at the current
    /// parameters this has the same value and gradient as
    /// [`StraightThrough::StopGradient`] but is smooth, so finite differences
    /// can check the copied-gradient path.
    FixedOffset(Tensor<T>),
    /// Quantization bypassed: the decoder sees `z` and only the
    /// reconstruction term is trained.
    Bypass,
}

/// Nodes of one tokenizer forward pass.
pub struct VqForward {
    pub loss: NodeId,
    pub recon_mse: NodeId,
    pub reconstruction: NodeId,
    /// Encoder output flattened to `[N·T', D]`.
    pub latents: NodeId,
    /// Selected codebook rows `[N·T', D]`.
    pub quantized: NodeId,
    pub indices: Vec<usize>,
}

/// Encoder, quantizer, decoder and the three-term loss
/// `mse(x, x̂) + ‖sg(z) − zq‖² + β‖z − sg(zq)‖²`, the two latent terms
/// averaged over latent vectors (so `D` times an element-wise mean).
///
/// `indices` overrides the nearest-codeword assignment (used by gradient
/// checks to stay on one side of every decision boundary).
pub fn vq_forward<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &TokenizerConfig,
    x: NodeId,
    indices: Option<Vec<usize>>,
    st: StraightThrough<T>,
) -> Result<VqForward> {
    let z = encode_graph(g, store, cfg, x)?;
    let s = g.shape(z).to_vec();
    let (n, d, len) = (s[0], s[1], s[2]);
    let zt = g.permute(z, &[0, 2, 1])?;
    let flat = g.reshape(zt, &[n * len, d])?;
    let cb = p(g, store, "codebook")?;
    let indices = match indices {
        Some(i) => i,
        None => nearest_rows(g.value(flat).data(), g.value(cb).data(), cfg.codebook_size, d),
    };
    let zq = g.embedding(cb, &indices, &[n * len])?;
    let sg_z = g.stop_gradient(flat);
    let codebook_term = sq_norm_mean(g, sg_z, zq, d)?;
    let sg_zq = g.stop_gradient(zq);
    let commit = sq_norm_mean(g, flat, sg_zq, d)?;
    let bypass = matches!(st, StraightThrough::Bypass);
    let dec_in = match st {
        StraightThrough::StopGradient => {
            let diff = g.sub(zq, flat)?;
            let diff = g.stop_gradient(diff);
            g.add(flat, diff)?
        }
        StraightThrough::FixedOffset(delta) => {
            let delta = g.input(delta);
            g.add(flat, delta)?
        }
        StraightThrough::Bypass => flat,
    };
    let dec_in = g.reshape(dec_in, &[n, len, d])?;
    let dec_in = g.permute(dec_in, &[0, 2, 1])?;
    let rec = decode_graph(g, store, cfg, dec_in)?;
    let recon = g.mse(rec, x)?;
    let loss = if bypass {
        recon
    } else {
        let commit = g.scale(commit, cfg.beta);
        let l = g.add(recon, codebook_term)?;
        g.add(l, commit)?
    };
    Ok(VqForward {
        loss,
        recon_mse: recon,
        reconstruction: rec,
        latents: flat,
        quantized: zq,
        indices,
    })
}

/// Mean over rows of `‖a − b‖²` for `[rows × d]` operands.
fn sq_norm_mean<T: Real>(g: &mut Graph<T>, a: NodeId, b: NodeId, d: usize) -> Result<NodeId> {
    let m = g.mse(a, b)?;
    Ok(g.scale(m, d as f64))
}

/// [`vq_forward`]'s loss with every stop-gradient operand replaced by a
/// constant: `z0` for the latents and `zq0` for the selected rows, both taken
/// at some base parameters. There it equals the real loss in value and
/// gradient, and unlike the real loss it is smooth, so finite differences
/// can check it.
pub fn frozen_vq_loss<T: Real>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    cfg: &TokenizerConfig,
    x: &Tensor<T>,
    idx: &[usize],
    z0: &Tensor<T>,
    zq0: &Tensor<T>,
) -> Result<NodeId> {
    let xn = g.input(x.clone());
    let z = encode_graph(g, s, cfg, xn)?;
    let sh = g.shape(z).to_vec();
    let zt = g.permute(z, &[0, 2, 1])?;
    let flat = g.reshape(zt, &[sh[0] * sh[2], sh[1]])?;
    let cb = p(g, s, "codebook")?;
    let zq = g.embedding(cb, idx, &[idx.len()])?;
    let z0 = g.input(z0.clone());
    let zq0 = g.input(zq0.clone());
    let delta = g.sub(zq0, z0)?;
    let delta = g.stop_gradient(delta);
    let dec_in = g.add(flat, delta)?;
    let dec_in = g.reshape(dec_in, &[sh[0], sh[2], sh[1]])?;
    let dec_in = g.permute(dec_in, &[0, 2, 1])?;
    let rec = decode_graph(g, s, cfg, dec_in)?;
    let recon = g.mse(rec, xn)?;
    let codebook_term = sq_norm_mean(g, z0, zq, sh[1])?;
    let commit = sq_norm_mean(g, flat, zq0, sh[1])?;
    let commit = g.scale(commit, cfg.beta);
    let l = g.add(recon, codebook_term)?;
    g.add(l, commit)
}

/// Token indices of one mini-trial, `[sensors × len]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokens {
    pub sensors: usize,
    pub len: usize,
    pub indices: Vec<u16>,
    pub label: u8,
    pub session: Arc<str>,
    pub trial: usize,
    pub split: Split,
}

impl Sample for Tokens {
    fn label(&self) -> u8 {
        self.label
    }
    fn session(&self) -> &str {
        &self.session
    }
    fn split(&self) -> Split {
        self.split
    }
}

impl Tokens {
    /// Carries label and provenance over from the source mini-trial.
    pub fn from_indices(mt: &MiniTrial, len: usize, indices: Vec<u16>) -> Self {
        Tokens {
            sensors: mt.sensors,
            len,
            indices,
            label: mt.label,
            session: Arc::clone(&mt.session),
            trial: mt.trial,
            split: mt.split,
        }
    }

    pub fn row_mut(&mut self, sensor: usize) -> &mut [u16] {
        &mut self.indices[sensor * self.len..(sensor + 1) * self.len]
    }

    pub fn row(&self, sensor: usize) -> &[u16] {
        &self.indices[sensor * self.len..(sensor + 1) * self.len]
    }
}

/// One sensor's token sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub sensor: usize,
    pub indices: Vec<u16>,
}

impl Tokens {
    pub fn sequences(&self) -> Vec<TokenSequence> {
        (0..self.sensors)
            .map(|s| TokenSequence {
                sensor: s,
                indices: self.row(s).to_vec(),
            })
            .collect()
    }
}

/// Trained encoder/decoder weights with their codebook.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub config: TokenizerConfig,
    pub params: ParamStore<f32>,
    codebook: Codebook,
}

/// Reconstruction scores recorded while training.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenizerLog {
    /// Validation reconstruction MSE before the first update.
    pub initial_val_mse: f64,
    pub epochs: Vec<TokenizerEpoch>,
    /// Series drawn for gradient steps, counted per source mini-trial.
    #[serde(skip)]
    pub access: AccessLog,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_recon_mse: f64,
    pub val_recon_mse: f64,
}

const INFER_BATCH: usize = 256;

impl Tokenizer {
    /// Wraps trained parameters; the codebook is read from the `codebook`
    /// entry and frozen only when `freeze` is set.
    pub fn from_params(config: TokenizerConfig, params: ParamStore<f32>, freeze: bool) -> Result<Self> {
        config.validate()?;
        let id = params
            .id("codebook")
            .ok_or_else(|| Error::invalid("parameters lack a codebook"))?;
        let t = params.get(id);
        let cb = Codebook::new(t.shape()[0], t.shape()[1], t.to_vec())?;
        Ok(Tokenizer {
            config,
            params,
            codebook: if freeze { cb.freeze() } else { cb },
        })
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    fn check_series(&self, samples: usize) -> Result<usize> {
        self.config.tokens_per_window(samples)
    }

    /// Latents `[T/F × D]` of one univariate series.
    pub fn encode(&self, series: &[f32]) -> Result<Vec<f32>> {
        self.check_series(series.len())?;
        self.encode_flat(series, series.len())
    }

    /// `[N × T]` series → `[N·T/F × D]` latents.
    fn encode_flat(&self, flat: &[f32], t: usize) -> Result<Vec<f32>> {
        let n = flat.len() / t;
        let mut g = Graph::inference();
        let x = g.input(Tensor::new(vec![n, 1, t], flat.to_vec())?);
        let z = encode_graph(&mut g, &self.params, &self.config, x)?;
        let zt = g.permute(z, &[0, 2, 1])?;
        Ok(g.value(zt).to_vec())
    }

    /// Nearest-codeword indices for latents `[M × D]`.
    pub fn quantize(&self, latents: &[f32]) -> Result<Vec<usize>> {
        self.codebook.quantize(latents)
    }

    /// Reconstruction of a series from codebook rows `[T/F × D]`.
    pub fn decode(&self, quantized: &[f32]) -> Result<Vec<f32>> {
        let d = self.config.codeword_dim;
        if quantized.is_empty() || quantized.len() % d != 0 {
            return Err(Error::invalid(format!(
                "{} values are not whole {d}-dim latents",
                quantized.len()
            )));
        }
        self.decode_flat(quantized, 1)
    }

    fn decode_flat(&self, quantized: &[f32], n: usize) -> Result<Vec<f32>> {
        let d = self.config.codeword_dim;
        let len = quantized.len() / (n * d);
        let mut g = Graph::inference();
        let z = g.input(Tensor::new(vec![n, len, d], quantized.to_vec())?);
        let z = g.permute(z, &[0, 2, 1])?;
        let rec = decode_graph(&mut g, &self.params, &self.config, z)?;
        Ok(g.value(rec).to_vec())
    }

    /// Encode, quantize and decode `[N × T]` series in one pass.
    pub fn reconstruct_flat(&self, flat: &[f32], t: usize) -> Result<Vec<f32>> {
        self.check_series(t)?;
        let n = flat.len() / t;
        let z = self.encode_flat(flat, t)?;
        let (_, rows) = self.codebook.quantize_with_rows(&z)?;
        self.decode_flat(&rows, n)
    }

    /// Token indices of `[N × T]` series, `[N × T/F]`.
    pub fn tokenize_flat(&self, flat: &[f32], t: usize) -> Result<Vec<u16>> {
        if !self.codebook.is_frozen() {
            return Err(Error::invalid(
                "the codebook must be frozen before tokenizing; finish tokenizer training first",
            ));
        }
        self.check_series(t)?;
        let mut out = Vec::with_capacity(flat.len() / self.config.compression);
        for chunk in flat.chunks(INFER_BATCH * t) {
            let z = self.encode_flat(chunk, t)?;
            out.extend(self.codebook.quantize(&z)?.into_iter().map(|i| i as u16));
        }
        Ok(out)
    }

    /// Every sensor of a mini-trial tokenized independently.
    pub fn tokenize(&self, mt: &MiniTrial) -> Result<Tokens> {
        let indices = self.tokenize_flat(&mt.data, mt.samples)?;
        Ok(Tokens::from_indices(mt, mt.samples / self.config.compression, indices))
    }

    pub fn tokenize_all(&self, trials: &[MiniTrial]) -> Result<Vec<Tokens>> {
        let Some(first) = trials.first() else {
            return Ok(Vec::new());
        };
        let (s, t) = (first.sensors, first.samples);
        let per = (INFER_BATCH / s).max(1);
        let mut out = Vec::with_capacity(trials.len());
        for group in trials.chunks(per) {
            let mut flat = Vec::with_capacity(group.len() * s * t);
            for mt in group {
                if mt.sensors != s || mt.samples != t {
                    return Err(Error::invalid("mini-trials of differing shape cannot be tokenized together"));
                }
                flat.extend_from_slice(&mt.data);
            }
            let idx = self.tokenize_flat(&flat, t)?;
            let len = t / self.config.compression;
            for (mt, chunk) in group.iter().zip(idx.chunks(s * len)) {
                out.push(Tokens::from_indices(mt, len, chunk.to_vec()));
            }
        }
        Ok(out)
    }

    /// Token row produced by an all-zero (failed) sensor.
    pub fn zero_series_tokens(&self, samples: usize) -> Result<Vec<u16>> {
        self.tokenize_flat(&vec![0.0; samples], samples)
    }

    /// Mean squared reconstruction error over the given series.
    pub fn reconstruction_mse(&self, flat: &[f32], t: usize) -> Result<f64> {
        let mut se = 0.0;
        for chunk in flat.chunks(INFER_BATCH * t) {
            let rec = self.reconstruct_flat(chunk, t)?;
            se += rec.iter().zip(chunk).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>();
        }
        Ok(se / flat.len() as f64)
    }

    /// Writes `tokenizer.nvck`, `codebook.nvcb` and `tokenizer.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::save(&dir.join("tokenizer.nvck"), &self.params)?;
        self.codebook.save(&dir.join("codebook.nvcb"))?;
        binio::write_atomic(&dir.join("tokenizer.json"), &serde_json::to_vec_pretty(&self.config)?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join("tokenizer.json");
        if !cfg_path.exists() {
            return Err(Error::MissingArtifact {
                path: cfg_path,
                command: "train-tokenizer".into(),
            });
        }
        let config: TokenizerConfig = serde_json::from_slice(&binio::read_file(&cfg_path)?)?;
        let mut params = init_params::<f32>(&config, 0);
        checkpoint::load_into(&dir.join("tokenizer.nvck"), &mut params)?;
        let tok = Tokenizer::from_params(config, params, true)?;
        let stored = Codebook::load(&dir.join("codebook.nvcb"))?;
        if stored.data() != tok.codebook.data() {
            return Err(Error::format(dir.join("codebook.nvcb"), "codebook disagrees with tokenizer checkpoint"));
        }
        Ok(tok)
    }
}

/// Every `(mini-trial, sensor)` series of a split, as a flat pool.
fn series_pool(trials: &[MiniTrial]) -> Vec<(usize, usize)> {
    trials
        .iter()
        .enumerate()
        .flat_map(|(i, m)| (0..m.sensors).map(move |s| (i, s)))
        .collect()
}

fn gather(trials: &[MiniTrial], picks: &[(usize, usize)]) -> Vec<f32> {
    let mut out = Vec::with_capacity(picks.len() * trials[0].samples);
    for &(i, s) in picks {
        out.extend_from_slice(trials[i].row(s));
    }
    out
}

/// Self-supervised training on sensors pooled across the training split.
///
/// The codebook starts from encoder outputs of random training series and
/// is updated only through the codebook loss; unused codewords are left
/// alone. The returned codebook is frozen.
pub fn train_tokenizer(train: &[MiniTrial], val: &[MiniTrial], cfg: &TokenizerConfig, seed: u64) -> Result<(Tokenizer, TokenizerLog)> {
    cfg.validate()?;
    let first = train
        .first()
        .ok_or_else(|| Error::invalid("tokenizer training needs at least one mini-trial"))?;
    let t = first.samples;
    cfg.tokens_per_window(t)?;
    let mut r = rng(seed, 2);
    let mut store = init_params::<f32>(cfg, seed);

    let pool = series_pool(train);
    let held_src = if val.is_empty() { train } else { val };
    let held_pool = series_pool(held_src);
    let held: Vec<(usize, usize)> = permutation(&mut r, held_pool.len())
        .into_iter()
        .take(cfg.val_series.max(1))
        .map(|i| held_pool[i])
        .collect();
    let held_flat = gather(held_src, &held);

    let mut log = TokenizerLog {
        initial_val_mse: Tokenizer::from_params(cfg.clone(), store.clone(), false)?.reconstruction_mse(&held_flat, t)?,
        epochs: Vec::new(),
        access: AccessLog::default(),
    };
    info!("tokenizer: {} training series, initial held-out mse {:.4}", pool.len(), log.initial_val_mse);
    if cfg.warmup_epochs == 0 {
        init_codebook(&mut store, cfg, train, &pool, t, &mut r)?;
    }

    let mut adam = AdamState::new(cfg.adam, &store)?;
    let per_epoch = if cfg.series_per_epoch == 0 { pool.len() } else { cfg.series_per_epoch.min(pool.len()) };
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let order = permutation(&mut r, pool.len());
        let (mut loss_sum, mut rec_sum, mut batches) = (0.0, 0.0, 0usize);
        for (b, chunk) in order[..per_epoch].chunks(cfg.batch_size).enumerate() {
            let picks: Vec<(usize, usize)> = chunk.iter().map(|&i| pool[i]).collect();
            let x = Tensor::new(vec![picks.len(), 1, t], gather(train, &picks))?;
            let mut g = Graph::new(Mode::Train, step_seed(seed, step));
            let xn = g.input(x);
            let st = if epoch < cfg.warmup_epochs { StraightThrough::Bypass } else { StraightThrough::StopGradient };
            let fwd = vq_forward(&mut g, &store, cfg, xn, None, st)?;
            let loss = g.value(fwd.loss).item() as f64;
            let rec = g.value(fwd.recon_mse).item() as f64;
            ensure_finite(loss, "tokenizer loss", epoch, b, || {
                format!("reconstruction mse {rec}, codebook finite: {}", store.get(store.id("codebook").unwrap()).all_finite())
            })?;
            let grads = g.backward(fwd.loss)?;
            adam.step(&mut store, &grads)?;
            for &(i, _) in &picks {
                log.access.record(&train[i]);
            }
            loss_sum += loss;
            rec_sum += rec;
            batches += 1;
            step += 1;
        }
        if epoch + 1 == cfg.warmup_epochs {
            init_codebook(&mut store, cfg, train, &pool, t, &mut r)?;
        }
        let val_mse = Tokenizer::from_params(cfg.clone(), store.clone(), false)?.reconstruction_mse(&held_flat, t)?;
        ensure_finite(val_mse, "held-out reconstruction mse", epoch, batches, || "after epoch".into())?;
        let e = TokenizerEpoch {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            train_recon_mse: rec_sum / batches.max(1) as f64,
            val_recon_mse: val_mse,
        };
        info!(
            "tokenizer epoch {epoch}: loss {:.4}, train mse {:.4}, held-out mse {:.4}",
            e.train_loss, e.train_recon_mse, e.val_recon_mse
        );
        log.epochs.push(e);
    }
    Ok((Tokenizer::from_params(cfg.clone(), store, true)?, log))
}

/// Sets the codebook to encoder outputs at random positions of random
/// training series.
fn init_codebook(
    store: &mut ParamStore<f32>,
    cfg: &TokenizerConfig,
    train: &[MiniTrial],
    pool: &[(usize, usize)],
    t: usize,
    r: &mut rand_chacha::ChaCha8Rng,
) -> Result<()> {
    let len = t / cfg.compression;
    let d = cfg.codeword_dim;
    let need = (cfg.codebook_size.div_ceil(len) * 4).min(pool.len());
    let picks: Vec<(usize, usize)> = permutation(r, pool.len()).into_iter().take(need).map(|i| pool[i]).collect();
    let tok = Tokenizer::from_params(cfg.clone(), store.clone(), false)?;
    let z = tok.encode_flat(&gather(train, &picks), t)?;
    let m = z.len() / d;
    let rows = permutation(r, m);
    let mut cb = Vec::with_capacity(cfg.codebook_size * d);
    for j in 0..cfg.codebook_size {
        let src = rows[j % m];
        cb.extend_from_slice(&z[src * d..(src + 1) * d]);
    }
    store.set(store.id("codebook").unwrap(), Tensor::new(vec![cfg.codebook_size, d], cb)?)
}

/// Distinct codewords hit when tokenizing `trials`.
pub fn codebook_usage(tok: &Tokenizer, tokens: &[Tokens]) -> usize {
    let mut used = vec![false; tok.codebook().len()];
    for t in tokens {
        for &i in &t.indices {
            used[i as usize] = true;
        }
    }
    used.iter().filter(|&&u| u).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TokenizerConfig {
        TokenizerConfig {
            compression: 4,
            codeword_dim: 3,
            codebook_size: 5,
            channels: [2, 3],
            ..TokenizerConfig::default()
        }
    }

    #[test]
    fn strides_multiply_to_compression() {
        for f in [1, 2, 3, 4, 8, 12, 16, 30] {
            let cfg = TokenizerConfig { compression: f, ..TokenizerConfig::default() };
            assert_eq!(cfg.strides().iter().product::<usize>(), f, "F = {f}");
        }
        let cfg = TokenizerConfig { compression: 16, ..TokenizerConfig::default() };
        assert_eq!(cfg.strides(), [4, 2, 2]);
    }

    #[test]
    fn latent_and_reconstruction_lengths() {
        let cfg = TokenizerConfig::default();
        let tok = Tokenizer::from_params(cfg.clone(), init_params(&cfg, 1), true).unwrap();
        let series: Vec<f32> = (0..512).map(|i| (i as f32 * 0.1).sin()).collect();
        let z = tok.encode(&series).unwrap();
        assert_eq!(z.len(), 128 * 64);
        let (_, q) = tok.codebook().quantize_with_rows(&z).unwrap();
        assert_eq!(tok.decode(&q).unwrap().len(), 512);
        assert!(tok.encode(&series[..510]).is_err());
    }

    #[test]
    fn unit_compression_keeps_length() {
        let cfg = TokenizerConfig { compression: 1, ..tiny() };
        let tok = Tokenizer::from_params(cfg.clone(), init_params(&cfg, 1), true).unwrap();
        assert_eq!(tok.encode(&[0.5; 10]).unwrap().len(), 10 * 3);
    }

    #[test]
    fn zero_decoder_gives_zero_output() {
        let cfg = tiny();
        let mut params = init_params::<f32>(&cfg, 4);
        let ids: Vec<_> = params.ids().filter(|&id| params.name(id).starts_with("dec.")).collect();
        for id in ids {
            let z = Tensor::zeros(params.get(id).shape().to_vec());
            params.set(id, z).unwrap();
        }
        let tok = Tokenizer::from_params(cfg, params, true).unwrap();
        assert!(tok.decode(&[0.0; 3 * 4]).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unfrozen_codebook_refuses_to_tokenize() {
        let cfg = tiny();
        let tok = Tokenizer::from_params(cfg.clone(), init_params(&cfg, 1), false).unwrap();
        assert!(tok.tokenize_flat(&[0.0; 8], 8).is_err());
    }

    #[test]
    fn beta_zero_drops_commitment() {
        let cfg = TokenizerConfig { beta: 0.0, ..tiny() };
        let store = init_params::<f64>(&cfg, 2);
        let mut g = Graph::new(Mode::Train, 0);
        let x = g.input(Tensor::from_f64([2, 1, 8], &[0.3; 16]).unwrap());
        let f = vq_forward(&mut g, &store, &cfg, x, None, StraightThrough::StopGradient).unwrap();
        let (z, zq) = (g.value(f.latents).data(), g.value(f.quantized).data());
        let rows = z.len() / cfg.codeword_dim;
        let cbt: f64 = z.iter().zip(zq).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / rows as f64;
        let want = g.value(f.recon_mse).item() + cbt;
        assert!((g.value(f.loss).item() - want).abs() < 1e-12);
    }

    fn trial(sensors: usize, samples: usize, seed: u64) -> MiniTrial {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        MiniTrial {
            sensors,
            samples,
            data: (0..sensors * samples).map(|_| r.random_range(-2.0..2.0)).collect(),
            label: (seed % 4) as u8,
            session: Arc::from("A1"),
            trial: seed as usize,
            split: Split::Train,
        }
    }

    fn batch(n: usize, t: usize, seed: u64) -> Tensor<f64> {
        let mt = trial(n, t, seed);
        Tensor::from_f64([n, 1, t], &mt.data.iter().map(|&v| v as f64).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn straight_through_copies_the_decoder_gradient() {
        let cfg = tiny();
        let store = init_params::<f64>(&cfg, 3);
        let x = batch(3, 8, 1);
        let mut g = Graph::new(Mode::Train, 0);
        let xn = g.input(x.clone());
        let a = vq_forward(&mut g, &store, &cfg, xn, None, StraightThrough::StopGradient).unwrap();
        let delta: Vec<f64> = g.value(a.quantized).data().iter().zip(g.value(a.latents).data()).map(|(q, z)| q - z).collect();
        let delta = Tensor::new(g.value(a.latents).shape().to_vec(), delta).unwrap();
        let ga = g.backward(a.loss).unwrap();

        let mut h = Graph::new(Mode::Train, 0);
        let xn = h.input(x);
        let b = vq_forward(&mut h, &store, &cfg, xn, Some(a.indices.clone()), StraightThrough::FixedOffset(delta)).unwrap();
        assert!((g.value(a.loss).item() - h.value(b.loss).item()).abs() < 1e-12);
        let gb = h.backward(b.loss).unwrap();
        let mut encoder_grad = 0.0;
        for id in store.ids() {
            let (u, v) = (ga.param(id).unwrap().data(), gb.param(id).unwrap().data());
            for (p, q) in u.iter().zip(v) {
                assert!((p - q).abs() <= 1e-12 * p.abs().max(1.0), "{}", store.name(id));
            }
            if store.name(id).starts_with("enc.") {
                encoder_grad += u.iter().map(|v| v.abs()).sum::<f64>();
            }
        }
        assert!(encoder_grad > 0.0);
    }

    #[test]
    fn full_tokenizer_matches_finite_differences() {
        use crate::numerics::gradcheck::{self, GradCheckOptions};
        let cfg = tiny();
        let store = init_params::<f64>(&cfg, 5);
        let x = batch(2, 8, 2);
        let mut g = Graph::new(Mode::Train, 0);
        let xn = g.input(x.clone());
        let f = vq_forward(&mut g, &store, &cfg, xn, None, StraightThrough::StopGradient).unwrap();
        let (z0, zq0) = (g.value(f.latents).clone(), g.value(f.quantized).clone());
        let real = g.backward(f.loss).unwrap();

        let mut h = Graph::new(Mode::Train, 0);
        let l = frozen_vq_loss(&mut h, &store, &cfg, &x, &f.indices, &z0, &zq0).unwrap();
        assert!((h.value(l).item() - g.value(f.loss).item()).abs() < 1e-12);
        let frozen = h.backward(l).unwrap();
        for id in store.ids() {
            for (u, v) in real.param(id).unwrap().data().iter().zip(frozen.param(id).unwrap().data()) {
                assert!((u - v).abs() <= 1e-12 * u.abs().max(1.0), "{}", store.name(id));
            }
        }
        let report = gradcheck::check(&store, GradCheckOptions::default(), |g, s| frozen_vq_loss(g, s, &cfg, &x, &f.indices, &z0, &zq0)).unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");
        assert!(report.checked > 50);
    }

    #[test]
    fn perfect_fit_has_zero_loss() {
        let cfg = tiny();
        let mut store = init_params::<f64>(&cfg, 6);
        let ids: Vec<_> = store.ids().filter(|&id| store.name(id).starts_with("dec.")).collect();
        for id in ids {
            store.set(id, Tensor::zeros(store.get(id).shape().to_vec())).unwrap();
        }
        let x = Tensor::zeros(vec![1, 1, 8]);
        let mut g = Graph::new(Mode::Train, 0);
        let xn = g.input(x.clone());
        let z = encode_graph(&mut g, &store, &cfg, xn).unwrap();
        let zt = g.permute(z, &[0, 2, 1]).unwrap();
        let mut cb = g.value(zt).to_vec();
        cb.resize(cfg.codebook_size * cfg.codeword_dim, 9.0);
        let id = store.id("codebook").unwrap();
        store.set(id, Tensor::new(vec![cfg.codebook_size, cfg.codeword_dim], cb).unwrap()).unwrap();
        let mut g = Graph::new(Mode::Train, 0);
        let xn = g.input(x);
        let f = vq_forward(&mut g, &store, &cfg, xn, None, StraightThrough::StopGradient).unwrap();
        assert_eq!(g.value(f.loss).item(), 0.0);
    }

    #[test]
    fn tokens_depend_only_on_each_series() {
        let cfg = tiny();
        let tok = Tokenizer::from_params(cfg.clone(), init_params(&cfg, 7), true).unwrap();
        let mut mt = trial(4, 16, 3);
        mt.data[16..32].fill(0.0);
        let copy = mt.row(2).to_vec();
        mt.data[48..64].copy_from_slice(&copy);
        let tokens = tok.tokenize(&mt).unwrap();
        assert_eq!(tokens.row(1), tok.zero_series_tokens(16).unwrap().as_slice());
        assert_eq!(tokens.row(2), tokens.row(3));
        let c = tokens.row(1)[0];
        assert!(tokens.row(1).iter().all(|&v| v == c));

        let order = [2, 0, 3, 1];
        let mut perm = mt.clone();
        for (dst, &src) in order.iter().enumerate() {
            perm.data[dst * 16..(dst + 1) * 16].copy_from_slice(mt.row(src));
        }
        let pt = tok.tokenize(&perm).unwrap();
        for (dst, &src) in order.iter().enumerate() {
            assert_eq!(pt.row(dst), tokens.row(src));
        }
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let cfg = TokenizerConfig { epochs: 2, batch_size: 8, series_per_epoch: 32, val_series: 8, ..tiny() };
        let train: Vec<MiniTrial> = (0..8).map(|i| trial(3, 16, i)).collect();
        let val: Vec<MiniTrial> = (8..10).map(|i| trial(3, 16, i)).collect();
        let (a, la) = train_tokenizer(&train, &val, &cfg, 4).unwrap();
        let (b, _) = train_tokenizer(&train, &val, &cfg, 4).unwrap();
        let (c, _) = train_tokenizer(&train, &val, &cfg, 5).unwrap();
        assert!(a.codebook().is_frozen());
        assert_eq!(a.codebook().data(), b.codebook().data());
        assert_ne!(a.codebook().data(), c.codebook().data());
        assert_eq!(la.epochs.len(), 2);
        assert_eq!(la.access.count("A1", Split::Train), 2 * 24);
        assert!(train_tokenizer(&[], &val, &cfg, 4).is_err());
    }
}
