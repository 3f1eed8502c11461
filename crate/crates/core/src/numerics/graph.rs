//! Define-by-run reverse-mode differentiation.
//!
//! Every operation computes its value eagerly and appends a node to the tape.
//! Parents always precede children, so reverse creation order is a valid
//! topological order and [`Graph::backward`] visits each node once.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, AttnGeom, Conv1dGeom, Conv2dGeom};
use super::real::{gemm, View};
use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Train mode samples dropout masks and uses batch statistics; eval mode is
/// deterministic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Padding of a 2-D convolution as `[top, bottom, left, right]`.
pub type Pad2d = [usize; 4];

/// Splits a kernel length into "same" padding (extra sample on the right for
/// even kernels).
pub fn same_padding(kernel: usize) -> (usize, usize) {
    let left = (kernel - 1) / 2;
    (left, kernel - 1 - left)
}

/// Batch statistics of one train-mode batch-norm application, used by the
/// caller to update running averages.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance.
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    MatMul(NodeId, NodeId),
    Conv1d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: Conv1dGeom,
    },
    ConvT1d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: Conv1dGeom,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: Conv2dGeom,
    },
    AvgPool2d {
        x: NodeId,
        kh: usize,
        kw: usize,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Softmax(NodeId),
    Elu(NodeId),
    Gelu(NodeId),
    Dropout {
        x: NodeId,
        mask: Vec<T>,
    },
    Embedding {
        table: NodeId,
        indices: Vec<usize>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        geom: AttnGeom,
        probs: Vec<T>,
    },
    SumAll(NodeId),
    MeanAll(NodeId),
    MeanAxis {
        x: NodeId,
        outer: usize,
        axis_len: usize,
        inner: usize,
    },
    Reshape(NodeId),
    Permute {
        x: NodeId,
        perm: Vec<usize>,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of eagerly evaluated operations.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    mode: Mode,
    track: bool,
    rng: ChaCha8Rng,
    bound: HashMap<ParamId, NodeId>,
}

/// Gradients of a scalar with respect to every leaf that requires them.
pub struct Gradients<T> {
    by_node: HashMap<usize, Tensor<T>>,
    by_param: HashMap<ParamId, NodeId>,
}

impl<T: Real> Gradients<T> {
    pub fn node(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.by_node.get(&id.0)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.by_param.get(&id).and_then(|n| self.by_node.get(&n.0))
    }
}

fn suffix_broadcast(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

impl<T: Real> Graph<T> {
    /// A graph that records gradients; `seed` drives dropout masks.
    pub fn new(mode: Mode, seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            mode,
            track: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            bound: HashMap::new(),
        }
    }

    /// Eval-mode graph without gradient bookkeeping.
    pub fn inference() -> Self {
        let mut g = Graph::new(Mode::Eval, 0);
        g.track = false;
        g
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn data(&self, id: NodeId) -> &[T] {
        self.nodes[id.0].value.data()
    }

    fn grad_flag(&self, parents: &[NodeId]) -> bool {
        self.track && parents.iter().any(|p| self.nodes[p.0].requires_grad)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[NodeId]) -> NodeId {
        let requires_grad = self.grad_flag(parents);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn err(&self, op: &'static str, detail: impl Into<String>) -> Error {
        Error::Shape {
            op,
            node: self.nodes.len(),
            detail: detail.into(),
        }
    }

    /// Constant input.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.track,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Binds a stored parameter, once per graph.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        if let Some(&n) = self.bound.get(&id) {
            return n;
        }
        let n = self.leaf(store.get(id).clone(), store.is_trainable(id));
        self.bound.insert(id, n);
        n
    }

    fn broadcast_binary(&mut self, name: &'static str, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if !suffix_broadcast(&sa, &sb) {
            return Err(self.err(name, format!("rhs {sb:?} is not a suffix of lhs {sa:?}")));
        }
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(da.len());
        for chunk in da.chunks_exact(db.len()) {
            out.extend(chunk.iter().zip(db).map(|(&x, &y)| f(x, y)));
        }
        Ok(Tensor::from_parts(sa, out))
    }

    /// Elementwise sum; `b` may broadcast over leading axes of `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let c = T::lit(c);
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    /// `a[..., K] · b[K, N] → [..., N]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(self.err("matmul", format!("cannot multiply {sa:?} by {sb:?}")));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = self.value(a).numel() / k;
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, T::one(), self.data(a), View::rows(0, k), self.data(b), View::rows(0, n), T::zero(), &mut out, View::rows(0, n));
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul(a, b), &[a, b]))
    }

    /// `x·w + b` over the last axis.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// 1-D convolution: `x [N, Cin, L]`, `w [Cout, Cin, K]`, optional bias `[Cout]`.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] || stride == 0 {
            return Err(self.err("conv1d", format!("input {sx:?} incompatible with kernel {sw:?} (stride {stride})")));
        }
        if sx[2] + 2 * pad < sw[2] {
            return Err(self.err("conv1d", format!("kernel {} longer than padded input {}", sw[2], sx[2] + 2 * pad)));
        }
        self.check_bias("conv1d", b, sw[0])?;
        let geom = Conv1dGeom {
            n: sx[0],
            cin: sx[1],
            len: sx[2],
            cout: sw[0],
            k: sw[2],
            stride,
            pad,
            lout: (sx[2] + 2 * pad - sw[2]) / stride + 1,
        };
        let out = kernels::conv1d_forward(self.data(x), self.data(w), b.map(|b| self.data(b)), geom);
        let v = Tensor::from_parts(vec![geom.n, geom.cout, geom.lout], out);
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(v, Op::Conv1d { x, w, b, geom }, &parents))
    }

    /// Transposed 1-D convolution: `x [N, Cin, L]`, `w [Cin, Cout, K]`; output
    /// length `(L − 1)·stride − 2·pad + K`.
    pub fn conv_transpose1d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[0] || stride == 0 {
            return Err(self.err("conv_transpose1d", format!("input {sx:?} incompatible with kernel {sw:?}")));
        }
        let full = (sx[2] - 1) * stride + sw[2];
        if full <= 2 * pad {
            return Err(self.err("conv_transpose1d", format!("padding {pad} consumes the whole output")));
        }
        self.check_bias("conv_transpose1d", b, sw[1])?;
        let geom = Conv1dGeom {
            n: sx[0],
            cin: sw[1],
            len: full - 2 * pad,
            cout: sx[1],
            k: sw[2],
            stride,
            pad,
            lout: sx[2],
        };
        let out = kernels::conv_t1d_forward(self.data(x), self.data(w), b.map(|b| self.data(b)), geom);
        let v = Tensor::from_parts(vec![geom.n, geom.cin, geom.len], out);
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(v, Op::ConvT1d { x, w, b, geom }, &parents))
    }

    /// Grouped 2-D convolution: `x [N, Cin, H, W]`, `w [Cout, Cin/groups, kh, kw]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: (usize, usize),
        pad: Pad2d,
        groups: usize,
    ) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let bad = sx.len() != 4
            || sw.len() != 4
            || groups == 0
            || sx[1] % groups != 0
            || sw[0] % groups != 0
            || sw[1] * groups != sx[1]
            || stride.0 == 0
            || stride.1 == 0;
        if bad {
            return Err(self.err(
                "conv2d",
                format!("input {sx:?} incompatible with kernel {sw:?} and {groups} groups"),
            ));
        }
        let (ph, pw) = (sx[2] + pad[0] + pad[1], sx[3] + pad[2] + pad[3]);
        if ph < sw[2] || pw < sw[3] {
            return Err(self.err("conv2d", format!("kernel {:?} larger than padded input {:?}", &sw[2..], [ph, pw])));
        }
        self.check_bias("conv2d", b, sw[0])?;
        let geom = Conv2dGeom {
            n: sx[0],
            cin: sx[1],
            h: sx[2],
            w: sx[3],
            cout: sw[0],
            kh: sw[2],
            kw: sw[3],
            sh: stride.0,
            sw: stride.1,
            pad,
            groups,
            hout: (ph - sw[2]) / stride.0 + 1,
            wout: (pw - sw[3]) / stride.1 + 1,
        };
        let out = kernels::conv2d_forward(self.data(x), self.data(w), b.map(|b| self.data(b)), geom);
        let v = Tensor::from_parts(vec![geom.n, geom.cout, geom.hout, geom.wout], out);
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(v, Op::Conv2d { x, w, b, geom }, &parents))
    }

    /// Depthwise convolution: each input channel convolved with its own
    /// `depth` kernels; `w [C·depth, 1, kh, kw]`.
    pub fn depthwise_conv2d(&mut self, x: NodeId, w: NodeId, pad: Pad2d) -> Result<NodeId> {
        let c = *self.shape(x).get(1).ok_or_else(|| self.err("depthwise_conv2d", "input must be rank 4"))?;
        self.conv2d(x, w, None, (1, 1), pad, c)
    }

    /// 1×1 convolution mixing channels: `w [Cout, Cin, 1, 1]`.
    pub fn pointwise_conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        if self.shape(w).len() != 4 || self.shape(w)[2..] != [1, 1] {
            return Err(self.err("pointwise_conv2d", format!("kernel {:?} is not 1x1", self.shape(w))));
        }
        self.conv2d(x, w, b, (1, 1), [0; 4], 1)
    }

    fn check_bias(&self, op: &'static str, b: Option<NodeId>, channels: usize) -> Result<()> {
        if let Some(b) = b {
            if self.shape(b) != [channels] {
                return Err(self.err(op, format!("bias {:?} must be [{channels}]", self.shape(b))));
            }
        }
        Ok(())
    }

    /// Non-overlapping average pooling over the last two axes of `[N, C, H, W]`.
    pub fn avg_pool2d(&mut self, x: NodeId, kh: usize, kw: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || kh == 0 || kw == 0 || s[2] < kh || s[3] < kw {
            return Err(self.err("avg_pool2d", format!("cannot pool {s:?} with ({kh}, {kw})")));
        }
        let out = kernels::avg_pool2d_forward(self.data(x), s[0] * s[1], s[2], s[3], kh, kw);
        let v = Tensor::from_parts(vec![s[0], s[1], s[2] / kh, s[3] / kw], out);
        Ok(self.push(v, Op::AvgPool2d { x, kh, kw }, &[x]))
    }

    fn channel_layout(&self, op: &'static str, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(self.err(op, format!("input {s:?} needs a channel axis")));
        }
        let c = s[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(self.err(op, format!("affine parameters must be [{c}]")));
        }
        let inner: usize = s[2..].iter().product();
        Ok((s[0], c, inner))
    }

    /// Batch normalization over axis 1 using batch statistics.
    pub fn batch_norm_train(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<(NodeId, BatchStats<T>)> {
        let (n, c, inner) = self.channel_layout("batch_norm", x, gamma, beta)?;
        let m = n * inner;
        if m < 2 {
            return Err(self.err("batch_norm", "needs at least two values per channel"));
        }
        let xd = self.data(x);
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for b in 0..n {
            for ci in 0..c {
                let s: T = xd[(b * c + ci) * inner..][..inner].iter().copied().sum();
                mean[ci] += s;
            }
        }
        let mf = T::lit(m as f64);
        mean.iter_mut().for_each(|v| *v /= mf);
        for b in 0..n {
            for ci in 0..c {
                let mu = mean[ci];
                let s: T = xd[(b * c + ci) * inner..][..inner].iter().map(|&v| (v - mu) * (v - mu)).sum();
                var[ci] += s;
            }
        }
        let inv_std: Vec<T> = var.iter().map(|&v| (v / mf + T::lit(eps)).sqrt().recip()).collect();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..n {
            for ci in 0..c {
                let base = (b * c + ci) * inner;
                for i in base..base + inner {
                    xhat[i] = (xd[i] - mean[ci]) * inv_std[ci];
                    out[i] = xhat[i] * gd[ci] + bd[ci];
                }
            }
        }
        let unbiased = var.iter().map(|&v| v / T::lit((m - 1) as f64)).collect();
        let stats = BatchStats {
            mean: mean.clone(),
            var: unbiased,
        };
        let v = Tensor::from_parts(self.shape(x).to_vec(), out);
        let id = self.push(v, Op::BatchNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta]);
        Ok((id, stats))
    }

    /// Batch normalization with frozen running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: f64,
    ) -> Result<NodeId> {
        let (n, c, inner) = self.channel_layout("batch_norm", x, gamma, beta)?;
        if running_mean.shape() != [c] || running_var.shape() != [c] {
            return Err(self.err("batch_norm", format!("running statistics must be [{c}]")));
        }
        let mean = running_mean.to_vec();
        let inv_std: Vec<T> = running_var.data().iter().map(|&v| (v + T::lit(eps)).sqrt().recip()).collect();
        let (xd, gd, bd) = (self.data(x), self.data(gamma), self.data(beta));
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..n {
            for ci in 0..c {
                let base = (b * c + ci) * inner;
                for i in base..base + inner {
                    out[i] = (xd[i] - mean[ci]) * inv_std[ci] * gd[ci] + bd[ci];
                }
            }
        }
        let v = Tensor::from_parts(self.shape(x).to_vec(), out);
        Ok(self.push(v, Op::BatchNormEval { x, gamma, beta, mean, inv_std }, &[x, gamma, beta]))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        let e = *s.last().ok_or_else(|| self.err("layer_norm", "scalar input"))?;
        if self.shape(gamma) != [e] || self.shape(beta) != [e] {
            return Err(self.err("layer_norm", format!("affine parameters must be [{e}]")));
        }
        let (xd, gd, bd) = (self.data(x), self.data(gamma), self.data(beta));
        let rows = xd.len() / e;
        let ef = T::lit(e as f64);
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xd[r * e..(r + 1) * e];
            let mu = row.iter().copied().sum::<T>() / ef;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / ef;
            let is = (var + T::lit(eps)).sqrt().recip();
            inv_std[r] = is;
            for j in 0..e {
                let h = (row[j] - mu) * is;
                xhat[r * e + j] = h;
                out[r * e + j] = h * gd[j] + bd[j];
            }
        }
        let v = Tensor::from_parts(s, out);
        Ok(self.push(v, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        let e = *s.last().ok_or_else(|| self.err("softmax", "scalar input"))?;
        let mut out = self.data(x).to_vec();
        for row in out.chunks_exact_mut(e) {
            kernels::softmax_in_place(row);
        }
        Ok(self.push(Tensor::from_parts(s, out), Op::Softmax(x), &[x]))
    }

    pub fn elu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|z| if z > T::zero() { z } else { z.exp_m1() });
        self.push(v, Op::Elu(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(gelu_value);
        self.push(v, Op::Gelu(x), &[x])
    }

    /// Inverted dropout; identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, x: NodeId, p: f64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(self.err("dropout", format!("rate {p} outside [0, 1)")));
        }
        if self.mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let threshold = (p * 4_294_967_296.0).round() as u32;
        let n = self.value(x).numel();
        let mask: Vec<T> = (0..n)
            .map(|_| if self.rng.random::<u32>() >= threshold { keep } else { T::zero() })
            .collect();
        let out = self.data(x).iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let v = Tensor::from_parts(self.shape(x).to_vec(), out);
        Ok(self.push(v, Op::Dropout { x, mask }, &[x]))
    }

    /// Row lookup into `table [K, E]`; output shape `index_shape + [E]`.
    pub fn embedding(&mut self, table: NodeId, indices: &[usize], index_shape: &[usize]) -> Result<NodeId> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(self.err("embedding", format!("table must be rank 2, got {st:?}")));
        }
        if index_shape.iter().product::<usize>() != indices.len() {
            return Err(self.err("embedding", format!("{} indices do not fill shape {index_shape:?}", indices.len())));
        }
        let (k, e) = (st[0], st[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
            return Err(self.err("embedding", format!("index {bad} out of range for {k} rows")));
        }
        let td = self.data(table);
        let mut out = Vec::with_capacity(indices.len() * e);
        for &i in indices {
            out.extend_from_slice(&td[i * e..(i + 1) * e]);
        }
        let mut shape = index_shape.to_vec();
        shape.push(e);
        let v = Tensor::from_parts(shape, out);
        Ok(self.push(v, Op::Embedding { table, indices: indices.to_vec() }, &[table]))
    }

    /// Multi-head scaled dot-product attention on `[B, T, E]` projections.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> Result<NodeId> {
        let s = self.shape(q).to_vec();
        if s.len() != 3 || self.shape(k) != s.as_slice() || self.shape(v) != s.as_slice() {
            return Err(self.err("attention", format!("q/k/v must share a [B, T, E] shape, got {s:?}")));
        }
        if heads == 0 || s[2] % heads != 0 {
            return Err(self.err("attention", format!("dim {} not divisible by {heads} heads", s[2])));
        }
        let geom = AttnGeom {
            batch: s[0],
            len: s[1],
            dim: s[2],
            heads,
        };
        let (out, probs) = kernels::attention_forward(self.data(q), self.data(k), self.data(v), geom);
        let val = Tensor::from_parts(s, out);
        Ok(self.push(val, Op::Attention { q, k, v, geom, probs }, &[q, k, v]))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: T = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = T::lit(self.value(x).numel() as f64);
        let s: T = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(s / n), Op::MeanAll(x), &[x])
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(self.err("mean_axis", format!("axis {axis} out of range for {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let axis_len = s[axis];
        let xd = self.data(x);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for a in 0..axis_len {
                let src = &xd[(o * axis_len + a) * inner..][..inner];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        let inv = T::one() / T::lit(axis_len as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape = s.clone();
        shape.remove(axis);
        let v = Tensor::from_parts(shape, out);
        Ok(self.push(v, Op::MeanAxis { x, outer, axis_len, inner }, &[x]))
    }

    /// Same values, no gradient flows back to `x`.
    pub fn stop_gradient(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).clone();
        self.nodes.push(Node {
            value: v,
            op: Op::Leaf,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self
            .value(x)
            .reshape(shape.to_vec())
            .map_err(|e| self.err("reshape", e.to_string()))?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(self.err("permute", format!("{perm:?} is not a permutation of {} axes", s.len())));
        }
        let out = permute_data(self.data(x), &s, perm);
        let shape = perm.iter().map(|&p| s[p]).collect();
        let v = Tensor::from_parts(shape, out);
        Ok(self.push(v, Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    /// Mean negative log-likelihood of `labels` under softmax(`logits [N, C]`).
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(self.err("cross_entropy", format!("logits {s:?} vs {} labels", labels.len())));
        }
        let c = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(self.err("cross_entropy", format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = self.data(logits).to_vec();
        let mut loss = 0.0f64;
        for (row, &l) in probs.chunks_exact_mut(c).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max.as_f64() + row.iter().map(|&z| (z - max).as_f64().exp()).sum::<f64>().ln();
            loss += lse - row[l].as_f64();
            kernels::softmax_in_place(row);
        }
        let v = Tensor::scalar(T::lit(loss / labels.len() as f64));
        Ok(self.push(
            v,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Mean squared difference of two equally shaped nodes.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(self.err("mse", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean_all(sq))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape {
                op: "backward",
                node: loss.0,
                detail: format!("loss must be scalar, got {:?}", self.shape(loss)),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut by_node = HashMap::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                by_node.insert(i, Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            self.backprop(&node.op, &node.value, g, &mut grads);
        }
        Ok(Gradients {
            by_node,
            by_param: self.bound.clone(),
        })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], id: NodeId, g: Vec<T>) {
        if !self.wants(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    /// Sums a broadcast gradient back onto the suffix shape of `b`.
    fn reduce_suffix(g: &[T], m: usize) -> Vec<T> {
        let mut out = vec![T::zero(); m];
        for chunk in g.chunks_exact(m) {
            out.iter_mut().zip(chunk).for_each(|(o, &v)| *o += v);
        }
        out
    }

    fn backprop(&self, op: &Op<T>, out: &Tensor<T>, g: Vec<T>, grads: &mut [Option<Vec<T>>]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let m = self.value(*b).numel();
                if self.wants(*b) {
                    self.accumulate(grads, *b, Self::reduce_suffix(&g, m));
                }
                self.accumulate(grads, *a, g);
            }
            Op::Sub(a, b) => {
                let m = self.value(*b).numel();
                if self.wants(*b) {
                    let neg: Vec<T> = Self::reduce_suffix(&g, m).into_iter().map(|v| -v).collect();
                    self.accumulate(grads, *b, neg);
                }
                self.accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                let m = db.len();
                if self.wants(*b) {
                    let prod: Vec<T> = g.iter().zip(da).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, Self::reduce_suffix(&prod, m));
                }
                if self.wants(*a) {
                    let mut ga = Vec::with_capacity(g.len());
                    for chunk in g.chunks_exact(m) {
                        ga.extend(chunk.iter().zip(db).map(|(&x, &y)| x * y));
                    }
                    self.accumulate(grads, *a, ga);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.into_iter().map(|v| v * c).collect());
            }
            Op::MatMul(a, b) => {
                let sb = self.shape(*b);
                let (k, n) = (sb[0], sb[1]);
                let m = self.value(*a).numel() / k;
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(m, n, k, T::one(), &g, View::rows(0, n), self.data(*b), View::trans(0, n), T::zero(), &mut ga, View::rows(0, k));
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    gemm(k, m, n, T::one(), self.data(*a), View::trans(0, k), &g, View::rows(0, n), T::zero(), &mut gb, View::rows(0, n));
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Conv1d { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv1d_backward(self.data(*x), self.data(*w), &g, *geom);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                if let Some(b) = b {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::ConvT1d { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv_t1d_backward(self.data(*x), self.data(*w), &g, *geom);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                if let Some(b) = b {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv2d_backward(self.data(*x), self.data(*w), &g, *geom);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                if let Some(b) = b {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::AvgPool2d { x, kh, kw } => {
                let s = self.shape(*x);
                let dx = kernels::avg_pool2d_backward(&g, s[0] * s[1], s[2], s[3], *kh, *kw);
                self.accumulate(grads, *x, dx);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let s = self.shape(*x);
                let (n, c) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let gd = self.data(*gamma);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ci in 0..c {
                        let base = (b * c + ci) * inner;
                        for i in base..base + inner {
                            dgamma[ci] += g[i] * xhat[i];
                            dbeta[ci] += g[i];
                        }
                    }
                }
                if self.wants(*x) {
                    let mf = T::lit((n * inner) as f64);
                    let mut dx = vec![T::zero(); g.len()];
                    for b in 0..n {
                        for ci in 0..c {
                            let k = gd[ci] * inv_std[ci] / mf;
                            let base = (b * c + ci) * inner;
                            for i in base..base + inner {
                                dx[i] = k * (mf * g[i] - dbeta[ci] - xhat[i] * dgamma[ci]);
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::BatchNormEval { x, gamma, beta, mean, inv_std } => {
                let s = self.shape(*x);
                let (n, c) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let (xd, gd) = (self.data(*x), self.data(*gamma));
                let mut dx = vec![T::zero(); g.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ci in 0..c {
                        let base = (b * c + ci) * inner;
                        for i in base..base + inner {
                            dx[i] = g[i] * gd[ci] * inv_std[ci];
                            dgamma[ci] += g[i] * (xd[i] - mean[ci]) * inv_std[ci];
                            dbeta[ci] += g[i];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let e = self.shape(*gamma)[0];
                let gd = self.data(*gamma);
                let ef = T::lit(e as f64);
                let mut dgamma = vec![T::zero(); e];
                let mut dbeta = vec![T::zero(); e];
                let mut dx = vec![T::zero(); g.len()];
                for (r, &is) in inv_std.iter().enumerate() {
                    let gr = &g[r * e..(r + 1) * e];
                    let hr = &xhat[r * e..(r + 1) * e];
                    let mut sum_d = T::zero();
                    let mut sum_dh = T::zero();
                    for j in 0..e {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                        let d = gr[j] * gd[j];
                        sum_d += d;
                        sum_dh += d * hr[j];
                    }
                    for j in 0..e {
                        let d = gr[j] * gd[j];
                        dx[r * e + j] = is / ef * (ef * d - sum_d - hr[j] * sum_dh);
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Softmax(x) => {
                let e = *out.shape().last().unwrap();
                let y = out.data();
                let mut dx = vec![T::zero(); g.len()];
                for ((dr, gr), yr) in dx.chunks_exact_mut(e).zip(g.chunks_exact(e)).zip(y.chunks_exact(e)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..e {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Elu(x) => {
                let xd = self.data(*x);
                let y = out.data();
                let dx = g
                    .iter()
                    .zip(xd.iter().zip(y))
                    .map(|(&gv, (&xv, &yv))| if xv > T::zero() { gv } else { gv * (yv + T::one()) })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Gelu(x) => {
                let dx = g.iter().zip(self.data(*x)).map(|(&gv, &xv)| gv * gelu_grad(xv)).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Dropout { x, mask } => {
                self.accumulate(grads, *x, g.iter().zip(mask).map(|(&a, &m)| a * m).collect());
            }
            Op::Embedding { table, indices } => {
                let e = self.shape(*table)[1];
                let mut dt = vec![T::zero(); self.value(*table).numel()];
                for (r, &i) in indices.iter().enumerate() {
                    let dst = &mut dt[i * e..(i + 1) * e];
                    dst.iter_mut().zip(&g[r * e..(r + 1) * e]).for_each(|(d, &v)| *d += v);
                }
                self.accumulate(grads, *table, dt);
            }
            Op::Attention { q, k, v, geom, probs } => {
                let (dq, dk, dv) =
                    kernels::attention_backward(self.data(*q), self.data(*k), self.data(*v), probs, &g, *geom);
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::SumAll(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0] / T::lit(n as f64); n]);
            }
            Op::MeanAxis { x, outer, axis_len, inner } => {
                let inv = T::one() / T::lit(*axis_len as f64);
                let mut dx = vec![T::zero(); outer * axis_len * inner];
                for o in 0..*outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for a in 0..*axis_len {
                        let dst = &mut dx[(o * axis_len + a) * inner..][..*inner];
                        dst.iter_mut().zip(src).for_each(|(d, &v)| *d = v * inv);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g),
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let dx = permute_data(&g, out.shape(), &inverse);
                self.accumulate(grads, *x, dx);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = self.shape(*logits)[1];
                let scale = g[0] / T::lit(labels.len() as f64);
                let mut dx = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    dx[r * c + l] -= T::one();
                }
                dx.iter_mut().for_each(|v| *v *= scale);
                self.accumulate(grads, *logits, dx);
            }
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu_value<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let inner = T::lit(GELU_K) * (x + T::lit(GELU_C) * x * x * x);
    half * x * (T::one() + tanh(inner))
}

/// `tanh` through a single exponential, which is markedly faster than the
/// library routine for `f32` and accurate to a few ulps.
fn tanh<T: Real>(u: T) -> T {
    let e = (T::lit(-2.0) * u.abs()).exp();
    let t = (T::one() - e) / (T::one() + e);
    if u < T::zero() {
        -t
    } else {
        t
    }
}

fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let inner = T::lit(GELU_K) * (x + T::lit(GELU_C) * x * x * x);
    let t = tanh(inner);
    let dinner = T::lit(GELU_K) * (T::one() + T::lit(3.0 * GELU_C) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

fn permute_data<T: Real>(x: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..x.len() {
        let src: usize = idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum();
        out.push(x[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}
