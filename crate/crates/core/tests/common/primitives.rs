//! Finite-difference checks of every differentiable primitive, shared by the
//! unit-level gradient tests and the acceptance suite.

use neurovq::numerics::gradcheck::{self, GradCheckOptions};
use neurovq::numerics::{Graph, Mode, NodeId, ParamStore, Tensor};
use neurovq::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CASES_PER_PRIMITIVE: u64 = 10;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// Reduces any node to a scalar through a fixed pseudo-random weighting so
/// that every output element contributes a distinct coefficient.
fn project(g: &mut Graph<f64>, y: NodeId) -> Result<NodeId> {
    let shape = g.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(shape.iter().sum::<usize>() as u64 + 99);
    let w = g.input(rand_tensor(&mut rng, &shape, 1.0));
    let p = g.mul(y, w)?;
    Ok(g.sum_all(p))
}

fn store_of(items: Vec<(&str, Tensor<f64>)>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (name, t) in items {
        s.insert(name, t, true).unwrap();
    }
    s
}

fn p(g: &mut Graph<f64>, s: &ParamStore<f64>, name: &str) -> NodeId {
    g.param(s, s.id(name).unwrap())
}

pub type Check = fn(u64) -> f64;

fn run<F>(store: &ParamStore<f64>, mode: Mode, f: F) -> f64
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>,
{
    let opts = GradCheckOptions { mode, ..GradCheckOptions::default() };
    gradcheck::check(store, opts, f).unwrap().max_rel_error
}

fn matmul(seed: u64) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (m, k, n) = (r.random_range(1..5), r.random_range(1..6), r.random_range(1..5));
    let lead = r.random_range(1..3);
    let s = store_of(vec![("a", rand_tensor(&mut r, &[lead, m, k], 1.0)), ("b", rand_tensor(&mut r, &[k, n], 1.0))]);
    run(&s, Mode::Train, |g, s| {
        let (a, b) = (p(g, s, "a"), p(g, s, "b"));
        let y = g.matmul(a, b)?;
        project(g, y)
    })
}

fn conv1d(seed: u64) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (n, cin, cout) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4));
    let k = r.random_range(1..5);
    let stride = r.random_range(1..4);
    let pad = r.random_range(0..3);
    let len = r.random_range(k..k + 9);
    let s = store_of(vec![
        ("x", rand_tensor(&mut r, &[n, cin, len], 1.0)),
        ("w", rand_tensor(&mut r, &[cout, cin, k], 1.0)),
        ("b", rand_tensor(&mut r, &[cout], 1.0)),
    ]);
    run(&s, Mode::Train, move |g, s| {
        let (x, w, b) = (p(g, s, "x"), p(g, s, "w"), p(g, s, "b"));
        let y = g.conv1d(x, w, Some(b), stride, pad)?;
        project(g, y)
    })
}

fn conv_transpose1d(seed: u64) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (n, cin, cout) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4));
    let stride = r.random_range(1..4);
    let k = r.random_range(stride..stride + 4);
    let pad = r.random_range(0..=k / 2);
    let len = r.random_range(2..8);
    let s = store_of(vec![
        ("x", rand_tensor(&mut r, &[n, cin, len], 1.0)),
        ("w", rand_tensor(&mut r, &[cin, cout, k], 1.0)),
        ("b", rand_tensor(&mut r, &[cout], 1.0)),
    ]);
    run(&s, Mode::Train, move |g, s| {
        let (x, w, b) = (p(g, s, "x"), p(g, s, "w"), p(g, s, "b"));
        let y = g.conv_transpose1d(x, w, Some(b), stride, pad)?;
        project(g, y)
    })
}

fn conv2d(seed: u64) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let groups = r.random_range(1..3);
    let cin = groups * r.random_range(1..3);
    let cout = groups * r.random_range(1..3);
    let (kh, kw) = (r.random_range(1..4), r.random_range(1..4));
    let stride = (r.random_range(1..3), r.random_range(1..3));
    let pad = [r.random_range(0..2), r.random_range(0..2), r.random_range(0..2), r.random_range(0..2)];
    let (h, w) = (r.random_range(kh..kh + 4), r.random_range(kw..kw + 5));
    let s = store_of(vec![
        ("x", rand_tensor(&mut r, &[2, cin, h, w], 1.0)),
        ("w", rand_tensor(&mut r, &[cout, cin / groups, kh, kw], 1.0)),
        ("b", rand_tensor(&mut r, &[cout], 1.0)),
    ]);
    run(&s, Mode::Train, move |g, s| {
        let (x, wt, b) = (p(g, s, "x"), p(g, s, "w"), p(g, s, "b"));
        let y = g.conv2d(x, wt, Some(b), stride, pad, groups)?;
        project(g, y)
    })
}

fn depthwise_conv2d(seed: u64) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let c = r.random_range(1..4);
    let depth = r.random_range(1..3);
    let (kh, kw) = (r.random_range(1..4), r.random_range(1..5));
    let (h, w) = (r.random_range(kh..kh + 3), r.random_range(kw..kw + 6));
    let (pl, pr) = neurovq::numerics::same_padding(kw);
    let s = store_of(vec![
        ("x", rand_tensor(&mut r, &[2, c, h, w], 1.0)),
        ("w", rand_tensor(&mut r, &[c * depth, 1, kh, kw], 1.0)),
    ]);
    run(&s, Mode::Train, move |g, s| {
        let (x, wt) = (p(g, s, "x"), p(g, s, "w"));
        let y = g.depthwise_conv2d(x, wt, [0, 0, pl, pr])?;
        project(g, y)
    })
}

fn pointwise_conv2d(seed: u64) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (cin, cout) = (r.random_range(1..5), r.random_range(1..5));
    let (h, w) = (r.random_range(1..4), r.random_range(1..6));
    let s = store_of(vec![
        ("x", rand_tensor(&mut r, &[2, cin, h, w], 1.0)),
        ("w", rand_tensor(&mut r, &[cout, cin, 1, 1], 1.0)),
    ]);
    run(&s, Mode::Train, |g, s| {
        let (x, wt) = (p(g, s, "x"), p(g, s, "w"));
        let y = g.pointwise_conv2d(x, wt, None)?;
        project(g, y)
    })
}

fn avg_pool2d(seed: u64) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (kh, kw) = (r.random_range(1..3), r.random_range(1..5));
    let (h, w) = (kh * r.random_range(1..3) + r.random_range(0..2), kw * r.random_range(1..4) + r.random_range(0..2));
    let s = store_of(vec![("x", rand_tensor(&mut r, &[2, 2, h, w], 1.0))]);
    run(&s, Mode::Train, move |g, s| {
        let x = p(g, s, "x");
        let y = g.avg_pool2d(x, kh, kw)?;
        project(g, y)
    })
}

fn batch_norm_train(seed: u64) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (n, c, l) = (r.random_range(2..4), r.random_range(1..4), r.random_range(1..5));
    let s = store_of(vec![
        ("x", rand_tensor(&mut r, &[n, c, 1, l], 2.0)),
        ("gamma", rand_tensor(&mut r, &[c], 1.0)),
        ("beta", rand_tensor(&mut r, &[c], 1.0)),
    ]);
    run(&s, Mode::Train, |g, s| {
        let (x, ga, be) = (p(g, s, "x"), p(g, s, "gamma"), p(g, s, "beta"));
        let (y, _) = g.batch_norm_train(x, ga, be, 1e-5)?;
        project(g, y)
    })
}

fn batch_norm_eval(seed: u64) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (n, c, l) = (r.random_range(1..4), r.random_range(1..4), r.random_range(1..5));
    let mean = rand_tensor(&mut r, &[c], 1.0);
    let var = rand_tensor(&mut r, &[c], 1.0).map(|v| v.abs() + 0.2);
    let s = store_of(vec![
        ("x", rand_tensor(&mut r, &[n, c, l], 2.0)),
        ("gamma", rand_tensor(&mut r, &[c], 1.0)),
        ("beta", rand_tensor(&mut r, &[c], 1.0)),
    ]);
    run(&s, Mode::Eval, move |g, s| {
        let (x, ga, be) = (p(g, s, "x"), p(g, s, "gamma"), p(g, s, "beta"));
        let y = g.batch_norm_eval(x, ga, be, &mean, &var, 1e-5)?;
        project(g, y)
    })
}

fn layer_norm(seed: u64) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (rows, e) = (r.random_range(1..5), r.random_range(2..7));
    let s = store_of(vec![
        ("x", rand_tensor(&mut r, &[rows, e], 2.0)),
        ("gamma", rand_tensor(&mut r, &[e], 1.0)),
        ("beta", rand_tensor(&mut r, &[e], 1.0)),
    ]);
    run(&s, Mode::Train, |g, s| {
        let (x, ga, be) = (p(g, s, "x"), p(g, s, "gamma"), p(g, s, "beta"));
        let y = g.layer_norm(x, ga, be, 1e-5)?;
        project(g, y)
    })
}

fn softmax(seed: u64) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let shape = [r.random_range(1..4), r.random_range(2..7)];
    let s = store_of(vec![("x", rand_tensor(&mut r, &shape, 3.0))]);
    run(&s, Mode::Train, |g, s| {
        let x = p(g, s, "x");
        let y = g.softmax(x)?;
        project(g, y)
    })
}

fn elu(seed: u64) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let shape = [r.random_range(1..4), r.random_range(1..9)];
    let s = store_of(vec![("x", rand_tensor(&mut r, &shape, 3.0))]);
    run(&s, Mode::Train, |g, s| {
        let x = p(g, s, "x");
        let y = g.elu(x);
        project(g, y)
    })
}

fn gelu(seed: u64) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let shape = [r.random_range(1..4), r.random_range(1..9)];
    let s = store_of(vec![("x", rand_tensor(&mut r, &shape, 3.0))]);
    run(&s, Mode::Train, |g, s| {
        let x = p(g, s, "x");
        let y = g.gelu(x);
        project(g, y)
    })
}

fn dropout(seed: u64) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let shape = [r.random_range(1..4), r.random_range(2..12)];
    let rate = r.random_range(0.1..0.6);
    let s = store_of(vec![("x", rand_tensor(&mut r, &shape, 1.0))]);
    run(&s, Mode::Train, move |g, s| {
        let x = p(g, s, "x");
        let y = g.dropout(x, rate)?;
        let z = g.mul(y, y)?;
        project(g, z)
    })
}

fn embedding(seed: u64) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (k, e) = (r.random_range(2..7), r.random_range(1..5));
    let idx: Vec<usize> = (0..6).map(|_| r.random_range(0..k)).collect();
    let s = store_of(vec![("table", rand_tensor(&mut r, &[k, e], 1.0))]);
    run(&s, Mode::Train, move |g, s| {
        let t = p(g, s, "table");
        let y = g.embedding(t, &idx, &[2, 3])?;
        let z = g.mul(y, y)?;
        project(g, z)
    })
}

fn attention(seed: u64) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let heads = r.random_range(1..3);
    let e = heads * r.random_range(1..4);
    let (b, t) = (r.random_range(1..3), r.random_range(1..6));
    let s = store_of(vec![
        ("q", rand_tensor(&mut r, &[b, t, e], 1.5)),
        ("k", rand_tensor(&mut r, &[b, t, e], 1.5)),
        ("v", rand_tensor(&mut r, &[b, t, e], 1.5)),
    ]);
    run(&s, Mode::Train, move |g, s| {
        let (q, k, v) = (p(g, s, "q"), p(g, s, "k"), p(g, s, "v"));
        let y = g.attention(q, k, v, heads)?;
        project(g, y)
    })
}

fn elementwise(seed: u64) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (m, n) = (r.random_range(1..4), r.random_range(1..5));
    let s = store_of(vec![
        ("a", rand_tensor(&mut r, &[m, n], 1.0)),
        ("b", rand_tensor(&mut r, &[m, n], 1.0)),
        ("c", rand_tensor(&mut r, &[n], 1.0)),
    ]);
    run(&s, Mode::Train, |g, s| {
        let (a, b, c) = (p(g, s, "a"), p(g, s, "b"), p(g, s, "c"));
        let ab = g.mul(a, b)?;
        let abc = g.add(ab, c)?;
        let d = g.sub(abc, a)?;
        let e = g.mul(d, c)?;
        let f = g.scale(e, -1.7);
        project(g, f)
    })
}

fn reductions(seed: u64) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let shape = [r.random_range(1..4), r.random_range(1..4), r.random_range(1..4)];
    let axis = r.random_range(0..3);
    let s = store_of(vec![("x", rand_tensor(&mut r, &shape, 1.0))]);
    run(&s, Mode::Train, move |g, s| {
        let x = p(g, s, "x");
        let sq = g.mul(x, x)?;
        let m = g.mean_axis(sq, axis)?;
        let pm = project(g, m)?;
        let all = g.mean_all(x);
        let tot = g.sum_all(sq);
        let y = g.add(pm, all)?;
        g.add(y, tot)
    })
}

fn layout_ops(seed: u64) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let shape = [r.random_range(1..4), r.random_range(1..4), r.random_range(1..4)];
    let s = store_of(vec![("x", rand_tensor(&mut r, &shape, 1.0))]);
    run(&s, Mode::Train, move |g, s| {
        let x = p(g, s, "x");
        let pm = g.permute(x, &[2, 0, 1])?;
        let flat = g.reshape(pm, &[shape.iter().product()])?;
        let y = g.mul(flat, flat)?;
        project(g, y)
    })
}

fn stop_gradient(seed: u64) -> f64 {
    // d/dx [x · sg(x)] = sg(x), so the oracle compares against x (not 2x)
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = r.random_range(1..8);
    let x0 = rand_tensor(&mut r, &[n], 1.0);
    let s = store_of(vec![("x", x0.clone())]);
    let mut g = Graph::<f64>::new(Mode::Train, 0);
    let x = p(&mut g, &s, "x");
    let sgx = g.stop_gradient(x);
    let y = g.mul(x, sgx).unwrap();
    let l = g.sum_all(y);
    let grads = g.backward(l).unwrap();
    let got = grads.param(s.id("x").unwrap()).unwrap();
    got.data()
        .iter()
        .zip(x0.data())
        .map(|(a, b)| gradcheck::relative_error(*a, *b, 1e-6))
        .fold(0.0, f64::max)
}

fn cross_entropy(seed: u64) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (n, c) = (r.random_range(1..5), r.random_range(2..6));
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
    let s = store_of(vec![("z", rand_tensor(&mut r, &[n, c], 3.0))]);
    run(&s, Mode::Train, move |g, s| {
        let z = p(g, s, "z");
        g.cross_entropy(z, &labels)
    })
}

pub fn all() -> Vec<(&'static str, Check)> {
    vec![
        ("matmul", matmul as Check),
        ("conv1d", conv1d),
        ("conv_transpose1d", conv_transpose1d),
        ("conv2d", conv2d),
        ("depthwise_conv2d", depthwise_conv2d),
        ("pointwise_conv2d", pointwise_conv2d),
        ("avg_pool2d", avg_pool2d),
        ("batch_norm_train", batch_norm_train),
        ("batch_norm_eval", batch_norm_eval),
        ("layer_norm", layer_norm),
        ("softmax", softmax),
        ("elu", elu),
        ("gelu", gelu),
        ("dropout_train", dropout),
        ("embedding", embedding),
        ("attention", attention),
        ("add_sub_mul_scale", elementwise),
        ("mean_sum_reductions", reductions),
        ("permute_reshape", layout_ops),
        ("stop_gradient", stop_gradient),
        ("cross_entropy", cross_entropy),
    ]
}

/// Worst relative error of a primitive over its random cases.
pub fn worst_error(check: Check) -> f64 {
    (0..CASES_PER_PRIMITIVE).map(check).fold(0.0, f64::max)
}
