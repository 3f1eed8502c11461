//! The tensor engine on its own: a two-layer classifier on a toy problem,
//! checked against finite differences and then fitted with Adam.
//!
//!     cargo run --release --example autodiff

use neurovq::numerics::gradcheck::{self, GradCheckOptions};
use neurovq::numerics::{AdamConfig, AdamState, Graph, Mode, NodeId, ParamStore, Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const N: usize = 64;

/// Points in the plane labeled by quadrant.
fn toy(seed: u64) -> (Vec<f64>, Vec<usize>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..N * 2).map(|_| r.random_range(-1.0..1.0)).collect();
    let y = x.chunks(2).map(|p| (p[0] > 0.0) as usize * 2 + (p[1] > 0.0) as usize).collect();
    (x, y)
}

fn params<T: Real>(seed: u64) -> ParamStore<T> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let mut add = |name: &str, shape: Vec<usize>, scale: f64| {
        let n = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| r.random_range(-scale..scale)).collect();
        s.insert(name, Tensor::from_f64(shape, &v).unwrap(), true).unwrap();
    };
    add("w1", vec![2, 16], 1.0);
    add("b1", vec![16], 0.1);
    add("w2", vec![16, 4], 0.5);
    add("b2", vec![4], 0.1);
    s
}

fn loss<T: Real>(g: &mut Graph<T>, s: &ParamStore<T>, x: &[f64], y: &[usize]) -> neurovq::Result<NodeId> {
    let p = |g: &mut Graph<T>, n: &str| g.param(s, s.id(n).unwrap());
    let xn = g.input(Tensor::from_f64([N, 2], x)?);
    let (w1, b1, w2, b2) = (p(g, "w1"), p(g, "b1"), p(g, "w2"), p(g, "b2"));
    let h = g.matmul(xn, w1)?;
    let h = g.add(h, b1)?;
    let h = g.gelu(h);
    let z = g.matmul(h, w2)?;
    let z = g.add(z, b2)?;
    g.cross_entropy(z, y)
}

fn main() -> neurovq::Result<()> {
    let (x, y) = toy(1);
    let report = gradcheck::check(&params::<f64>(2), GradCheckOptions::default(), |g, s| loss(g, s, &x, &y))?;
    println!("finite differences: {} elements, max relative error {:.2e}", report.checked, report.max_rel_error);

    let mut store = params::<f32>(2);
    let mut adam = AdamState::new(AdamConfig { lr: 1e-2, ..AdamConfig::default() }, &store)?;
    for step in 0..=300 {
        let mut g = Graph::new(Mode::Train, step);
        let l = loss(&mut g, &store, &x, &y)?;
        if step % 60 == 0 {
            println!("step {step:>3}: loss {:.4}", g.value(l).item().as_f64());
        }
        let grads = g.backward(l)?;
        adam.step(&mut store, &grads)?;
    }
    Ok(())
}
