//! Initialisation and training-loop helpers shared by the three models.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// `U(-bound, bound)` entries.
pub(crate) fn uniform<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let v = (0..n).map(|_| T::lit(rng.random_range(-bound..=bound))).collect();
    Tensor::new(shape.to_vec(), v).expect("positive extents")
}

pub(crate) fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

pub(crate) fn permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(rng);
    v
}

/// Dropout seed of one optimisation step.
pub(crate) fn step_seed(seed: u64, step: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ step.wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

pub(crate) fn ensure_finite(value: f64, what: &str, epoch: usize, step: usize, detail: impl FnOnce() -> String) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "{what} became {value} at epoch {epoch}, step {step}; {}",
            detail()
        )))
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of positions where `pred == truth`.
pub fn accuracy(pred: &[usize], truth: &[u8]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| **p == **t as usize).count();
    hits as f64 / pred.len() as f64
}
