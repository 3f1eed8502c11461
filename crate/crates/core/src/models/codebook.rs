use std::path::Path;

use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::numerics::real::{gemm, View};
use crate::numerics::Real;

const MAGIC: &[u8; 4] = b"NVCB";
const VERSION: u32 = 1;

/// `K` ordered codewords of dimension `D`.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    k: usize,
    d: usize,
    data: Vec<f32>,
    frozen: bool,
}

impl Codebook {
    /// An unfrozen codebook; every value must be finite.
    pub fn new(k: usize, d: usize, data: Vec<f32>) -> Result<Self> {
        if k == 0 || d == 0 {
            return Err(Error::invalid(format!("codebook needs K > 0 and D > 0, got {k} × {d}")));
        }
        if data.len() != k * d {
            return Err(Error::invalid(format!("{} values for a {k} × {d} codebook", data.len())));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!("codeword {} is not finite", i / d)));
        }
        Ok(Codebook { k, d, data, frozen: false })
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn len(&self) -> usize {
        self.k
    }

    pub fn is_empty(&self) -> bool {
        self.k == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    /// Reference nearest neighbour by exhaustive scan in 64-bit arithmetic;
    /// ties go to the lowest index.
    pub fn nearest_exhaustive(&self, z: &[f32]) -> usize {
        nearest_exhaustive(z, &self.data, self.k, self.d)
    }

    /// Nearest codeword for every row of `latents [M × D]`.
    pub fn quantize(&self, latents: &[f32]) -> Result<Vec<usize>> {
        if latents.len() % self.d != 0 {
            return Err(Error::invalid(format!(
                "{} latent values are not a multiple of D = {}",
                latents.len(),
                self.d
            )));
        }
        Ok(nearest_rows(latents, &self.data, self.k, self.d))
    }

    /// Indices together with the selected codebook rows.
    pub fn quantize_with_rows(&self, latents: &[f32]) -> Result<(Vec<usize>, Vec<f32>)> {
        let idx = self.quantize(latents)?;
        let mut rows = Vec::with_capacity(latents.len());
        for &i in &idx {
            rows.extend_from_slice(self.row(i));
        }
        Ok((idx, rows))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u32(self.k as u32);
        w.u32(self.d as u32);
        w.f32s(self.data.iter().copied());
        w.buf
    }

    /// Codebooks are only persisted after training, so a decoded one is frozen.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        r.magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.fail(format!("unsupported codebook version {version}")));
        }
        let k = r.u32()? as usize;
        let d = r.u32()? as usize;
        let data = r.f32s(k * d)?;
        if !r.at_end() {
            return Err(r.fail("trailing bytes after codewords"));
        }
        Codebook::new(k, d, data)
            .map(Codebook::freeze)
            .map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Codebook::decode(&binio::read_file(path)?, path)
    }
}

pub(crate) fn nearest_exhaustive<T: Real>(z: &[T], cb: &[T], k: usize, d: usize) -> usize {
    let mut best = (f64::INFINITY, 0);
    for j in 0..k {
        let dist = sq_dist(z, &cb[j * d..(j + 1) * d]);
        if dist < best.0 {
            best = (dist, j);
        }
    }
    best.1
}

fn sq_dist<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let e = x.as_f64() - y.as_f64();
            e * e
        })
        .sum()
}

const CHUNK: usize = 1024;

/// Screens candidates with `‖c‖² − 2 z·c` in working precision, then settles
/// every near-tie with exact 64-bit distances. The screening margin exceeds
/// the rounding error of the GEMM, so the true minimiser is always among the
/// rescored candidates.
pub(crate) fn nearest_rows<T: Real>(latents: &[T], cb: &[T], k: usize, d: usize) -> Vec<usize> {
    let m = latents.len() / d;
    let norms: Vec<f64> = (0..k)
        .map(|j| cb[j * d..(j + 1) * d].iter().map(|x| x.as_f64() * x.as_f64()).sum())
        .collect();
    let max_norm = norms.iter().copied().fold(0.0, f64::max);
    let eps = T::epsilon().as_f64();
    let mut out = Vec::with_capacity(m);
    let mut scores = vec![T::zero(); CHUNK.min(m.max(1)) * k];
    for start in (0..m).step_by(CHUNK) {
        let rows = CHUNK.min(m - start);
        let block = &latents[start * d..(start + rows) * d];
        gemm(
            rows,
            d,
            k,
            T::lit(-2.0),
            block,
            View::rows(0, d),
            cb,
            View::trans(0, d),
            T::zero(),
            &mut scores[..rows * k],
            View::rows(0, k),
        );
        for r in 0..rows {
            let z = &block[r * d..(r + 1) * d];
            let row = &scores[r * k..(r + 1) * k];
            let zn: f64 = z.iter().map(|x| x.as_f64() * x.as_f64()).sum();
            let margin = 8.0 * (d as f64 + 4.0) * eps * (zn + max_norm) + 1e-30;
            let approx: Vec<f64> = row.iter().zip(&norms).map(|(s, n)| s.as_f64() + n).collect();
            let lo = approx.iter().copied().fold(f64::INFINITY, f64::min);
            let mut best = (f64::INFINITY, 0);
            for (j, &a) in approx.iter().enumerate() {
                if a <= lo + margin {
                    let dist = sq_dist(z, &cb[j * d..(j + 1) * d]);
                    if dist < best.0 {
                        best = (dist, j);
                    }
                }
            }
            out.push(best.1);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(k: usize, d: usize, seed: u64) -> Codebook {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Codebook::new(k, d, (0..k * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn codeword_is_its_own_nearest() {
        let cb = random(256, 64, 1);
        let (idx, rows) = cb.quantize_with_rows(cb.row(7)).unwrap();
        assert_eq!(idx, vec![7]);
        assert_eq!(rows, cb.row(7));
    }

    #[test]
    fn quantization_is_idempotent() {
        let cb = random(32, 8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z: Vec<f32> = (0..8 * 50).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (idx, rows) = cb.quantize_with_rows(&z).unwrap();
        assert_eq!(cb.quantize(&rows).unwrap(), idx);
    }

    #[test]
    fn ties_go_to_the_lowest_index() {
        let cb = Codebook::new(3, 2, vec![1.0, 0.0, -1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(cb.quantize(&[0.0, 0.0]).unwrap(), vec![0]);
        assert_eq!(cb.nearest_exhaustive(&[0.0, 0.0]), 0);
    }

    #[test]
    fn empty_or_non_finite_codebooks_are_rejected() {
        assert!(Codebook::new(0, 4, vec![]).is_err());
        assert!(Codebook::new(1, 2, vec![f32::NAN, 0.0]).is_err());
    }

    #[test]
    fn file_round_trip_is_frozen_and_exact() {
        let cb = random(16, 4, 3);
        let back = Codebook::decode(&cb.encode(), Path::new("mem")).unwrap();
        assert!(back.is_frozen());
        assert_eq!(back.data(), cb.data());
        assert!(Codebook::decode(&cb.encode()[..20], Path::new("mem")).is_err());
    }

    #[test]
    fn agrees_with_exhaustive_scan_on_random_latents() {
        let cb = random(256, 64, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let z: Vec<f32> = (0..1000 * 64).map(|_| rng.random_range(-1.5..1.5)).collect();
        let fast = cb.quantize(&z).unwrap();
        for (i, &k) in fast.iter().enumerate() {
            assert_eq!(k, cb.nearest_exhaustive(&z[i * 64..(i + 1) * 64]), "latent {i}");
        }
    }
}
