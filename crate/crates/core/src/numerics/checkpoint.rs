//! `NVCK` parameter checkpoints.
//!
//! Layout: magic `NVCK`, version `u32`, then one record per parameter until
//! end of file: name length `u32`, name bytes, rank `u32`, one `u32` per
//! extent, little-endian `f32` payload.

use std::path::Path;

use super::{ParamStore, Real, Tensor};
use crate::binio::{read_file, write_atomic, Reader, Writer};
use crate::error::Result;

pub const MAGIC: &[u8; 4] = b"NVCK";
pub const VERSION: u32 = 1;

pub fn encode<T: Real>(store: &ParamStore<T>) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(VERSION);
    for (_, name, value) in store.iter() {
        w.str(name);
        w.u32(value.rank() as u32);
        for &d in value.shape() {
            w.u32(d as u32);
        }
        w.f32s(value.data().iter().map(|x| x.as_f64() as f32));
    }
    w.buf
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader::new(bytes, path);
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.fail(format!("unsupported checkpoint version {version}")));
    }
    let mut out = Vec::new();
    while !r.at_end() {
        let name = r.str()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r.f32s(n)?;
        let t = Tensor::new(shape, data).map_err(|e| r.fail(e.to_string()))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn save<T: Real>(path: &Path, store: &ParamStore<T>) -> Result<()> {
    write_atomic(path, &encode(store))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    decode(&read_file(path)?, path)
}

/// Loads a checkpoint into an existing store of matching layout.
pub fn load_into(path: &Path, store: &mut ParamStore<f32>) -> Result<()> {
    store.load_named(load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_preserves_names_shapes_values() {
        let mut s = ParamStore::<f32>::new();
        s.insert("enc.w", Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-7, 9.0]).unwrap(), true)
            .unwrap();
        s.insert("bn.mean", Tensor::new(vec![1], vec![0.25]).unwrap(), false).unwrap();
        let bytes = encode(&s);
        assert_eq!(&bytes[..4], b"NVCK");
        let back = decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "enc.w");
        assert_eq!(back[0].1.shape(), &[2, 3]);
        assert_eq!(back[0].1.data(), s.get(s.id("enc.w").unwrap()).data());
        let mut fresh = s.clone();
        fresh.load_named(back).unwrap();
        assert!(fresh.same_values(&s));
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut s = ParamStore::<f32>::new();
        s.insert("w", Tensor::new(vec![4], vec![1.0; 4]).unwrap(), true).unwrap();
        let mut bytes = encode(&s);
        assert!(decode(&bytes[..bytes.len() - 1], Path::new("t")).is_err());
        bytes[0] = b'X';
        assert!(decode(&bytes, Path::new("t")).is_err());
    }
}
