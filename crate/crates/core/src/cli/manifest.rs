use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binio;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileSum {
    /// Relative to the output directory when it lies inside it.
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

/// The record a command leaves next to its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    /// Flags that change outputs, e.g. the retraining percentage.
    pub args: BTreeMap<String, String>,
    pub model_seeds: Vec<u64>,
    pub failure_seeds: Vec<u64>,
    pub inputs: Vec<FileSum>,
    pub outputs: Vec<FileSum>,
    pub wall_time_s: f64,
    pub version: String,
    /// Human-readable result lines, repeated when the command is skipped.
    #[serde(default)]
    pub summary: Vec<String>,
}

pub fn sha256_file(path: &Path) -> Result<(String, u64)> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    let mut n = 0u64;
    loop {
        let k = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if k == 0 {
            break;
        }
        h.update(&buf[..k]);
        n += k as u64;
    }
    Ok((hex::encode(h.finalize()), n))
}

pub fn file_sum(root: &Path, path: &Path) -> Result<FileSum> {
    let (sha256, bytes) = sha256_file(path)?;
    Ok(FileSum {
        path: path.strip_prefix(root).unwrap_or(path).to_path_buf(),
        sha256,
        bytes,
    })
}

fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

fn unchanged(root: &Path, sums: &[FileSum]) -> bool {
    sums.iter().all(|s| {
        let p = resolve(root, &s.path);
        matches!(sha256_file(&p), Ok((h, n)) if h == s.sha256 && n == s.bytes)
    })
}

pub fn manifest_path(out: &Path, command: &str) -> PathBuf {
    out.join("manifests").join(format!("{command}.json"))
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        Ok(serde_json::from_slice(&binio::read_file(path)?)?)
    }

    pub fn save(&self, out: &Path) -> Result<()> {
        binio::write_atomic(&manifest_path(out, &self.command), &serde_json::to_vec_pretty(self)?)
    }

    /// Whether a previous run of the same command with the same config,
    /// arguments and inputs left outputs that are still intact.
    pub fn is_current(&self, out: &Path, config_hash: &str, args: &BTreeMap<String, String>, inputs: &[PathBuf]) -> bool {
        if self.config_hash != config_hash || &self.args != args {
            return false;
        }
        let listed: Vec<PathBuf> = self.inputs.iter().map(|s| resolve(out, &s.path)).collect();
        listed.len() == inputs.len()
            && listed.iter().zip(inputs).all(|(a, b)| a == &resolve(out, b))
            && unchanged(out, &self.inputs)
            && unchanged(out, &self.outputs)
    }
}

/// Returns the previous manifest when the command can be skipped.
pub fn up_to_date(out: &Path, command: &str, config_hash: &str, args: &BTreeMap<String, String>, inputs: &[PathBuf]) -> Option<Manifest> {
    let prev = Manifest::load(&manifest_path(out, command)).ok()?;
    if prev.is_current(out, config_hash, args, inputs) {
        info!("{command}: {} outputs up to date, checksums match; skipping", prev.outputs.len());
        Some(prev)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tampered_outputs_invalidate_the_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path();
        let input = out.join("in.bin");
        let output = out.join("o/out.bin");
        binio::write_atomic(&input, b"abc").unwrap();
        binio::write_atomic(&output, b"xyz").unwrap();
        let m = Manifest {
            command: "demo".into(),
            config_hash: "h".into(),
            args: BTreeMap::new(),
            model_seeds: vec![0],
            failure_seeds: vec![],
            inputs: vec![file_sum(out, &input).unwrap()],
            outputs: vec![file_sum(out, &output).unwrap()],
            wall_time_s: 0.0,
            version: "0".into(),
            summary: vec![],
        };
        assert_eq!(m.outputs[0].path, Path::new("o/out.bin"));
        assert_eq!(m.inputs[0].sha256, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        m.save(out).unwrap();
        let inputs = [input.clone()];
        assert!(up_to_date(out, "demo", "h", &BTreeMap::new(), &inputs).is_some());
        assert!(up_to_date(out, "demo", "other", &BTreeMap::new(), &inputs).is_none());
        binio::write_atomic(&output, b"xyZ").unwrap();
        assert!(up_to_date(out, "demo", "h", &BTreeMap::new(), &inputs).is_none());
    }
}
