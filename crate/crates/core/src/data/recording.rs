use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 4;

const MAGIC: &[u8; 4] = b"NVRC";
const VERSION: u32 = 1;

/// Movement direction of a trial.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["left", "right", "both-hands", "both-feet"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialMarker {
    pub onset: usize,
    pub duration: usize,
    pub label: u8,
}

/// A continuous multichannel session with its trial annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub subject: String,
    pub session: String,
    sampling_rate_hz: f64,
    sensors: usize,
    samples: usize,
    /// `[sensors × samples]`, row-major.
    data: Vec<f64>,
    trials: Vec<TrialMarker>,
}

impl Recording {
    pub fn new(
        subject: impl Into<String>,
        session: impl Into<String>,
        sampling_rate_hz: f64,
        sensors: usize,
        data: Vec<f64>,
        trials: Vec<TrialMarker>,
    ) -> Result<Self> {
        if !(sampling_rate_hz > 0.0 && sampling_rate_hz.is_finite()) {
            return Err(Error::invalid(format!("sampling rate must be positive, got {sampling_rate_hz}")));
        }
        if sensors == 0 {
            return Err(Error::invalid("a recording needs at least one sensor"));
        }
        if data.len() % sensors != 0 {
            return Err(Error::invalid(format!(
                "{} values do not fill {sensors} sensor rows",
                data.len()
            )));
        }
        let samples = data.len() / sensors;
        let rec = Recording {
            subject: subject.into(),
            session: session.into(),
            sampling_rate_hz,
            sensors,
            samples,
            data,
            trials,
        };
        rec.check_markers()?;
        Ok(rec)
    }

    fn check_markers(&self) -> Result<()> {
        let Some(first) = self.trials.first() else {
            return Ok(());
        };
        for (i, t) in self.trials.iter().enumerate() {
            if t.duration != first.duration {
                return Err(Error::invalid(format!(
                    "trial {i} lasts {} samples, trial 0 lasts {}",
                    t.duration, first.duration
                )));
            }
            if t.duration == 0 || t.onset + t.duration > self.samples {
                return Err(Error::invalid(format!(
                    "trial {i} spans [{}, {}) outside {} samples",
                    t.onset,
                    t.onset + t.duration,
                    self.samples
                )));
            }
            if t.label as usize >= NUM_CLASSES {
                return Err(Error::invalid(format!("trial {i} has label {}", t.label)));
            }
        }
        Ok(())
    }

    /// Same annotations and metadata around a new signal array.
    pub(crate) fn with_data(&self, sampling_rate_hz: f64, data: Vec<f64>, trials: Vec<TrialMarker>) -> Result<Self> {
        Recording::new(
            self.subject.clone(),
            self.session.clone(),
            sampling_rate_hz,
            self.sensors,
            data,
            trials,
        )
    }

    pub fn sampling_rate_hz(&self) -> f64 {
        self.sampling_rate_hz
    }

    pub fn sensors(&self) -> usize {
        self.sensors
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, sensor: usize) -> &[f64] {
        &self.data[sensor * self.samples..(sensor + 1) * self.samples]
    }

    pub fn trials(&self) -> &[TrialMarker] {
        &self.trials
    }

    /// Replaces trial labels, keeping timing; used by label-permutation controls.
    pub fn relabel(&mut self, labels: &[u8]) -> Result<()> {
        if labels.len() != self.trials.len() {
            return Err(Error::invalid(format!(
                "{} labels for {} trials",
                labels.len(),
                self.trials.len()
            )));
        }
        for (t, &l) in self.trials.iter_mut().zip(labels) {
            t.label = l;
        }
        self.check_markers()
    }

    /// Identifier used in file names and result tables, e.g. `A1`.
    pub fn key(&self) -> String {
        session_key(&self.subject, &self.session)
    }

    pub fn meta(&self) -> RecordingMeta {
        RecordingMeta {
            format: String::from_utf8_lossy(MAGIC).into_owned(),
            version: VERSION,
            subject: self.subject.clone(),
            session: self.session.clone(),
            sampling_rate_hz: self.sampling_rate_hz,
            sensors: self.sensors,
            samples: self.samples,
            trials: self.trials.clone(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.buf.reserve(64 + self.data.len() * 4 + self.trials.len() * 17);
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u32(2);
        w.str(&self.subject);
        w.str(&self.session);
        w.f64(self.sampling_rate_hz);
        w.u32(self.sensors as u32);
        w.u64(self.samples as u64);
        w.f32s(self.data.iter().map(|&x| x as f32));
        w.u32(self.trials.len() as u32);
        for t in &self.trials {
            w.u64(t.onset as u64);
            w.u64(t.duration as u64);
            w.u8(t.label);
        }
        w.buf
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        r.magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.fail(format!("unsupported recording version {version}")));
        }
        let nstr = r.u32()?;
        if nstr != 2 {
            return Err(r.fail(format!("expected subject and session strings, found {nstr}")));
        }
        let subject = r.str()?;
        let session = r.str()?;
        let rate = r.f64()?;
        let sensors = r.u32()? as usize;
        let samples = r.u64()? as usize;
        let n = sensors
            .checked_mul(samples)
            .ok_or_else(|| r.fail("sensor × sample count overflows"))?;
        let data: Vec<f64> = r.f32s(n)?.into_iter().map(f64::from).collect();
        let ntrials = r.u32()? as usize;
        let mut trials = Vec::with_capacity(ntrials);
        for _ in 0..ntrials {
            trials.push(TrialMarker {
                onset: r.u64()? as usize,
                duration: r.u64()? as usize,
                label: r.u8()?,
            });
        }
        if !r.at_end() {
            return Err(r.fail("trailing bytes after trial table"));
        }
        if sensors == 0 {
            return Err(Error::format(path, "zero sensors"));
        }
        Recording::new(subject, session, rate, sensors, data, trials).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Writes the binary file and its `.meta.json` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_atomic(path, &self.encode())?;
        let meta = serde_json::to_vec_pretty(&self.meta())?;
        binio::write_atomic(&meta_path(path), &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Recording::decode(&binio::read_file(path)?, path)
    }
}

pub fn session_key(subject: &str, session: &str) -> String {
    format!("{subject}{session}")
}

/// Sidecar path: `x.nvrc` → `x.meta.json`.
pub fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

/// Human-readable copy of the recording header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordingMeta {
    pub format: String,
    pub version: u32,
    pub subject: String,
    pub session: String,
    pub sampling_rate_hz: f64,
    pub sensors: usize,
    pub samples: usize,
    pub trials: Vec<TrialMarker>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Recording {
        let data: Vec<f64> = (0..40).map(|i| i as f64 * 0.25).collect();
        let trials = vec![
            TrialMarker { onset: 2, duration: 6, label: 3 },
            TrialMarker { onset: 10, duration: 6, label: 0 },
        ];
        Recording::new("A", "1", 256.0, 2, data, trials).unwrap()
    }

    #[test]
    fn encode_decode_round_trip() {
        let rec = tiny();
        let back = Recording::decode(&rec.encode(), Path::new("mem")).unwrap();
        assert_eq!(back, rec);
        assert_eq!(back.key(), "A1");
    }

    #[test]
    fn markers_are_validated() {
        let bad = vec![TrialMarker { onset: 18, duration: 6, label: 0 }];
        assert!(Recording::new("A", "1", 256.0, 2, vec![0.0; 40], bad).is_err());
        let uneven = vec![
            TrialMarker { onset: 0, duration: 4, label: 0 },
            TrialMarker { onset: 5, duration: 5, label: 1 },
        ];
        assert!(Recording::new("A", "1", 256.0, 2, vec![0.0; 40], uneven).is_err());
        let label = vec![TrialMarker { onset: 0, duration: 4, label: 4 }];
        assert!(Recording::new("A", "1", 256.0, 2, vec![0.0; 40], label).is_err());
        assert!(Recording::new("A", "1", 256.0, 0, vec![], vec![]).is_err());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = tiny().encode();
        let err = Recording::decode(&bytes[..bytes.len() - 3], Path::new("x.nvrc")).unwrap_err();
        assert!(err.to_string().contains("x.nvrc"));
    }

    #[test]
    fn sidecar_mirrors_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/A1.nvrc");
        let rec = tiny();
        rec.save(&path).unwrap();
        let meta: RecordingMeta =
            serde_json::from_slice(&std::fs::read(meta_path(&path)).unwrap()).unwrap();
        assert_eq!(meta, rec.meta());
        assert_eq!(Recording::load(&path).unwrap(), rec);
    }
}
