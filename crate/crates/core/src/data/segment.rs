use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::preprocess::{apply_stats, channel_stats, preprocess, PipelineConfig, Standardization};
use super::recording::{Recording, NUM_CLASSES};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One labeled `[sensors × samples]` window and where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct MiniTrial {
    pub sensors: usize,
    pub samples: usize,
    /// Row-major `[sensors × samples]`.
    pub data: Vec<f32>,
    pub label: u8,
    /// Session key of the source recording, e.g. `A1`.
    pub session: Arc<str>,
    /// Index of the parent trial in the recording's marker table.
    pub trial: usize,
    pub split: Split,
}

impl MiniTrial {
    pub fn row(&self, sensor: usize) -> &[f32] {
        &self.data[sensor * self.samples..(sensor + 1) * self.samples]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
    /// Partition in recording order instead of shuffling.
    pub chronological: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.8,
            val: 0.1,
            test: 0.1,
            seed: 0,
            chronological: false,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let f = [self.train, self.val, self.test];
        if f.iter().any(|x| !(0.0..=1.0).contains(x)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions {f:?} must be in [0, 1] and sum to 1"
            )));
        }
        if self.train == 0.0 {
            return Err(Error::Config("training fraction must be positive".into()));
        }
        Ok(())
    }

    /// Trial counts `(train, val, test)` for `n` trials.
    pub fn counts(&self, n: usize) -> Result<[usize; 3]> {
        self.validate()?;
        let train = (n as f64 * self.train).round() as usize;
        let val = (n as f64 * self.val).round() as usize;
        if train + val > n {
            return Err(Error::invalid(format!("{n} trials cannot be split as {self:?}")));
        }
        let counts = [train, val, n - train - val];
        for (c, frac) in counts.iter().zip([self.train, self.val, self.test]) {
            if *c == 0 && frac > 0.0 {
                return Err(Error::invalid(format!(
                    "{n} trials are too few for non-empty splits at {:?}",
                    [self.train, self.val, self.test]
                )));
            }
        }
        Ok(counts)
    }
}

/// Trial indices per split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrialPartition {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl TrialPartition {
    pub fn split_of(&self, trial: usize) -> Option<Split> {
        if self.train.contains(&trial) {
            Some(Split::Train)
        } else if self.val.contains(&trial) {
            Some(Split::Val)
        } else if self.test.contains(&trial) {
            Some(Split::Test)
        } else {
            None
        }
    }
}

/// Assigns whole trials to splits.
///
/// Shuffled partitions are stratified: trials of each class are shuffled,
/// interleaved class by class, and the interleaved order is cut at the split
/// counts, so per-class counts differ by at most one between classes.
pub fn partition_trials(rec: &Recording, spec: &SplitSpec) -> Result<TrialPartition> {
    let trials = rec.trials();
    let [n_train, n_val, _] = spec.counts(trials.len())?;
    let order: Vec<usize> = if spec.chronological {
        let mut idx: Vec<usize> = (0..trials.len()).collect();
        idx.sort_by_key(|&i| trials[i].onset);
        idx
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); NUM_CLASSES];
        for (i, t) in trials.iter().enumerate() {
            by_class[t.label as usize].push(i);
        }
        for c in &mut by_class {
            c.shuffle(&mut rng);
        }
        let longest = by_class.iter().map(Vec::len).max().unwrap_or(0);
        (0..longest)
            .flat_map(|r| by_class.iter().filter_map(move |c| c.get(r).copied()))
            .collect()
    };
    Ok(TrialPartition {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    })
}

/// Window length in samples for `window_ms` at `rate_hz`.
pub fn window_samples(window_ms: f64, rate_hz: f64) -> usize {
    (window_ms / 1000.0 * rate_hz).round() as usize
}

/// Cuts trial `index` into consecutive non-overlapping windows; a trailing
/// remainder shorter than a window is dropped.
pub fn segment_trial(rec: &Recording, index: usize, window: usize, split: Split) -> Result<Vec<MiniTrial>> {
    let t = rec.trials()[index];
    if window == 0 || window > t.duration {
        return Err(Error::invalid(format!(
            "window of {window} samples does not fit a {}-sample trial",
            t.duration
        )));
    }
    let session: Arc<str> = rec.key().into();
    let s = rec.sensors();
    Ok((0..t.duration / window)
        .map(|w| {
            let start = t.onset + w * window;
            let mut data = Vec::with_capacity(s * window);
            for sensor in 0..s {
                data.extend(rec.row(sensor)[start..start + window].iter().map(|&x| x as f32));
            }
            MiniTrial {
                sensors: s,
                samples: window,
                data,
                label: t.label,
                session: Arc::clone(&session),
                trial: index,
                split,
            }
        })
        .collect())
}

/// Segments every trial of `rec` into `window_ms` mini-trials, all tagged `split`.
pub fn segment(rec: &Recording, window_ms: f64, split: Split) -> Result<Vec<MiniTrial>> {
    let window = window_samples(window_ms, rec.sampling_rate_hz());
    let mut out = Vec::new();
    for i in 0..rec.trials().len() {
        out.extend(segment_trial(rec, i, window, split)?);
    }
    Ok(out)
}

/// Mini-trials of one session grouped by split.
#[derive(Clone, Debug)]
pub struct SessionData {
    pub key: String,
    pub subject: String,
    pub session: String,
    pub sensors: usize,
    pub window: usize,
    pub sampling_rate_hz: f64,
    pub partition: TrialPartition,
    pub train: Vec<MiniTrial>,
    pub val: Vec<MiniTrial>,
    pub test: Vec<MiniTrial>,
}

impl SessionData {
    pub fn get(&self, split: Split) -> &[MiniTrial] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Partitions an already preprocessed recording and segments each split.
pub fn split(rec: &Recording, spec: &SplitSpec, window_ms: f64) -> Result<SessionData> {
    let partition = partition_trials(rec, spec)?;
    let window = window_samples(window_ms, rec.sampling_rate_hz());
    let cut = |idx: &[usize], tag| -> Result<Vec<MiniTrial>> {
        let mut sorted = idx.to_vec();
        sorted.sort_unstable();
        let mut out = Vec::new();
        for i in sorted {
            out.extend(segment_trial(rec, i, window, tag)?);
        }
        Ok(out)
    };
    Ok(SessionData {
        key: rec.key(),
        subject: rec.subject.clone(),
        session: rec.session.clone(),
        sensors: rec.sensors(),
        window,
        sampling_rate_hz: rec.sampling_rate_hz(),
        train: cut(&partition.train, Split::Train)?,
        val: cut(&partition.val, Split::Val)?,
        test: cut(&partition.test, Split::Test)?,
        partition,
    })
}

/// Preprocessing ready for [`split`]. Train-only standardization is
/// resolved here because it needs the partition.
pub fn preprocess_for_split(raw: &Recording, pipeline: &PipelineConfig, spec: &SplitSpec) -> Result<Recording> {
    let mut rec = preprocess(raw, pipeline)?;
    if pipeline.standardization == Standardization::TrainTrials {
        let partition = partition_trials(&rec, spec)?;
        let ranges: Vec<_> = partition
            .train
            .iter()
            .map(|&i| {
                let t = rec.trials()[i];
                t.onset..t.onset + t.duration
            })
            .collect();
        let stats = channel_stats(&rec, &ranges)?;
        apply_stats(&mut rec, &stats);
    }
    Ok(rec)
}

/// Raw recording to split mini-trials: preprocessing, then partitioning and
/// segmentation.
pub fn prepare_session(raw: &Recording, pipeline: &PipelineConfig, spec: &SplitSpec, window_ms: f64) -> Result<SessionData> {
    split(&preprocess_for_split(raw, pipeline, spec)?, spec, window_ms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::recording::TrialMarker;

    /// `n` trials of `dur` samples back to back, labels cycling through classes.
    fn recording(n: usize, dur: usize, rate: f64) -> Recording {
        let trials: Vec<_> = (0..n)
            .map(|i| TrialMarker { onset: i * dur, duration: dur, label: (i % 4) as u8 })
            .collect();
        let data = (0..2 * n * dur).map(|i| (i % 97) as f64).collect();
        Recording::new("A", "1", rate, 2, data, trials).unwrap()
    }

    #[test]
    fn three_second_trial_gives_twelve_windows() {
        let rec = recording(1, 6144, 2048.0);
        let m = segment(&rec, 250.0, Split::Train).unwrap();
        assert_eq!(m.len(), 12);
        assert!(m.iter().all(|w| w.samples == 512 && w.data.len() == 1024));
        assert_eq!(m[1].row(0)[0], rec.row(0)[512] as f32);
        assert_eq!(segment(&rec, 3000.0, Split::Train).unwrap().len(), 1);
        assert_eq!(segment(&rec, 400.0, Split::Train).unwrap().len(), 7);
        assert!(segment(&rec, 3500.0, Split::Train).is_err());
    }

    #[test]
    fn six_hundred_trials_split_eighty_ten_ten() {
        let rec = recording(600, 24, 96.0);
        let p = partition_trials(&rec, &SplitSpec::default()).unwrap();
        assert_eq!((p.train.len(), p.val.len(), p.test.len()), (480, 60, 60));
        for part in [&p.train, &p.val, &p.test] {
            let mut per = [0usize; 4];
            part.iter().for_each(|&i| per[rec.trials()[i].label as usize] += 1);
            assert!(per.iter().max().unwrap() - per.iter().min().unwrap() <= 1, "{per:?}");
        }
        let per_trial = 24 / window_samples(250.0, 96.0);
        assert_eq!(per_trial, 1);
    }

    #[test]
    fn mini_trial_counts_follow_trial_counts() {
        let rec = recording(40, 6, 24.0);
        let s = split(&rec, &SplitSpec::default(), 125.0).unwrap();
        assert_eq!(s.window, 3);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (64, 8, 8));
        assert!(s.train.iter().all(|m| m.split == Split::Train));
    }

    #[test]
    fn chronological_split_keeps_order() {
        let rec = recording(20, 4, 16.0);
        let spec = SplitSpec { chronological: true, ..SplitSpec::default() };
        let p = partition_trials(&rec, &spec).unwrap();
        assert_eq!(p.train, (0..16).collect::<Vec<_>>());
        assert_eq!(p.test, vec![18, 19]);
    }

    #[test]
    fn too_few_trials_and_bad_fractions_fail() {
        let rec = recording(4, 4, 16.0);
        assert!(partition_trials(&rec, &SplitSpec::default()).is_err());
        let bad = SplitSpec { train: 0.7, ..SplitSpec::default() };
        assert!(bad.validate().is_err());
    }
}
