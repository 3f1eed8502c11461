use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::segment::{MiniTrial, Split};

/// Anything a model can be trained on, with the provenance needed to audit
/// which data reached a gradient.
pub trait Sample {
    fn label(&self) -> u8;
    fn session(&self) -> &str;
    fn split(&self) -> Split;
}

impl Sample for MiniTrial {
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

/// Counts of samples that contributed to gradient steps, per session and split.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AccessLog {
    counts: BTreeMap<(String, Split), usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessEntry {
    pub session: String,
    pub split: Split,
    pub samples: usize,
}

impl AccessLog {
    pub fn record(&mut self, sample: &impl Sample) {
        *self
            .counts
            .entry((sample.session().to_string(), sample.split()))
            .or_default() += 1;
    }

    pub fn count(&self, session: &str, split: Split) -> usize {
        self.counts.get(&(session.to_string(), split)).copied().unwrap_or(0)
    }

    /// Samples from `session` in any split.
    pub fn session_total(&self, session: &str) -> usize {
        self.counts
            .iter()
            .filter(|((s, _), _)| s == session)
            .map(|(_, c)| c)
            .sum()
    }

    /// Samples outside the training split of any session.
    pub fn non_train_total(&self) -> usize {
        self.counts
            .iter()
            .filter(|((_, sp), _)| *sp != Split::Train)
            .map(|(_, c)| c)
            .sum()
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn merge(&mut self, other: &AccessLog) {
        for (k, v) in &other.counts {
            *self.counts.entry(k.clone()).or_default() += v;
        }
    }

    pub fn entries(&self) -> Vec<AccessEntry> {
        self.counts
            .iter()
            .map(|((session, split), &samples)| AccessEntry {
                session: session.clone(),
                split: *split,
                samples,
            })
            .collect()
    }
}

impl FromIterator<AccessEntry> for AccessLog {
    fn from_iter<I: IntoIterator<Item = AccessEntry>>(iter: I) -> Self {
        let mut log = AccessLog::default();
        for e in iter {
            *log.counts.entry((e.session, e.split)).or_default() += e.samples;
        }
        log
    }
}

