use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use log::info;
use serde::{Deserialize, Serialize};

use super::failure::failed_sensors;
use super::pipeline::{ModelConfigs, ModelKind, TrainedModel};
use super::stats::{mean, sem, slope};
use crate::data::{AccessLog, SessionData, Split};
use crate::error::{Error, Result};

/// Every failure level of the sweep, 0 to 100 in steps of 10.
pub const ALL_PCTS: [u32; 11] = [0, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CaseKind {
    Within,
    CrossSession,
    CrossSubject,
}

impl CaseKind {
    pub fn name(self) -> &'static str {
        match self {
            CaseKind::Within => "within",
            CaseKind::CrossSession => "cross-session",
            CaseKind::CrossSubject => "cross-subject",
        }
    }

    /// The kind implied by a pair of sessions.
    pub fn of(train: &SessionData, test: &SessionData) -> CaseKind {
        if train.subject != test.subject {
            CaseKind::CrossSubject
        } else if train.session != test.session {
            CaseKind::CrossSession
        } else {
            CaseKind::Within
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaseSpec {
    pub kind: CaseKind,
    pub train_session: String,
    pub test_session: String,
    pub failure_pcts: Vec<u32>,
    pub model_seeds: Vec<u64>,
    /// Shared by every model seed, so both models see the same failures.
    pub failure_seeds: Vec<u64>,
    pub model: ModelKind,
}

impl Default for CaseSpec {
    fn default() -> Self {
        CaseSpec {
            kind: CaseKind::Within,
            train_session: "A1".into(),
            test_session: "A1".into(),
            failure_pcts: vec![0],
            model_seeds: (0..5).collect(),
            failure_seeds: (0..3).collect(),
            model: ModelKind::TokenPipeline,
        }
    }
}

impl CaseSpec {
    /// Checks that need no data: percentages and seed lists.
    pub fn validate(&self) -> Result<()> {
        if let Some(p) = self.failure_pcts.iter().find(|&&p| p > 100) {
            return Err(Error::Config(format!("failure percentage {p} outside 0..=100")));
        }
        if self.failure_pcts.is_empty() || self.model_seeds.is_empty() {
            return Err(Error::Config("a case needs failure percentages and model seeds".into()));
        }
        if self.failure_pcts.iter().any(|&p| p > 0) && self.failure_seeds.is_empty() {
            return Err(Error::Config("failure percentages above 0 need failure seeds".into()));
        }
        if self.kind == CaseKind::Within && self.train_session != self.test_session {
            return Err(Error::Config(format!(
                "within-session case names two sessions ({} and {})",
                self.train_session, self.test_session
            )));
        }
        if self.kind != CaseKind::Within && self.train_session == self.test_session {
            return Err(Error::Config(format!(
                "{} case trains and tests on the same session {}",
                self.kind.name(),
                self.train_session
            )));
        }
        Ok(())
    }

    /// Full check once the sessions' subject and session ids are known.
    pub fn validate_sessions(&self, train: &SessionData, test: &SessionData) -> Result<()> {
        self.validate()?;
        let actual = CaseKind::of(train, test);
        if actual != self.kind {
            return Err(Error::Config(format!(
                "case declared {} but {} → {} is {}",
                self.kind.name(),
                train.key,
                test.key,
                actual.name()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyValue {
    pub model_seed: u64,
    /// `None` at 0% failure, where there is nothing to draw.
    pub failure_seed: Option<u64>,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub model_seed: u64,
    pub mean: f64,
    /// Over failure seeds at this model seed.
    pub sem: f64,
    pub n: usize,
}

/// Accuracies of one case at one failure percentage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub kind: CaseKind,
    pub train_session: String,
    pub test_session: String,
    pub model: ModelKind,
    pub failure_pct: u32,
    pub values: Vec<AccuracyValue>,
    pub mean: f64,
    /// Pooled over every value: model seeds at 0%, model × failure seeds above.
    pub sem: f64,
    pub per_model_seed: Vec<SeedSummary>,
}

impl CaseResult {
    fn new(spec: &CaseSpec, pct: u32, values: Vec<AccuracyValue>) -> Self {
        let acc: Vec<f64> = values.iter().map(|v| v.accuracy).collect();
        let per_model_seed = spec
            .model_seeds
            .iter()
            .map(|&s| {
                let own: Vec<f64> = values.iter().filter(|v| v.model_seed == s).map(|v| v.accuracy).collect();
                SeedSummary {
                    model_seed: s,
                    mean: mean(&own),
                    sem: sem(&own),
                    n: own.len(),
                }
            })
            .collect();
        CaseResult {
            kind: spec.kind,
            train_session: spec.train_session.clone(),
            test_session: spec.test_session.clone(),
            model: spec.model,
            failure_pct: pct,
            mean: mean(&acc),
            sem: sem(&acc),
            values,
            per_model_seed,
        }
    }
}

/// Sensors zeroed for one `(pct, failure seed)` pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub failure_pct: u32,
    pub failure_seed: u64,
    pub sensors: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct CaseOutput {
    pub spec: CaseSpec,
    /// One entry per failure percentage, in spec order.
    pub results: Vec<CaseResult>,
    /// Every failed set handed to the model.
    pub failures: Vec<FailureRecord>,
    /// Data behind every gradient step of every model seed.
    pub access: AccessLog,
}

impl CaseOutput {
    /// Samples that reached a gradient step although they belong to the
    /// test data: any sample of the test session in cross cases, and test
    /// split samples otherwise.
    pub fn test_leakage(&self) -> usize {
        match self.spec.kind {
            CaseKind::Within => self.access.count(&self.spec.test_session, Split::Test),
            _ => self.access.session_total(&self.spec.test_session),
        }
    }

    /// Accuracy curve over the percentages of this case.
    pub fn curve(&self) -> Curve {
        let x: Vec<f64> = self.results.iter().map(|r| r.failure_pct as f64).collect();
        let y: Vec<f64> = self.results.iter().map(|r| r.mean).collect();
        Curve {
            points: self.results.clone(),
            slope: slope(&x, &y),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub points: Vec<CaseResult>,
    /// Least-squares slope of mean accuracy per failure percentage point.
    pub slope: f64,
}

/// Named preprocessed sessions.
#[derive(Clone, Debug, Default)]
pub struct Sessions {
    map: BTreeMap<String, SessionData>,
}

impl Sessions {
    pub fn insert(&mut self, data: SessionData) {
        self.map.insert(data.key.clone(), data);
    }

    pub fn get(&self, key: &str) -> Result<&SessionData> {
        self.map
            .get(key)
            .ok_or_else(|| Error::invalid(format!("session {key} is not loaded; known: {:?}", self.map.keys().collect::<Vec<_>>())))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }
}

impl FromIterator<SessionData> for Sessions {
    fn from_iter<I: IntoIterator<Item = SessionData>>(iter: I) -> Self {
        let mut s = Sessions::default();
        iter.into_iter().for_each(|d| s.insert(d));
        s
    }
}

pub type ModelKey = (String, ModelKind, u64);

/// Runs cases, training each `(train session, model, seed)` once and
/// reusing it for every case, percentage and failure seed.
#[derive(Clone)]
pub struct Runner<'a> {
    cfgs: &'a ModelConfigs,
    trained: BTreeMap<ModelKey, (TrainedModel, AccessLog)>,
}

impl<'a> Runner<'a> {
    pub fn new(cfgs: &'a ModelConfigs) -> Self {
        Runner {
            cfgs,
            trained: BTreeMap::new(),
        }
    }

    /// Registers an already trained model, e.g. one loaded from disk.
    pub fn insert(&mut self, session: &str, seed: u64, model: TrainedModel, access: AccessLog) {
        self.trained.insert((session.to_string(), model.kind(), seed), (model, access));
    }

    pub fn model(&mut self, kind: ModelKind, data: &SessionData, seed: u64) -> Result<&(TrainedModel, AccessLog)> {
        let key = (data.key.clone(), kind, seed);
        if !self.trained.contains_key(&key) {
            info!("training {} on {} with seed {seed}", kind.name(), data.key);
            let trained = TrainedModel::train(kind, data, self.cfgs, seed)?;
            self.trained.insert(key.clone(), trained);
        }
        Ok(&self.trained[&key])
    }

    /// Trained models keyed by `(train session, model, seed)`.
    pub fn trained(&self) -> impl Iterator<Item = (&ModelKey, &TrainedModel)> {
        self.trained.iter().map(|(k, (m, _))| (k, m))
    }

    /// A runner holding only the models trained on `session` of `kind`.
    pub fn subset(&self, session: &str, kind: ModelKind) -> Runner<'a> {
        Runner {
            cfgs: self.cfgs,
            trained: self
                .trained
                .iter()
                .filter(|((s, k, _), _)| s == session && *k == kind)
                .map(|(key, v)| (key.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn run(&mut self, spec: &CaseSpec, sessions: &Sessions) -> Result<CaseOutput> {
        let train = sessions.get(&spec.train_session)?;
        let test = sessions.get(&spec.test_session)?;
        spec.validate_sessions(train, test)?;
        let mut per_pct: Vec<Vec<AccuracyValue>> = vec![Vec::new(); spec.failure_pcts.len()];
        let mut failures = Vec::new();
        let mut access = AccessLog::default();
        for &seed in &spec.model_seeds {
            let (model, log) = self.model(spec.model, train, seed)?;
            access.merge(log);
            let eval = model.evaluator(&test.test)?;
            for (slot, &pct) in per_pct.iter_mut().zip(&spec.failure_pcts) {
                if pct == 0 {
                    slot.push(AccuracyValue {
                        model_seed: seed,
                        failure_seed: None,
                        accuracy: eval.accuracy(&[])?,
                    });
                    continue;
                }
                for &fseed in &spec.failure_seeds {
                    let failed = failed_sensors(test.sensors, pct, fseed)?;
                    slot.push(AccuracyValue {
                        model_seed: seed,
                        failure_seed: Some(fseed),
                        accuracy: eval.accuracy(&failed)?,
                    });
                    if seed == spec.model_seeds[0] {
                        failures.push(FailureRecord {
                            failure_pct: pct,
                            failure_seed: fseed,
                            sensors: failed,
                        });
                    }
                }
            }
        }
        let results = spec
            .failure_pcts
            .iter()
            .zip(per_pct)
            .map(|(&pct, values)| CaseResult::new(spec, pct, values))
            .collect();
        Ok(CaseOutput {
            spec: spec.clone(),
            results,
            failures,
            access,
        })
    }
}

/// One case with a fresh runner.
pub fn run_case(spec: &CaseSpec, sessions: &Sessions, cfgs: &ModelConfigs) -> Result<CaseOutput> {
    Runner::new(cfgs).run(spec, sessions)
}

/// The case evaluated at every failure level.
pub fn sweep(spec: &CaseSpec, sessions: &Sessions, cfgs: &ModelConfigs) -> Result<Curve> {
    let spec = CaseSpec {
        failure_pcts: ALL_PCTS.to_vec(),
        ..spec.clone()
    };
    Ok(run_case(&spec, sessions, cfgs)?.curve())
}

/// Runs `specs` on up to `jobs` threads. Cases sharing a training session and
/// model form one job so their models are trained once; outputs come back in
/// spec order and do not depend on `jobs`.
pub fn run_cases(specs: &[CaseSpec], sessions: &Sessions, cfgs: &ModelConfigs, jobs: usize) -> Result<Vec<CaseOutput>> {
    run_cases_with(specs, sessions, &Runner::new(cfgs), jobs)
}

/// [`run_cases`] starting from the models already held by `base`.
pub fn run_cases_with(specs: &[CaseSpec], sessions: &Sessions, base: &Runner, jobs: usize) -> Result<Vec<CaseOutput>> {
    for spec in specs {
        spec.validate_sessions(sessions.get(&spec.train_session)?, sessions.get(&spec.test_session)?)?;
    }
    let mut groups: BTreeMap<(String, ModelKind), Vec<usize>> = BTreeMap::new();
    for (i, s) in specs.iter().enumerate() {
        groups.entry((s.train_session.clone(), s.model)).or_default().push(i);
    }
    let groups: Vec<Vec<usize>> = groups.into_values().collect();
    let next = AtomicUsize::new(0);
    let outputs: Mutex<Vec<Option<Result<CaseOutput>>>> = Mutex::new((0..specs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, groups.len().max(1)) {
            scope.spawn(|| loop {
                let g = next.fetch_add(1, Ordering::SeqCst);
                let Some(group) = groups.get(g) else { break };
                let first = &specs[group[0]];
                let mut runner = base.subset(&first.train_session, first.model);
                for &i in group {
                    let out = runner.run(&specs[i], sessions);
                    outputs.lock().expect("no poisoned workers")[i] = Some(out);
                }
            });
        }
    });
    outputs
        .into_inner()
        .expect("no poisoned workers")
        .into_iter()
        .map(|o| o.expect("every case ran"))
        .collect()
}

/// Per-point difference of two matching result sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffRow {
    pub kind: CaseKind,
    pub train_session: String,
    pub test_session: String,
    pub failure_pct: u32,
    pub a_mean: f64,
    pub b_mean: f64,
    /// `a_mean − b_mean`; positive when A decodes better.
    pub difference: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffReport {
    pub rows: Vec<DiffRow>,
    pub mean_difference: f64,
}

/// Differences `A − B` of mean accuracy for results describing the same
/// cases and percentages in the same order.
pub fn accuracy_diff_report(a: &[CaseResult], b: &[CaseResult]) -> Result<DiffReport> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("{} results vs {}", a.len(), b.len())));
    }
    let mut rows = Vec::with_capacity(a.len());
    for (x, y) in a.iter().zip(b) {
        let same = x.kind == y.kind
            && x.train_session == y.train_session
            && x.test_session == y.test_session
            && x.failure_pct == y.failure_pct;
        if !same {
            return Err(Error::invalid(format!(
                "cannot compare {} {}→{} at {}% with {} {}→{} at {}%",
                x.kind.name(),
                x.train_session,
                x.test_session,
                x.failure_pct,
                y.kind.name(),
                y.train_session,
                y.test_session,
                y.failure_pct
            )));
        }
        rows.push(DiffRow {
            kind: x.kind,
            train_session: x.train_session.clone(),
            test_session: x.test_session.clone(),
            failure_pct: x.failure_pct,
            a_mean: x.mean,
            b_mean: y.mean,
            difference: x.mean - y.mean,
        });
    }
    let d: Vec<f64> = rows.iter().map(|r| r.difference).collect();
    Ok(DiffReport {
        mean_difference: mean(&d),
        rows,
    })
}
