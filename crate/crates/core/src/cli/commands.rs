use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;

use super::config::RunConfig;
use super::manifest::{file_sum, up_to_date, Manifest};
use crate::analysis::{export_analysis, match_codebooks, MatchReport};
use crate::binio;
use crate::data::{preprocess_for_split, split, AccessEntry, AccessLog, Recording, SessionData};
use crate::error::{Error, Result};
use crate::eval::{failed_sensors, run_cases_with, summarize, write_results, ModelKind, Runner, Sessions, TrainedModel};
use crate::models::{train_classifier, train_cnn, train_tokenizer, Codebook, Tokenizer};
use crate::synth::generate;

/// Run-wide options from the command line.
#[derive(Clone, Debug)]
pub struct Flags {
    pub retrain_under_failure: Option<u32>,
    pub jobs: usize,
}

impl Default for Flags {
    fn default() -> Self {
        Flags { retrain_under_failure: None, jobs: 1 }
    }
}

/// What a command did, for printing.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub manifest: Manifest,
    pub skipped: bool,
}

impl Outcome {
    pub fn lines(&self) -> Vec<String> {
        let mut out = self.manifest.summary.clone();
        if self.skipped {
            out.push(format!("{}: outputs unchanged (checksums match), skipped", self.manifest.command));
        }
        out
    }
}

pub fn raw_path(cfg: &RunConfig, key: &str) -> PathBuf {
    cfg.raw_dir().join(format!("{key}.nvrc"))
}

pub fn preprocessed_path(cfg: &RunConfig, key: &str) -> PathBuf {
    cfg.out_dir.join("preprocessed").join(format!("{key}.nvrc"))
}

pub fn model_dir(cfg: &RunConfig, key: &str, kind: ModelKind, seed: u64) -> PathBuf {
    cfg.out_dir.join("models").join(key).join(kind.name()).join(format!("seed-{seed}"))
}

pub fn results_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("results")
}

pub fn analysis_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("analysis")
}

const TOKENIZER_FILES: [&str; 5] = ["tokenizer.nvck", "codebook.nvcb", "tokenizer.json", "tokenizer_log.json", "tokenizer_access.json"];
const CLASSIFIER_FILES: [&str; 4] = ["classifier.nvck", "classifier.json", "classifier_log.json", "classifier_access.json"];
const CNN_FILES: [&str; 4] = ["cnn.nvck", "cnn.json", "cnn_log.json", "cnn_access.json"];

fn model_files(kind: ModelKind) -> Vec<&'static str> {
    match kind {
        ModelKind::TokenPipeline => TOKENIZER_FILES.iter().chain(&CLASSIFIER_FILES).copied().collect(),
        ModelKind::CnnBaseline => CNN_FILES.to_vec(),
    }
}

/// Runs `body` unless a manifest shows the same command already produced
/// intact outputs from the same config, arguments and inputs.
fn step(
    cfg: &RunConfig,
    command: &str,
    args: BTreeMap<String, String>,
    inputs: Vec<PathBuf>,
    body: impl FnOnce() -> Result<(Vec<PathBuf>, Vec<String>)>,
) -> Result<Outcome> {
    let out = &cfg.out_dir;
    if !out.exists() {
        info!("creating output directory {}", out.display());
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    let hash = cfg.hash()?;
    if let Some(manifest) = up_to_date(out, command, &hash, &args, &inputs) {
        return Ok(Outcome { manifest, skipped: true });
    }
    let start = Instant::now();
    let (outputs, summary) = body()?;
    let manifest = Manifest {
        command: command.into(),
        config_hash: hash,
        args,
        model_seeds: cfg.seeds.model.clone(),
        failure_seeds: cfg.seeds.failure.clone(),
        inputs: inputs.iter().map(|p| file_sum(out, p)).collect::<Result<_>>()?,
        outputs: outputs.iter().map(|p| file_sum(out, p)).collect::<Result<_>>()?,
        wall_time_s: start.elapsed().as_secs_f64(),
        version: env!("CARGO_PKG_VERSION").into(),
        summary,
    };
    manifest.save(out)?;
    Ok(Outcome { manifest, skipped: false })
}

fn require(path: &Path, command: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            command: command.into(),
        })
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<PathBuf> {
    binio::write_atomic(path, &serde_json::to_vec_pretty(value)?)?;
    Ok(path.to_path_buf())
}

fn read_access(path: &Path, command: &str) -> Result<AccessLog> {
    require(path, command)?;
    let entries: Vec<AccessEntry> = serde_json::from_slice(&binio::read_file(path)?)?;
    Ok(entries.into_iter().collect())
}

/// Loads a preprocessed session and cuts it into split mini-trials.
pub fn load_session(cfg: &RunConfig, key: &str) -> Result<SessionData> {
    let path = preprocessed_path(cfg, key);
    require(&path, "preprocess")?;
    split(&Recording::load(&path)?, &cfg.split, cfg.window_ms)
}

/// Loads a trained model together with the data it was trained on.
pub fn load_model(cfg: &RunConfig, key: &str, kind: ModelKind, seed: u64) -> Result<(TrainedModel, AccessLog)> {
    let dir = model_dir(cfg, key, kind, seed);
    let model = TrainedModel::load(kind, &dir)?;
    let access = match kind {
        ModelKind::TokenPipeline => {
            let mut a = read_access(&dir.join("tokenizer_access.json"), "train-tokenizer")?;
            a.merge(&read_access(&dir.join("classifier_access.json"), "train-classifier")?);
            a
        }
        ModelKind::CnnBaseline => read_access(&dir.join("cnn_access.json"), "train-cnn")?,
    };
    Ok((model, access))
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<Outcome> {
    step(cfg, "synth", BTreeMap::new(), Vec::new(), || {
        let mut outputs = Vec::new();
        let mut summary = Vec::new();
        for sc in cfg.synth.configs() {
            let rec = generate(&sc)?;
            let path = raw_path(cfg, &sc.key());
            rec.save(&path)?;
            summary.push(format!("{}: {} sensors, {} trials → {}", sc.key(), rec.sensors(), rec.trials().len(), path.display()));
            outputs.push(path.clone());
            outputs.push(crate::data::meta_path(&path));
        }
        Ok((outputs, summary))
    })
}

pub fn cmd_preprocess(cfg: &RunConfig) -> Result<Outcome> {
    let keys = cfg.session_keys();
    let inputs = keys.iter().map(|k| raw_path(cfg, k)).collect();
    step(cfg, "preprocess", BTreeMap::new(), inputs, || {
        let mut outputs = Vec::new();
        let mut summary = Vec::new();
        for key in &keys {
            let raw_file = raw_path(cfg, key);
            require(&raw_file, "synth")?;
            let rec = preprocess_for_split(&Recording::load(&raw_file)?, &cfg.pipeline, &cfg.split)?;
            let path = preprocessed_path(cfg, key);
            rec.save(&path)?;
            summary.push(format!("{key}: {} samples at {} Hz", rec.samples(), rec.sampling_rate_hz()));
            outputs.push(path.clone());
            outputs.push(crate::data::meta_path(&path));
        }
        Ok((outputs, summary))
    })
}

fn session_inputs(cfg: &RunConfig, keys: &[String]) -> Vec<PathBuf> {
    keys.iter().map(|k| preprocessed_path(cfg, k)).collect()
}

pub fn cmd_train_tokenizer(cfg: &RunConfig) -> Result<Outcome> {
    let keys = cfg.training_sessions(ModelKind::TokenPipeline, true);
    step(cfg, "train-tokenizer", BTreeMap::new(), session_inputs(cfg, &keys), || {
        let mut outputs = Vec::new();
        let mut summary = Vec::new();
        for key in &keys {
            let data = load_session(cfg, key)?;
            for &seed in &cfg.seeds.model {
                let (tok, log) = train_tokenizer(&data.train, &data.val, &cfg.models.tokenizer, seed)?;
                let dir = model_dir(cfg, key, ModelKind::TokenPipeline, seed);
                tok.save(&dir)?;
                write_json(&dir.join("tokenizer_log.json"), &log)?;
                write_json(&dir.join("tokenizer_access.json"), &log.access.entries())?;
                outputs.extend(TOKENIZER_FILES.iter().map(|f| dir.join(f)));
                let last = log.epochs.last().map_or(log.initial_val_mse, |e| e.val_recon_mse);
                summary.push(format!("{key} seed {seed}: held-out reconstruction MSE {:.4} → {last:.4}", log.initial_val_mse));
            }
        }
        Ok((outputs, summary))
    })
}

pub fn cmd_train_classifier(cfg: &RunConfig) -> Result<Outcome> {
    let keys = cfg.training_sessions(ModelKind::TokenPipeline, false);
    let mut inputs = session_inputs(cfg, &keys);
    for key in &keys {
        for &seed in &cfg.seeds.model {
            let dir = model_dir(cfg, key, ModelKind::TokenPipeline, seed);
            inputs.extend(TOKENIZER_FILES.iter().map(|f| dir.join(f)));
        }
    }
    step(cfg, "train-classifier", BTreeMap::new(), inputs, || {
        let mut outputs = Vec::new();
        let mut summary = Vec::new();
        for key in &keys {
            let data = load_session(cfg, key)?;
            for &seed in &cfg.seeds.model {
                let dir = model_dir(cfg, key, ModelKind::TokenPipeline, seed);
                let tok = Tokenizer::load(&dir)?;
                let train = tok.tokenize_all(&data.train)?;
                let val = tok.tokenize_all(&data.val)?;
                let (cls, log) = train_classifier(&train, &val, &cfg.models.classifier, tok.codebook().len(), seed)?;
                cls.save(&dir)?;
                write_json(&dir.join("classifier_log.json"), &log)?;
                write_json(&dir.join("classifier_access.json"), &log.access.entries())?;
                outputs.extend(CLASSIFIER_FILES.iter().map(|f| dir.join(f)));
                summary.push(format!(
                    "{key} seed {seed}: best validation accuracy {:.3} at epoch {}",
                    log.best_val_accuracy, log.best_epoch
                ));
            }
        }
        Ok((outputs, summary))
    })
}

pub fn cmd_train_cnn(cfg: &RunConfig) -> Result<Outcome> {
    let keys = cfg.training_sessions(ModelKind::CnnBaseline, false);
    step(cfg, "train-cnn", BTreeMap::new(), session_inputs(cfg, &keys), || {
        let mut outputs = Vec::new();
        let mut summary = Vec::new();
        for key in &keys {
            let data = load_session(cfg, key)?;
            for &seed in &cfg.seeds.model {
                let (cnn, log) = train_cnn(&data.train, &data.val, &cfg.models.cnn, seed)?;
                let dir = model_dir(cfg, key, ModelKind::CnnBaseline, seed);
                cnn.save(&dir)?;
                write_json(&dir.join("cnn_log.json"), &log)?;
                write_json(&dir.join("cnn_access.json"), &log.access.entries())?;
                outputs.extend(CNN_FILES.iter().map(|f| dir.join(f)));
                summary.push(format!(
                    "{key} seed {seed}: best validation accuracy {:.3} at epoch {}",
                    log.best_val_accuracy, log.best_epoch
                ));
            }
        }
        Ok((outputs, summary))
    })
}

fn run_evaluation(cfg: &RunConfig, flags: &Flags, command: &str, all_pcts: bool) -> Result<Outcome> {
    let specs = cfg.case_specs(all_pcts)?;
    let keys: BTreeSet<String> = specs
        .iter()
        .flat_map(|s| [s.train_session.clone(), s.test_session.clone()])
        .collect();
    let keys: Vec<String> = keys.into_iter().collect();
    let trained: BTreeSet<(String, ModelKind)> = specs.iter().map(|s| (s.train_session.clone(), s.model)).collect();
    let mut inputs = session_inputs(cfg, &keys);
    for (key, kind) in &trained {
        for &seed in &cfg.seeds.model {
            let dir = model_dir(cfg, key, *kind, seed);
            inputs.extend(model_files(*kind).into_iter().map(|f| dir.join(f)));
        }
    }
    step(cfg, command, BTreeMap::new(), inputs, || {
        let mut runner = Runner::new(&cfg.models);
        for (key, kind) in &trained {
            for &seed in &cfg.seeds.model {
                let (model, access) = load_model(cfg, key, *kind, seed)?;
                runner.insert(key, seed, model, access);
            }
        }
        let sessions: Sessions = keys.iter().map(|k| load_session(cfg, k)).collect::<Result<_>>()?;
        let outputs = run_cases_with(&specs, &sessions, &runner, flags.jobs)?;
        let dir = results_dir(cfg);
        write_results(&dir, command, &outputs)?;
        let mut summary = Vec::new();
        for case in &summarize(&outputs)?.cases {
            let s = &case.spec;
            let points: Vec<String> = case
                .curve
                .points
                .iter()
                .map(|p| format!("{}%: {:.3} ± {:.3}", p.failure_pct, p.mean, p.sem))
                .collect();
            summary.push(format!(
                "{} {} → {} {}: {} (slope {:.5}, test samples in training {})",
                s.kind.name(),
                s.train_session,
                s.test_session,
                s.model.name(),
                points.join(", "),
                case.curve.slope,
                case.test_leakage
            ));
        }
        Ok((vec![dir.join(format!("{command}.csv")), dir.join(format!("{command}.json"))], summary))
    })
}

/// Evaluates every configured case at its own failure percentages.
pub fn cmd_eval(cfg: &RunConfig, flags: &Flags) -> Result<Outcome> {
    run_evaluation(cfg, flags, "eval", false)
}

/// Evaluates every configured case at 0, 10, …, 100 % failed sensors.
pub fn cmd_sweep(cfg: &RunConfig, flags: &Flags) -> Result<Outcome> {
    run_evaluation(cfg, flags, "sweep", true)
}

fn load_codebook(cfg: &RunConfig, key: &str, seed: u64) -> Result<Codebook> {
    let path = model_dir(cfg, key, ModelKind::TokenPipeline, seed).join("codebook.nvcb");
    require(&path, "train-tokenizer")?;
    Codebook::load(&path)
}

fn files_in(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    out.retain(|p| p.is_file());
    out.sort();
    Ok(out)
}

fn report_line(r: &MatchReport, k: usize) -> String {
    format!(
        "{} → {}: average MSE {:?}, {} of {k} codewords subselected",
        r.new_id, r.original_id, r.average_mse, r.num_subselected
    )
}

/// Matches codebooks pairwise and, with `--retrain-under-failure`, also
/// matches a tokenizer retrained with that share of sensors zeroed against
/// the original codebook.
pub fn cmd_analyze_codebooks(cfg: &RunConfig, flags: &Flags) -> Result<Outcome> {
    let seed = cfg.seeds.model[0];
    let mut args = BTreeMap::new();
    let originals: BTreeSet<String> = cfg.analysis.pairs.iter().map(|p| p.original.clone()).collect();
    let mut keys: BTreeSet<String> = originals.clone();
    keys.extend(cfg.analysis.pairs.iter().map(|p| p.new.clone()));
    let mut inputs: Vec<PathBuf> = keys
        .iter()
        .map(|k| model_dir(cfg, k, ModelKind::TokenPipeline, seed).join("codebook.nvcb"))
        .collect();
    if let Some(pct) = flags.retrain_under_failure {
        if pct > 100 {
            return Err(Error::Config(format!("--retrain-under-failure {pct} outside 0..=100")));
        }
        args.insert("retrain_under_failure".into(), pct.to_string());
        inputs.extend(originals.iter().map(|k| preprocessed_path(cfg, k)));
    }
    step(cfg, "analyze-codebooks", args, inputs, || {
        let root = analysis_dir(cfg);
        let mut outputs = Vec::new();
        let mut summary = Vec::new();
        let mut table = Vec::new();
        let mut emit = |report: MatchReport, new: &Codebook, orig: &Codebook| -> Result<()> {
            let dir = root.join(format!("{}_to_{}", report.new_id, report.original_id));
            export_analysis(&dir, &report, new, orig)?;
            outputs.extend(files_in(&dir)?);
            summary.push(report_line(&report, orig.len()));
            table.push(serde_json::json!({
                "new": report.new_id,
                "original": report.original_id,
                "average_mse": report.average_mse,
                "num_subselected": report.num_subselected,
            }));
            Ok(())
        };
        for p in &cfg.analysis.pairs {
            let new = load_codebook(cfg, &p.new, seed)?;
            let orig = load_codebook(cfg, &p.original, seed)?;
            emit(match_codebooks(&new, &p.new, &orig, &p.original)?, &new, &orig)?;
        }
        if let Some(pct) = flags.retrain_under_failure {
            for key in &originals {
                let data = load_session(cfg, key)?;
                let failed = failed_sensors(data.sensors, pct, cfg.analysis.failure_seed)?;
                let train = crate::eval::zero_sensors(&data.train, &failed)?;
                let val = crate::eval::zero_sensors(&data.val, &failed)?;
                let (tok, _) = train_tokenizer(&train, &val, &cfg.models.tokenizer, seed)?;
                let orig = load_codebook(cfg, key, seed)?;
                let id = format!("{key}_sub{pct}");
                emit(match_codebooks(tok.codebook(), &id, &orig, key)?, tok.codebook(), &orig)?;
            }
        }
        outputs.push(write_json(&root.join("table.json"), &table)?);
        Ok((outputs, summary))
    })
}
