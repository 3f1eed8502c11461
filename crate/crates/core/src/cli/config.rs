use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::binio;
use crate::data::{session_key, PipelineConfig, SplitSpec};
use crate::error::{Error, Result};
use crate::eval::{CaseKind, CaseSpec, ModelConfigs, ModelKind, ALL_PCTS};
use crate::models::{ClassifierConfig, CnnConfig, FitConfig, TokenizerConfig};
use crate::numerics::AdamConfig;
use crate::synth::SynthConfig;

/// Starting point that a config file overrides field by field.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// 32 sensors, 40 trials per class and models sized for a laptop CPU.
    #[default]
    Desk,
    /// 128 sensors and 150 trials per class.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSession {
    pub subject: String,
    pub session: String,
    pub subject_seed: u64,
    pub session_seed: u64,
}

impl SynthSession {
    pub fn key(&self) -> String {
        session_key(&self.subject, &self.session)
    }
}

/// Generator settings shared by every session, and the sessions themselves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthPlan {
    pub base: SynthConfig,
    pub sessions: Vec<SynthSession>,
}

impl SynthPlan {
    pub fn configs(&self) -> Vec<SynthConfig> {
        self.sessions
            .iter()
            .map(|s| SynthConfig {
                subject: s.subject.clone(),
                session: s.session.clone(),
                subject_seed: s.subject_seed,
                session_seed: s.session_seed,
                ..self.base.clone()
            })
            .collect()
    }
}

/// One generalization case, run for each listed model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseEntry {
    pub kind: CaseKind,
    pub train_session: String,
    pub test_session: String,
    pub models: Vec<ModelKind>,
    /// Percentages used by `eval`; `sweep` always runs every level.
    pub failure_pcts: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedLists {
    pub model: Vec<u64>,
    /// Shared by both models.
    pub failure: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodebookPair {
    pub new: String,
    pub original: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisPlan {
    pub pairs: Vec<CodebookPair>,
    /// Draws the zeroed sensors for `--retrain-under-failure`.
    pub failure_seed: u64,
}

/// Everything a run needs. Files are read as a JSON object laid over the
/// named preset, so they only have to spell out what differs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub out_dir: PathBuf,
    /// Where recordings are read from; defaults to `<out_dir>/raw`, which is
    /// also where `synth` writes.
    pub raw_dir: Option<PathBuf>,
    pub synth: SynthPlan,
    pub pipeline: PipelineConfig,
    pub split: SplitSpec,
    pub window_ms: f64,
    pub models: ModelConfigs,
    pub cases: Vec<CaseEntry>,
    pub seeds: SeedLists,
    pub analysis: AnalysisPlan,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::preset(Preset::Desk)
    }
}

fn sessions() -> Vec<SynthSession> {
    [("A", "1", 1, 11), ("A", "2", 1, 12), ("B", "1", 2, 21), ("B", "2", 2, 22)]
        .into_iter()
        .map(|(subject, session, subject_seed, session_seed)| SynthSession {
            subject: subject.into(),
            session: session.into(),
            subject_seed,
            session_seed,
        })
        .collect()
}

fn cases() -> Vec<CaseEntry> {
    let both = vec![ModelKind::TokenPipeline, ModelKind::CnnBaseline];
    [(CaseKind::Within, "A1"), (CaseKind::CrossSession, "A2"), (CaseKind::CrossSubject, "B1")]
        .into_iter()
        .map(|(kind, test)| CaseEntry {
            kind,
            train_session: "A1".into(),
            test_session: test.into(),
            models: both.clone(),
            failure_pcts: vec![0],
        })
        .collect()
}

fn pairs() -> Vec<CodebookPair> {
    ["A1", "A2", "B1"]
        .into_iter()
        .map(|new| CodebookPair { new: new.into(), original: "A1".into() })
        .collect()
}

impl RunConfig {
    pub fn preset(preset: Preset) -> RunConfig {
        let full = RunConfig {
            preset,
            out_dir: "runs".into(),
            raw_dir: None,
            synth: SynthPlan {
                base: SynthConfig::default(),
                sessions: sessions(),
            },
            pipeline: PipelineConfig::default(),
            split: SplitSpec::default(),
            window_ms: 250.0,
            models: ModelConfigs::default(),
            cases: cases(),
            seeds: SeedLists {
                model: (0..5).collect(),
                failure: (0..3).collect(),
            },
            analysis: AnalysisPlan {
                pairs: pairs(),
                failure_seed: 0,
            },
        };
        match preset {
            Preset::Full => full,
            Preset::Desk => RunConfig {
                synth: SynthPlan {
                    base: SynthConfig {
                        sensors: 32,
                        trials_per_class: 40,
                        ..SynthConfig::default()
                    },
                    sessions: sessions(),
                },
                models: desk_models(),
                seeds: SeedLists {
                    model: (0..3).collect(),
                    failure: (0..3).collect(),
                },
                ..full
            },
        }
    }

    /// Parses a config document; fields it leaves out come from its preset.
    pub fn from_json(text: &str, origin: &Path) -> Result<RunConfig> {
        let user: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", origin.display())))?;
        let Value::Object(_) = user else {
            return Err(Error::Config(format!("{}: top level must be an object", origin.display())));
        };
        let preset: Preset = match user.get("preset") {
            Some(p) => serde_json::from_value(p.clone()).map_err(|e| Error::Config(format!("{}: preset: {e}", origin.display())))?,
            None => Preset::default(),
        };
        let mut merged = serde_json::to_value(RunConfig::preset(preset))?;
        overlay(&mut merged, user);
        let cfg: RunConfig = serde_json::from_value(merged).map_err(|e| Error::Config(format!("{}: {e}", origin.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        if !path.exists() {
            return Err(Error::Config(format!("config file {} does not exist", path.display())));
        }
        let bytes = binio::read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?;
        RunConfig::from_json(&text, path)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// SHA-256 of the resolved config, excluding the output directory so
    /// that identical runs in different places share a hash.
    pub fn hash(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Value::Object(m) = &mut v {
            m.remove("out_dir");
        }
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&v)?)))
    }

    pub fn raw_dir(&self) -> PathBuf {
        self.raw_dir.clone().unwrap_or_else(|| self.out_dir.join("raw"))
    }

    pub fn session_keys(&self) -> Vec<String> {
        self.synth.sessions.iter().map(SynthSession::key).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let keys = self.session_keys();
        let unique: BTreeSet<&String> = keys.iter().collect();
        if unique.len() != keys.len() {
            return bad(format!("duplicate session keys in {keys:?}"));
        }
        for c in self.synth.configs() {
            c.validate()?;
        }
        self.pipeline.validate()?;
        self.split.validate()?;
        if !(self.window_ms > 0.0 && self.window_ms.is_finite()) {
            return bad(format!("window of {} ms must be positive", self.window_ms));
        }
        self.models.tokenizer.validate()?;
        self.models.classifier.validate()?;
        self.models.cnn.fit.validate()?;
        if self.seeds.model.is_empty() {
            return bad("at least one model seed is required".into());
        }
        let known = |k: &str| -> Result<()> {
            if keys.iter().any(|x| x == k) {
                Ok(())
            } else {
                Err(Error::Config(format!("session {k} is not one of {keys:?}")))
            }
        };
        for spec in self.case_specs(false)? {
            known(&spec.train_session)?;
            known(&spec.test_session)?;
        }
        for p in &self.analysis.pairs {
            known(&p.new)?;
            known(&p.original)?;
        }
        if let Some(dir) = &self.raw_dir {
            if !dir.is_dir() {
                return bad(format!("raw_dir {} is not a directory", dir.display()));
            }
        }
        Ok(())
    }

    /// One validated spec per case and model. `all_pcts` replaces each
    /// case's percentages with the full sweep.
    pub fn case_specs(&self, all_pcts: bool) -> Result<Vec<CaseSpec>> {
        let mut specs = Vec::new();
        for c in &self.cases {
            if c.models.is_empty() {
                return Err(Error::Config(format!("case {} → {} lists no models", c.train_session, c.test_session)));
            }
            for &model in &c.models {
                let spec = CaseSpec {
                    kind: c.kind,
                    train_session: c.train_session.clone(),
                    test_session: c.test_session.clone(),
                    failure_pcts: if all_pcts { ALL_PCTS.to_vec() } else { c.failure_pcts.clone() },
                    model_seeds: self.seeds.model.clone(),
                    failure_seeds: self.seeds.failure.clone(),
                    model,
                };
                spec.validate()?;
                specs.push(spec);
            }
        }
        Ok(specs)
    }

    /// Sessions a model of `kind` is trained on. Tokenizers are also
    /// trained for every session named in the codebook analysis.
    pub fn training_sessions(&self, kind: ModelKind, with_analysis: bool) -> Vec<String> {
        let mut out: BTreeSet<String> = self
            .cases
            .iter()
            .filter(|c| c.models.contains(&kind))
            .map(|c| c.train_session.clone())
            .collect();
        if with_analysis && kind == ModelKind::TokenPipeline {
            for p in &self.analysis.pairs {
                out.insert(p.new.clone());
                out.insert(p.original.clone());
            }
        }
        out.into_iter().collect()
    }
}

/// Desk-scale models: coarser tokens and a smaller transformer.
fn desk_models() -> ModelConfigs {
    ModelConfigs {
        tokenizer: TokenizerConfig {
            compression: 64,
            epochs: 4,
            series_per_epoch: 4096,
            ..TokenizerConfig::default()
        },
        classifier: ClassifierConfig {
            embed_dim: 32,
            temporal_layers: 1,
            spatial_layers: 1,
            fit: FitConfig {
                epochs: 20,
                batch_size: 16,
                adam: AdamConfig {
                    lr: 2e-3,
                    ..AdamConfig::default()
                },
            },
            ..ClassifierConfig::default()
        },
        cnn: CnnConfig {
            fit: FitConfig {
                epochs: 10,
                ..FitConfig::default()
            },
            ..CnnConfig::default()
        },
    }
}

/// Recursive object merge; anything that is not an object on both sides is
/// replaced.
fn overlay(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid_and_name_four_sessions() {
        for p in [Preset::Desk, Preset::Full] {
            let c = RunConfig::preset(p);
            c.validate().unwrap();
            assert_eq!(c.session_keys(), ["A1", "A2", "B1", "B2"]);
        }
    }

    #[test]
    fn a_file_overrides_only_what_it_names() {
        let c = RunConfig::from_json(r#"{"window_ms": 500, "synth": {"base": {"sensors": 8}}}"#, Path::new("t.json")).unwrap();
        assert_eq!(c.window_ms, 500.0);
        assert_eq!(c.synth.base.sensors, 8);
        assert_eq!(c.synth.base.trials_per_class, 40);
        let full = RunConfig::from_json(r#"{"preset": "full"}"#, Path::new("t.json")).unwrap();
        assert_eq!(full.synth.base.sensors, 128);
        assert_eq!(full, RunConfig::preset(Preset::Full));
    }

    #[test]
    fn unknown_fields_and_bad_cases_are_config_errors() {
        let e = RunConfig::from_json(r#"{"windw_ms": 5}"#, Path::new("t.json")).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let e = RunConfig::from_json(
            r#"{"cases": [{"kind": "within", "train_session": "A1", "test_session": "A2", "models": ["cnn-baseline"], "failure_pcts": [0]}]}"#,
            Path::new("t.json"),
        )
        .unwrap_err();
        assert!(matches!(e, Error::Config(_)), "{e}");
        let e = RunConfig::from_json(r#"{"analysis": {"pairs": [{"new": "C1", "original": "A1"}]}}"#, Path::new("t.json")).unwrap_err();
        assert!(e.to_string().contains("C1"));
    }

    #[test]
    fn hash_ignores_the_output_directory() {
        let a = RunConfig::default();
        let b = RunConfig { out_dir: "elsewhere".into(), ..a.clone() };
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        let c = RunConfig { window_ms: 125.0, ..a.clone() };
        assert_ne!(a.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn sweep_specs_cover_every_level() {
        let specs = RunConfig::default().case_specs(true).unwrap();
        assert_eq!(specs.len(), 6);
        assert!(specs.iter().all(|s| s.failure_pcts.len() == 11));
        let tok = RunConfig::default().training_sessions(ModelKind::TokenPipeline, true);
        assert_eq!(tok, ["A1", "A2", "B1"]);
    }
}
