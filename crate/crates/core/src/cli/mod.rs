//! Command-line front end: a JSON run config, one subcommand per stage and
//! a manifest per command.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::{
    analysis_dir, cmd_analyze_codebooks, cmd_eval, cmd_preprocess, cmd_sweep, cmd_synth, cmd_train_classifier, cmd_train_cnn,
    cmd_train_tokenizer, load_model, load_session, model_dir, preprocessed_path, raw_path, results_dir, Flags, Outcome,
};
pub use config::{AnalysisPlan, CaseEntry, CodebookPair, Preset, RunConfig, SeedLists, SynthPlan, SynthSession};
pub use manifest::{file_sum, manifest_path, sha256_file, up_to_date, FileSum, Manifest};

use crate::error::Result;

#[derive(Debug, Parser)]
#[command(name = "neurovq", version, about = "Tokenized and convolutional decoding of synthetic multichannel recordings")]
pub struct Cli {
    /// JSON run config; fields it omits come from its preset.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Replaces the model seed list with this single seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Also retrain the tokenizer with this percentage of sensors zeroed
    /// and match it against the original codebook.
    #[arg(long, global = true, value_name = "PCT")]
    pub retrain_under_failure: Option<u32>,
    /// Parallel case workers for `eval` and `sweep`.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate one recording per configured session.
    Synth,
    /// Filter, re-reference and standardize every recording.
    Preprocess,
    /// Train tokenizers and freeze their codebooks.
    TrainTokenizer,
    /// Train the token classifier on frozen tokenizers.
    TrainClassifier,
    /// Train the convolutional baseline on raw mini-trials.
    TrainCnn,
    /// Evaluate every case at its configured failure percentages.
    Eval,
    /// Evaluate every case at 0, 10, …, 100 % failed sensors.
    Sweep,
    /// Match codebooks of different sessions against each other.
    AnalyzeCodebooks,
    /// Every stage in order, ending with the sweep.
    All,
    /// Print the resolved config.
    ShowConfig,
}

impl Cli {
    pub fn resolve_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seeds.model = vec![seed];
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn flags(&self) -> Flags {
        Flags {
            retrain_under_failure: self.retrain_under_failure,
            jobs: self.jobs.max(1),
        }
    }
}

/// Runs the parsed command and returns the lines to print.
pub fn run(cli: &Cli) -> Result<Vec<String>> {
    let cfg = cli.resolve_config()?;
    let flags = cli.flags();
    let outcomes = match cli.command {
        Command::Synth => vec![cmd_synth(&cfg)?],
        Command::Preprocess => vec![cmd_preprocess(&cfg)?],
        Command::TrainTokenizer => vec![cmd_train_tokenizer(&cfg)?],
        Command::TrainClassifier => vec![cmd_train_classifier(&cfg)?],
        Command::TrainCnn => vec![cmd_train_cnn(&cfg)?],
        Command::Eval => vec![cmd_eval(&cfg, &flags)?],
        Command::Sweep => vec![cmd_sweep(&cfg, &flags)?],
        Command::AnalyzeCodebooks => vec![cmd_analyze_codebooks(&cfg, &flags)?],
        Command::All => vec![
            cmd_synth(&cfg)?,
            cmd_preprocess(&cfg)?,
            cmd_train_tokenizer(&cfg)?,
            cmd_train_classifier(&cfg)?,
            cmd_train_cnn(&cfg)?,
            cmd_sweep(&cfg, &flags)?,
            cmd_analyze_codebooks(&cfg, &flags)?,
        ],
        Command::ShowConfig => return Ok(vec![cfg.to_json()?]),
    };
    Ok(outcomes.iter().flat_map(Outcome::lines).collect())
}

/// Parses `args`, runs, prints, and returns the process exit code:
/// 0 on success, 2 for config or validation errors, 3 for a missing
/// artifact and 4 for a numerical failure.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(lines) => {
            use std::io::Write;
            let mut out = std::io::stdout().lock();
            for l in &lines {
                if writeln!(out, "{l}").is_err() {
                    break;
                }
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
