use neurovq::data::{prepare_session, PipelineConfig, SessionData, SplitSpec};
use neurovq::eval::{ModelConfigs, Sessions};
use neurovq::models::{ClassifierConfig, CnnConfig, FitConfig, TokenizerConfig};
use neurovq::synth::{generate, SynthConfig};

/// Small, fast synthetic session: 6 sensors at 128 Hz after downsampling,
/// 32-sample mini-trials.
pub fn synth(subject: &str, session: &str, subject_seed: u64, session_seed: u64) -> SynthConfig {
    SynthConfig {
        subject: subject.into(),
        session: session.into(),
        sensors: 6,
        trials_per_class: 10,
        trial_seconds: 1.0,
        raw_rate_hz: 256.0,
        subject_seed,
        session_seed,
        gap_seconds: 0.25,
        ..SynthConfig::default()
    }
}

pub fn session(subject: &str, session: &str, subject_seed: u64, session_seed: u64) -> SessionData {
    let raw = generate(&synth(subject, session, subject_seed, session_seed)).unwrap();
    prepare_session(&raw, &PipelineConfig::default(), &SplitSpec::default(), 250.0).unwrap()
}

/// A1, A2 (same subject) and B1.
pub fn sessions() -> Sessions {
    [session("A", "1", 1, 1), session("A", "2", 1, 2), session("B", "1", 2, 3)].into_iter().collect()
}

pub fn configs() -> ModelConfigs {
    let fit = FitConfig { epochs: 2, batch_size: 16, ..FitConfig::default() };
    ModelConfigs {
        tokenizer: TokenizerConfig {
            compression: 4,
            codeword_dim: 8,
            codebook_size: 16,
            channels: [4, 8],
            epochs: 2,
            batch_size: 32,
            series_per_epoch: 256,
            val_series: 64,
            ..TokenizerConfig::default()
        },
        classifier: ClassifierConfig { embed_dim: 8, heads: 2, temporal_layers: 1, spatial_layers: 1, fit: fit.clone(), ..ClassifierConfig::default() },
        cnn: CnnConfig { f1: 2, depth: 2, f2: 4, kernel_len: 8, separable_len: 4, fit, ..CnnConfig::default() },
    }
}
