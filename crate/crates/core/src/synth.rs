//! Seeded multi-subject, multi-session recordings with class-specific
//! oscillations mixed through subject-specific spatial patterns.
//!
//! The subject seed fixes sensor patterns and background mixing; the session
//! seed fixes sensor gains, trial order, oscillation frequencies and phases
//! and the noise realization.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{session_key, window_samples, Recording, TrialMarker, NUM_CLASSES};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub subject: String,
    pub session: String,
    pub sensors: usize,
    pub trials_per_class: usize,
    pub classes: usize,
    pub trial_seconds: f64,
    pub raw_rate_hz: f64,
    pub subject_seed: u64,
    pub session_seed: u64,
    /// Scales both the 1/f background and the white sensor noise.
    pub noise_level: f64,
    /// Standard deviation of white sensor noise relative to the background.
    pub white_noise_ratio: f64,
    /// Corner of the one-pole low-pass applied to background sources.
    pub background_cutoff_hz: f64,
    /// Frequency band `[lo, hi]` in Hz per class.
    pub bands: Vec<[f64; 2]>,
    /// Inverse squared width of each spatial bump on the unit hemisphere.
    pub pattern_sharpness: f64,
    pub signal_amplitude: f64,
    pub background_sources: usize,
    /// Silence between trials (and before the first and after the last one).
    pub gap_seconds: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            subject: "A".into(),
            session: "1".into(),
            sensors: 128,
            trials_per_class: 150,
            classes: NUM_CLASSES,
            trial_seconds: 3.0,
            raw_rate_hz: 4096.0,
            subject_seed: 1,
            session_seed: 1,
            noise_level: 1.0,
            white_noise_ratio: 0.2,
            background_cutoff_hz: 100.0,
            bands: vec![[8.0, 12.0], [13.0, 20.0], [21.0, 30.0], [4.0, 7.0]],
            pattern_sharpness: 4.0,
            signal_amplitude: 15.0,
            background_sources: 8,
            gap_seconds: 0.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.sensors == 0 || self.trials_per_class == 0 || self.background_sources == 0 {
            return bad("sensor, trial and background-source counts must be positive".into());
        }
        if self.classes != NUM_CLASSES {
            return bad(format!("exactly {NUM_CLASSES} classes are supported, got {}", self.classes));
        }
        if self.bands.len() != self.classes {
            return bad(format!("{} bands for {} classes", self.bands.len(), self.classes));
        }
        let nyquist = self.raw_rate_hz / 2.0;
        for (c, [lo, hi]) in self.bands.iter().enumerate() {
            if !(*lo > 0.0 && lo < hi && *hi < nyquist) {
                return bad(format!("band {c} [{lo}, {hi}] Hz must lie within (0, {nyquist}) Hz"));
            }
        }
        if !(self.trial_seconds > 0.0 && self.raw_rate_hz > 0.0 && self.gap_seconds >= 0.0) {
            return bad("durations and sampling rate must be positive".into());
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return bad(format!("noise level {} must be finite and non-negative", self.noise_level));
        }
        if !(self.white_noise_ratio >= 0.0 && self.background_cutoff_hz > 0.0 && self.background_cutoff_hz < nyquist) {
            return bad("white-noise ratio must be non-negative and the background cutoff inside (0, Nyquist)".into());
        }
        if !(self.pattern_sharpness >= 0.0 && self.signal_amplitude >= 0.0) {
            return bad("pattern sharpness and amplitude must be non-negative".into());
        }
        Ok(())
    }

    pub fn key(&self) -> String {
        session_key(&self.subject, &self.session)
    }

    pub fn trial_samples(&self) -> usize {
        (self.trial_seconds * self.raw_rate_hz).round() as usize
    }

    pub fn gap_samples(&self) -> usize {
        (self.gap_seconds * self.raw_rate_hz).round() as usize
    }

    pub fn total_trials(&self) -> usize {
        self.trials_per_class * self.classes
    }

    /// Samples per sensor: every trial plus a gap before each trial and one
    /// after the last.
    pub fn expected_samples(&self) -> usize {
        let n = self.total_trials();
        n * self.trial_samples() + (n + 1) * self.gap_samples()
    }
}

fn mix_seed(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.rotate_left(29) ^ 0xD1B5_4A32_D192_ED03;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Roughly uniform sensor positions on the upper unit hemisphere.
pub fn sensor_layout(sensors: usize) -> Vec<[f64; 3]> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..sensors)
        .map(|i| {
            let z = 1.0 - (i as f64 + 0.5) / sensors as f64;
            let r = (1.0 - z * z).sqrt();
            let th = golden * i as f64;
            [r * th.cos(), r * th.sin(), z]
        })
        .collect()
}

fn random_on_hemisphere(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-9 {
            return [v[0] / n, v[1] / n, v[2].abs() / n];
        }
    }
}

/// Subject-level structure: unit-norm spatial pattern per class and the
/// `[sensors × sources]` background mixing matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectModel {
    pub patterns: Vec<Vec<f64>>,
    pub mixing: Vec<f64>,
}

pub fn subject_model(cfg: &SynthConfig) -> SubjectModel {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.subject_seed, 0x5EED_5B1E));
    let layout = sensor_layout(cfg.sensors);
    let patterns = (0..cfg.classes)
        .map(|_| {
            let centre = random_on_hemisphere(&mut rng);
            let mut w: Vec<f64> = layout
                .iter()
                .map(|p| {
                    let d2: f64 = p.iter().zip(&centre).map(|(a, b)| (a - b) * (a - b)).sum();
                    (-cfg.pattern_sharpness * d2).exp()
                })
                .collect();
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            w.iter_mut().for_each(|x| *x /= norm);
            w
        })
        .collect();
    let scale = 1.0 / (cfg.background_sources as f64).sqrt();
    let mixing = (0..cfg.sensors * cfg.background_sources)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
        .collect();
    SubjectModel { patterns, mixing }
}

/// Unit-variance 1/f noise from white noise through Kellet's pinking filter,
/// rolled off above `cutoff` (a fraction of the sampling rate).
fn pink_noise(rng: &mut ChaCha8Rng, n: usize, cutoff: f64) -> Vec<f64> {
    let alpha = 1.0 - (-2.0 * PI * cutoff).exp();
    let mut smooth = 0.0;
    let mut b = [0.0f64; 7];
    let mut out: Vec<f64> = (0..n)
        .map(|_| {
            let w: f64 = rng.sample(StandardNormal);
            b[0] = 0.99886 * b[0] + w * 0.0555179;
            b[1] = 0.99332 * b[1] + w * 0.0750759;
            b[2] = 0.96900 * b[2] + w * 0.1538520;
            b[3] = 0.86650 * b[3] + w * 0.3104856;
            b[4] = 0.55000 * b[4] + w * 0.5329522;
            b[5] = -0.7616 * b[5] - w * 0.0168980;
            let y = b.iter().sum::<f64>() + w * 0.5362;
            b[6] = w * 0.115926;
            smooth += alpha * (y - smooth);
            smooth
        })
        .collect();
    let mean = out.iter().sum::<f64>() / n as f64;
    let sd = (out.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64).sqrt();
    if sd > 0.0 {
        out.iter_mut().for_each(|x| *x = (*x - mean) / sd);
    }
    out
}

/// Per-trial oscillation: two sinusoids drawn inside the class band.
fn oscillation(rng: &mut ChaCha8Rng, band: [f64; 2], rate: f64, n: usize) -> Vec<f64> {
    let comps: Vec<(f64, f64)> = (0..2)
        .map(|_| (rng.random_range(band[0]..band[1]), rng.random_range(0.0..2.0 * PI)))
        .collect();
    (0..n)
        .map(|i| {
            let t = i as f64 / rate;
            comps.iter().map(|(f, ph)| (2.0 * PI * f * t + ph).sin()).sum()
        })
        .collect()
}

pub fn generate(cfg: &SynthConfig) -> Result<Recording> {
    cfg.validate()?;
    let model = subject_model(cfg);
    let session_seed = mix_seed(cfg.subject_seed, cfg.session_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(session_seed);
    let (s, n) = (cfg.sensors, cfg.expected_samples());
    let (tlen, gap) = (cfg.trial_samples(), cfg.gap_samples());

    let gains: Vec<f64> = (0..s).map(|_| 1.0 + rng.random_range(-0.1..0.1)).collect();
    let mut labels: Vec<u8> = (0..cfg.classes)
        .flat_map(|c| std::iter::repeat_n(c as u8, cfg.trials_per_class))
        .collect();
    labels.shuffle(&mut rng);
    let trials: Vec<TrialMarker> = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| TrialMarker {
            onset: gap + i * (tlen + gap),
            duration: tlen,
            label,
        })
        .collect();

    let mut data = vec![0.0; s * n];
    for t in &trials {
        let osc = oscillation(&mut rng, cfg.bands[t.label as usize], cfg.raw_rate_hz, tlen);
        let w = &model.patterns[t.label as usize];
        for sensor in 0..s {
            let a = cfg.signal_amplitude * w[sensor];
            let row = &mut data[sensor * n + t.onset..sensor * n + t.onset + tlen];
            row.iter_mut().zip(&osc).for_each(|(x, o)| *x += a * o);
        }
    }

    if cfg.noise_level > 0.0 {
        let nb = cfg.background_sources;
        let sources: Vec<Vec<f64>> = (0..nb)
            .map(|b| {
                let mut r = ChaCha8Rng::seed_from_u64(mix_seed(session_seed, 1000 + b as u64));
                pink_noise(&mut r, n, cfg.background_cutoff_hz / cfg.raw_rate_hz)
            })
            .collect();
        for sensor in 0..s {
            let mut white = ChaCha8Rng::seed_from_u64(mix_seed(session_seed, 1_000_000 + sensor as u64));
            let m = &model.mixing[sensor * nb..(sensor + 1) * nb];
            let row = &mut data[sensor * n..(sensor + 1) * n];
            for (i, x) in row.iter_mut().enumerate() {
                let bg: f64 = m.iter().zip(&sources).map(|(c, src)| c * src[i]).sum();
                let e: f64 = white.sample(StandardNormal);
                *x += cfg.noise_level * (bg + cfg.white_noise_ratio * e);
            }
        }
    }

    for (sensor, g) in gains.iter().enumerate() {
        data[sensor * n..(sensor + 1) * n].iter_mut().for_each(|x| *x *= g);
    }
    Recording::new(cfg.subject.clone(), cfg.session.clone(), cfg.raw_rate_hz, s, data, trials)
}

/// Hann-windowed power of `x` summed over a 0.5 Hz grid spanning `band`.
pub fn band_power(x: &[f64], rate: f64, band: [f64; 2]) -> f64 {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let hann: Vec<f64> = (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect();
    let mut total = 0.0;
    let mut f = band[0];
    while f <= band[1] + 1e-9 {
        let (mut re, mut im) = (0.0, 0.0);
        let w = 2.0 * PI * f / rate;
        for (i, (v, h)) in x.iter().zip(&hann).enumerate() {
            let y = (v - mean) * h;
            let ph = w * i as f64;
            re += y * ph.cos();
            im += y * ph.sin();
        }
        total += re * re + im * im;
        f += 0.5;
    }
    total
}

/// Window length of the classification unit used by the oracle.
pub const ORACLE_WINDOW_MS: f64 = 250.0;

/// Matched-filter accuracy on the 250 ms windows of a freshly generated
/// recording: project on each class pattern, take power in that class's
/// band, normalize by its mean over all windows and pick the largest.
///
/// The projection uses the true patterns, so the result bounds what a
/// learned decoder can reach on the same data.
pub fn oracle_accuracy(cfg: &SynthConfig) -> Result<f64> {
    let rec = generate(cfg)?;
    let model = subject_model(cfg);
    let rate = rec.sampling_rate_hz();
    let win = window_samples(ORACLE_WINDOW_MS, rate);
    let n = rec.samples();
    let mut scores: Vec<[f64; NUM_CLASSES]> = Vec::new();
    let mut labels = Vec::new();
    let mut proj = vec![0.0; win];
    for t in rec.trials() {
        for w in 0..t.duration / win {
            let start = t.onset + w * win;
            let mut row = [0.0; NUM_CLASSES];
            for (c, pattern) in model.patterns.iter().enumerate() {
                proj.iter_mut().for_each(|p| *p = 0.0);
                for (sensor, &ws) in pattern.iter().enumerate() {
                    let x = &rec.data()[sensor * n + start..sensor * n + start + win];
                    proj.iter_mut().zip(x).for_each(|(p, v)| *p += ws * v);
                }
                row[c] = band_power(&proj, rate, cfg.bands[c]);
            }
            scores.push(row);
            labels.push(t.label);
        }
    }
    let mut mean = [0.0; NUM_CLASSES];
    for row in &scores {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / scores.len() as f64);
    }
    let correct = scores
        .iter()
        .zip(&labels)
        .filter(|(row, &label)| {
            let best = (0..NUM_CLASSES)
                .max_by(|&a, &b| (row[a] / mean[a]).total_cmp(&(row[b] / mean[b])).then(b.cmp(&a)))
                .unwrap();
            best == label as usize
        })
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            sensors: 8,
            trials_per_class: 3,
            raw_rate_hz: 256.0,
            trial_seconds: 1.0,
            gap_seconds: 0.25,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn default_sample_count_arithmetic() {
        let cfg = SynthConfig::default();
        let gaps = (cfg.total_trials() + 1) * cfg.gap_samples();
        assert_eq!(cfg.expected_samples() - gaps, 4096 * 3 * 600);
        assert_eq!(cfg.total_trials(), 600);
    }

    #[test]
    fn noiseless_generation_is_bit_identical() {
        let cfg = SynthConfig { noise_level: 0.0, ..small() };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
    }

    #[test]
    fn sessions_share_patterns_but_not_noise() {
        let a = small();
        let b = SynthConfig { session: "2".into(), session_seed: 2, ..small() };
        assert_eq!(subject_model(&a), subject_model(&b));
        let (ra, rb) = (generate(&a).unwrap(), generate(&b).unwrap());
        assert_ne!(ra.data(), rb.data());
        let other = SynthConfig { subject_seed: 9, ..small() };
        assert_ne!(subject_model(&a).patterns, subject_model(&other).patterns);
    }

    #[test]
    fn patterns_are_unit_norm() {
        for w in subject_model(&small()).patterns {
            let n: f64 = w.iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn labels_are_balanced_and_markers_fit() {
        let cfg = small();
        let r = generate(&cfg).unwrap();
        assert_eq!(r.samples(), cfg.expected_samples());
        let mut per = [0; 4];
        r.trials().iter().for_each(|t| per[t.label as usize] += 1);
        assert_eq!(per, [3; 4]);
    }

    #[test]
    fn noiseless_band_power_peaks_in_own_band() {
        let cfg = SynthConfig { noise_level: 0.0, ..small() };
        let r = generate(&cfg).unwrap();
        let m = subject_model(&cfg);
        let n = r.samples();
        for t in r.trials() {
            let c = t.label as usize;
            let proj: Vec<f64> = (0..t.duration)
                .map(|i| (0..cfg.sensors).map(|s| m.patterns[c][s] * r.data()[s * n + t.onset + i]).sum())
                .collect();
            let own = band_power(&proj, cfg.raw_rate_hz, cfg.bands[c]);
            for (o, band) in cfg.bands.iter().enumerate() {
                if o != c {
                    assert!(own > band_power(&proj, cfg.raw_rate_hz, *band));
                }
            }
        }
    }

    #[test]
    fn oracle_spans_certainty_to_chance() {
        let clean = SynthConfig { noise_level: 0.0, ..small() };
        assert_eq!(oracle_accuracy(&clean).unwrap(), 1.0);
        let noisy = SynthConfig { noise_level: 1e4, trials_per_class: 40, ..small() };
        let acc = oracle_accuracy(&noisy).unwrap();
        assert!((acc - 0.25).abs() < 0.08, "accuracy {acc}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(SynthConfig { classes: 3, ..small() }.validate().is_err());
        assert!(SynthConfig { bands: vec![[1.0, 200.0]; 4], ..small() }.validate().is_err());
        assert!(SynthConfig { sensors: 0, ..small() }.validate().is_err());
    }
}
