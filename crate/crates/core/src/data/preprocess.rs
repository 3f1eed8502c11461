//! Downsampling, high-pass filtering, common average reference and
//! standardization, applied in that order.

use std::f64::consts::PI;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::recording::{Recording, TrialMarker};
use crate::error::{Error, Result};

/// Where standardization statistics come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Standardization {
    /// One mean and deviation per sensor over every sample of the session.
    #[default]
    WholeRecording,
    /// Statistics from training-trial samples only, applied everywhere.
    TrainTrials,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub downsample_factor: usize,
    pub highpass_hz: f64,
    pub standardization: Standardization,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            downsample_factor: 2,
            highpass_hz: 0.5,
            standardization: Standardization::WholeRecording,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.downsample_factor == 0 {
            return Err(Error::Config("downsample factor must be at least 1".into()));
        }
        if !(self.highpass_hz >= 0.0 && self.highpass_hz.is_finite()) {
            return Err(Error::Config(format!("high-pass corner {} Hz must be finite and non-negative", self.highpass_hz)));
        }
        Ok(())
    }
}

/// Runs the four steps. With [`Standardization::TrainTrials`] the last step
/// is skipped here and applied by [`super::prepare_session`] once the split
/// is known.
pub fn preprocess(rec: &Recording, cfg: &PipelineConfig) -> Result<Recording> {
    let mut out = downsample(rec, cfg.downsample_factor)?;
    highpass_in_place(&mut out, cfg.highpass_hz)?;
    average_reference_in_place(&mut out)?;
    if cfg.standardization == Standardization::WholeRecording {
        let stats = channel_stats(&out, &[0..out.samples()])?;
        apply_stats(&mut out, &stats);
    }
    Ok(out)
}

/// Half-length of the anti-alias FIR per unit of decimation factor.
const TAPS_PER_FACTOR: usize = 32;

/// Blackman-windowed sinc low-pass with unit DC gain; `cutoff` is a fraction
/// of the sampling rate.
fn lowpass_taps(half: usize, cutoff: f64) -> Vec<f64> {
    let n = 2 * half + 1;
    let mut h: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 - half as f64;
            let sinc = if t == 0.0 {
                2.0 * cutoff
            } else {
                (2.0 * PI * cutoff * t).sin() / (PI * t)
            };
            let phase = 2.0 * PI * i as f64 / (n - 1) as f64;
            let window = 0.42 - 0.5 * phase.cos() + 0.08 * (2.0 * phase).cos();
            sinc * window
        })
        .collect();
    let sum: f64 = h.iter().sum();
    h.iter_mut().for_each(|x| *x /= sum);
    h
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Zero-phase low-pass at 0.4 × the target rate, then keep every
/// `factor`-th sample. Only the kept outputs are computed.
pub fn downsample(rec: &Recording, factor: usize) -> Result<Recording> {
    if factor < 1 {
        return Err(Error::invalid("downsampling factor must be at least 1"));
    }
    if factor == 1 {
        return Ok(rec.clone());
    }
    let n = rec.samples();
    let out_len = n / factor;
    if out_len == 0 {
        return Err(Error::invalid(format!(
            "{n} samples cannot be downsampled by {factor}"
        )));
    }
    let half = TAPS_PER_FACTOR * factor;
    let taps = lowpass_taps(half, 0.4 / factor as f64);
    let mut data = vec![0.0; rec.sensors() * out_len];
    for s in 0..rec.sensors() {
        let x = rec.row(s);
        let y = &mut data[s * out_len..(s + 1) * out_len];
        for (j, yj) in y.iter_mut().enumerate() {
            let centre = (j * factor) as isize;
            let lo = centre - half as isize;
            let hi = centre + half as isize;
            *yj = if lo >= 0 && (hi as usize) < n {
                let seg = &x[lo as usize..=hi as usize];
                seg.iter().zip(&taps).map(|(a, b)| a * b).sum()
            } else {
                taps.iter()
                    .enumerate()
                    .map(|(k, h)| h * x[reflect(lo + k as isize, n)])
                    .sum()
            };
        }
    }
    let trials = rec
        .trials()
        .iter()
        .map(|t| TrialMarker {
            onset: t.onset / factor,
            duration: t.duration / factor,
            label: t.label,
        })
        .collect();
    rec.with_data(rec.sampling_rate_hz() / factor as f64, data, trials)
}

pub fn highpass(rec: &Recording, cutoff_hz: f64) -> Result<Recording> {
    let mut out = rec.clone();
    highpass_in_place(&mut out, cutoff_hz)?;
    Ok(out)
}

/// First-order Butterworth high-pass run forward then backward. Each pass
/// starts from the steady state of a constant input, so DC maps to exactly 0.
pub fn highpass_in_place(rec: &mut Recording, cutoff_hz: f64) -> Result<()> {
    let fs = rec.sampling_rate_hz();
    if !(cutoff_hz > 0.0 && cutoff_hz < fs / 2.0) {
        return Err(Error::invalid(format!(
            "high-pass cutoff {cutoff_hz} Hz must lie in (0, {}) Hz",
            fs / 2.0
        )));
    }
    let k = (PI * cutoff_hz / fs).tan();
    let b0 = 1.0 / (1.0 + k);
    let a1 = (k - 1.0) / (k + 1.0);
    let n = rec.samples();
    for row in rec.data_mut().chunks_exact_mut(n) {
        one_pass(row.iter_mut(), b0, a1);
        one_pass(row.iter_mut().rev(), b0, a1);
    }
    Ok(())
}

fn one_pass<'a>(mut xs: impl Iterator<Item = &'a mut f64>, b0: f64, a1: f64) {
    let Some(first) = xs.next() else { return };
    let mut prev_x = *first;
    let mut prev_y = 0.0;
    *first = 0.0;
    for x in xs {
        let cur = *x;
        let y = b0 * (cur - prev_x) - a1 * prev_y;
        prev_x = cur;
        prev_y = y;
        *x = y;
    }
}

pub fn average_reference(rec: &Recording) -> Result<Recording> {
    let mut out = rec.clone();
    average_reference_in_place(&mut out)?;
    Ok(out)
}

/// Subtracts the across-sensor mean at every time point.
pub fn average_reference_in_place(rec: &mut Recording) -> Result<()> {
    let s = rec.sensors();
    if s < 2 {
        return Err(Error::invalid("average reference needs at least two sensors"));
    }
    let n = rec.samples();
    let mut mean = vec![0.0; n];
    for row in rec.data().chunks_exact(n) {
        mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= s as f64);
    for row in rec.data_mut().chunks_exact_mut(n) {
        row.iter_mut().zip(&mean).for_each(|(x, m)| *x -= m);
    }
    Ok(())
}

/// Per-sensor location and scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Population statistics over the union of `ranges` (sample indices).
pub fn channel_stats(rec: &Recording, ranges: &[Range<usize>]) -> Result<ChannelStats> {
    let count: usize = ranges.iter().map(|r| r.len()).sum();
    if count == 0 {
        return Err(Error::invalid("standardization needs at least one sample"));
    }
    let mut mean = Vec::with_capacity(rec.sensors());
    let mut std = Vec::with_capacity(rec.sensors());
    for s in 0..rec.sensors() {
        let row = rec.row(s);
        let mu = ranges.iter().flat_map(|r| &row[r.clone()]).sum::<f64>() / count as f64;
        let var = ranges
            .iter()
            .flat_map(|r| &row[r.clone()])
            .map(|x| (x - mu) * (x - mu))
            .sum::<f64>()
            / count as f64;
        let sd = var.sqrt();
        if !(sd > 1e-12 * (1.0 + mu.abs())) {
            return Err(Error::invalid(format!(
                "sensor {s} has zero variance and cannot be standardized"
            )));
        }
        mean.push(mu);
        std.push(sd);
    }
    Ok(ChannelStats { mean, std })
}

pub fn apply_stats(rec: &mut Recording, stats: &ChannelStats) {
    let n = rec.samples();
    for (s, row) in rec.data_mut().chunks_exact_mut(n).enumerate() {
        let (m, sd) = (stats.mean[s], stats.std[s]);
        row.iter_mut().for_each(|x| *x = (*x - m) / sd);
    }
}

/// Zero mean and unit population deviation per sensor over the whole recording.
pub fn standardize(rec: &Recording) -> Result<Recording> {
    let stats = channel_stats(rec, &[0..rec.samples()])?;
    let mut out = rec.clone();
    apply_stats(&mut out, &stats);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rec_from_rows(rate: f64, rows: &[Vec<f64>]) -> Recording {
        let data = rows.concat();
        Recording::new("T", "1", rate, rows.len(), data, vec![]).unwrap()
    }

    fn sine(rate: f64, hz: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| (2.0 * PI * hz * i as f64 / rate).sin()).collect()
    }

    /// Amplitude of the `hz` component over the central half of `x`, by
    /// direct projection on an integer number of periods.
    fn amplitude(x: &[f64], rate: f64, hz: f64) -> f64 {
        let period = rate / hz;
        let periods = ((x.len() as f64 / 2.0) / period).floor().max(1.0);
        let len = (periods * period).round() as usize;
        let start = (x.len() - len) / 2;
        let (mut re, mut im) = (0.0, 0.0);
        for (i, v) in x[start..start + len].iter().enumerate() {
            let ph = 2.0 * PI * hz * (start + i) as f64 / rate;
            re += v * ph.cos();
            im += v * ph.sin();
        }
        2.0 * (re * re + im * im).sqrt() / len as f64
    }

    #[test]
    fn downsample_factor_one_is_identity() {
        let r = rec_from_rows(100.0, &[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        assert_eq!(downsample(&r, 1).unwrap(), r);
        assert!(downsample(&r, 0).is_err());
    }

    #[test]
    fn downsample_halves_rate_and_rescales_markers() {
        let n = 12288;
        let trials = vec![TrialMarker { onset: 1000, duration: 4096, label: 2 }];
        let r = Recording::new("T", "1", 4096.0, 1, sine(4096.0, 10.0, n), trials).unwrap();
        let d = downsample(&r, 2).unwrap();
        assert_eq!(d.sampling_rate_hz(), 2048.0);
        assert_eq!(d.samples(), 6144);
        assert_eq!(d.trials()[0], TrialMarker { onset: 500, duration: 2048, label: 2 });
        let amp = amplitude(d.row(0), 2048.0, 10.0);
        assert!((amp - 1.0).abs() < 0.01, "amplitude {amp}");
    }

    #[test]
    fn downsample_suppresses_aliasing_tone() {
        // 1900 Hz folds onto 148 Hz at 2048 Hz if unfiltered
        let r = rec_from_rows(4096.0, &[sine(4096.0, 1900.0, 8192)]);
        let d = downsample(&r, 2).unwrap();
        assert!(amplitude(d.row(0), 2048.0, 148.0) < 1e-3);
    }

    #[test]
    fn highpass_rejects_dc_and_keeps_alpha() {
        let r = rec_from_rows(256.0, &[vec![3.5; 2048], sine(256.0, 10.0, 2048)]);
        let h = highpass(&r, 0.5).unwrap();
        assert!(h.row(0).iter().all(|x| x.abs() < 1e-6 * 3.5));
        let amp = amplitude(h.row(1), 256.0, 10.0);
        assert!((amp - 1.0).abs() < 0.02, "amplitude {amp}");
    }

    #[test]
    fn highpass_attenuates_slow_drift() {
        let rate = 64.0;
        let r = rec_from_rows(rate, &[sine(rate, 0.05, 64 * 400)]);
        let h = highpass(&r, 0.5).unwrap();
        let amp = amplitude(h.row(0), rate, 0.05);
        assert!(amp < 0.1, "amplitude {amp}");
    }

    #[test]
    fn highpass_validates_cutoff() {
        let r = rec_from_rows(100.0, &[vec![0.0; 10]]);
        assert!(highpass(&r, 0.0).is_err());
        assert!(highpass(&r, 50.0).is_err());
    }

    #[test]
    fn average_reference_examples() {
        let same = rec_from_rows(10.0, &[vec![1.0, 2.0], vec![1.0, 2.0]]);
        assert!(average_reference(&same).unwrap().data().iter().all(|&x| x == 0.0));
        let pair = rec_from_rows(10.0, &[vec![1.0], vec![3.0]]);
        assert_eq!(average_reference(&pair).unwrap().data(), &[-1.0, 1.0]);
        assert!(average_reference(&rec_from_rows(10.0, &[vec![1.0]])).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..7).map(|_| (0..50).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
        let a = average_reference(&rec_from_rows(10.0, &rows)).unwrap();
        for t in 0..50 {
            let m: f64 = (0..7).map(|s| a.row(s)[t]).sum::<f64>() / 7.0;
            assert!(m.abs() < 1e-10);
        }
    }

    #[test]
    fn standardize_examples() {
        let r = rec_from_rows(10.0, &[vec![0.0, 2.0], vec![5.0, 9.0]]);
        let s = standardize(&r).unwrap();
        assert_eq!(s.row(0), &[-1.0, 1.0]);
        let again = standardize(&s).unwrap();
        assert!(again.data().iter().zip(s.data()).all(|(a, b)| (a - b).abs() < 1e-10));
        let flat = rec_from_rows(10.0, &[vec![1.0, 2.0], vec![4.0, 4.0]]);
        let err = standardize(&flat).unwrap_err().to_string();
        assert!(err.contains("sensor 1"), "{err}");
    }

    #[test]
    fn train_only_statistics_use_selected_ranges() {
        let r = rec_from_rows(10.0, &[vec![0.0, 2.0, 100.0, -40.0]]);
        let st = channel_stats(&r, &[0..2]).unwrap();
        assert_eq!(st.mean, vec![1.0]);
        assert_eq!(st.std, vec![1.0]);
    }
}
