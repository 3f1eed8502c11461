use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::MiniTrial;
use crate::error::{Error, Result};

/// Number of failed sensors: `pct / 100 · sensors`, rounded half up.
pub fn failed_count(sensors: usize, pct: u32) -> Result<usize> {
    if pct > 100 {
        return Err(Error::invalid(format!("failure percentage {pct} outside 0..=100")));
    }
    Ok((pct as usize * sensors + 50) / 100)
}

/// Sorted indices of the sensors that fail at `pct` under `seed`. The draw
/// depends only on `(sensors, pct, seed)`, so every model evaluated with the
/// same seed loses the same sensors.
pub fn failed_sensors(sensors: usize, pct: u32, seed: u64) -> Result<Vec<usize>> {
    let k = failed_count(sensors, pct)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(pct as u64);
    let mut idx = sample(&mut rng, sensors, k).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Copies of `trials` with the given sensors zeroed.
pub fn zero_sensors(trials: &[MiniTrial], sensors: &[usize]) -> Result<Vec<MiniTrial>> {
    trials
        .iter()
        .map(|m| {
            let mut m = m.clone();
            for &s in sensors {
                if s >= m.sensors {
                    return Err(Error::invalid(format!("sensor {s} out of range for {} sensors", m.sensors)));
                }
                m.data[s * m.samples..(s + 1) * m.samples].fill(0.0);
            }
            Ok(m)
        })
        .collect()
}

/// Zeroes `round(pct/100 · S)` seeded sensors in every mini-trial; returns
/// the failed set alongside the data.
pub fn fail_sensors(trials: &[MiniTrial], pct: u32, seed: u64) -> Result<(Vec<MiniTrial>, Vec<usize>)> {
    let s = trials.first().map_or(0, |m| m.sensors);
    let failed = failed_sensors(s, pct, seed)?;
    Ok((zero_sensors(trials, &failed)?, failed))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::data::Split;

    fn trials(s: usize) -> Vec<MiniTrial> {
        (0..3)
            .map(|i| MiniTrial {
                sensors: s,
                samples: 4,
                data: (0..s * 4).map(|v| (v + i) as f32 + 1.0).collect(),
                label: 0,
                session: Arc::from("A1"),
                trial: i,
                split: Split::Test,
            })
            .collect()
    }

    #[test]
    fn ten_percent_of_128_is_13() {
        assert_eq!(failed_count(128, 10).unwrap(), 13);
        assert_eq!(failed_count(128, 100).unwrap(), 128);
        assert_eq!(failed_count(32, 50).unwrap(), 16);
        assert!(failed_count(128, 101).is_err());
        let a = failed_sensors(128, 10, 4).unwrap();
        assert_eq!(a.len(), 13);
        assert_eq!(a, failed_sensors(128, 10, 4).unwrap());
        assert_ne!(a, failed_sensors(128, 10, 5).unwrap());
    }

    #[test]
    fn endpoints() {
        let t = trials(8);
        let (same, none) = fail_sensors(&t, 0, 1).unwrap();
        assert!(none.is_empty());
        assert_eq!(same, t);
        let (zero, all) = fail_sensors(&t, 100, 1).unwrap();
        assert_eq!(all, (0..8).collect::<Vec<_>>());
        assert!(zero.iter().all(|m| m.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn only_failed_rows_change() {
        let t = trials(10);
        let (f, failed) = fail_sensors(&t, 30, 2).unwrap();
        for (a, b) in t.iter().zip(&f) {
            for s in 0..10 {
                if failed.contains(&s) {
                    assert!(b.row(s).iter().all(|&v| v == 0.0));
                } else {
                    assert_eq!(a.row(s), b.row(s));
                }
            }
        }
    }
}
