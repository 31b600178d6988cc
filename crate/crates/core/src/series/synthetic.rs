use std::f64::consts::PI;

use chrono::{Datelike, Timelike};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::time::{parse_timestamp, Granularity};
use super::RawSeries;
use crate::error::{Error, Result};
use crate::numerics::rng::rng_for;

/// Day-of-week amplitude offsets, Monday first. Zero mean, so `κ = 0`
/// leaves every day at amplitude 1.
pub const DAY_AMPLITUDE_OFFSETS: [f64; 7] = [0.5, 0.2, -0.3, 0.4, -0.1, -0.7, 0.0];

/// Amplitude of weekday `dow` (0 = Monday) under coupling strength `kappa`.
pub fn day_amplitude(dow: usize, kappa: f64) -> f64 {
    1.0 + kappa * DAY_AMPLITUDE_OFFSETS[dow % 7]
}

/// Calendar-coupled sinusoid generator.
///
/// Each variable is `a(dow(t)) · sin(2π·hod(t)/24 + φ) + ε` where `φ` is
/// redrawn every `phase_block` steps (block edges start at a random offset),
/// so the hour-of-day cannot be read off the waveform, and `ε ~ N(0, noise²)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub length: usize,
    pub start: String,
    pub granularity: Granularity,
    pub coupling: f64,
    pub noise: f64,
    /// Steps per constant-phase block; 0 keeps a single phase.
    pub phase_block: usize,
    pub variables: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            length: 10_000,
            start: "2017-01-01 00:00:00".into(),
            granularity: Granularity::HOURLY,
            coupling: 1.0,
            noise: 0.1,
            phase_block: 336,
            variables: 1,
        }
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<RawSeries> {
    if spec.length == 0 || spec.variables == 0 {
        return Err(Error::Config(
            "synthetic series needs a positive length and at least one variable".into(),
        ));
    }
    if spec.noise < 0.0 {
        return Err(Error::Config("synthetic noise must be non-negative".into()));
    }
    let start = parse_timestamp(&spec.start).map_err(Error::Config)?;
    let g = spec.granularity;
    let mut values = Vec::with_capacity(spec.variables);
    for var in 0..spec.variables {
        let mut rng = rng_for(spec.seed, &format!("synthetic/{var}"));
        let offset = if spec.phase_block > 0 {
            rng.random_range(0..spec.phase_block)
        } else {
            0
        };
        let mut block = usize::MAX;
        let mut phase = 0.0;
        let mut xs = Vec::with_capacity(spec.length);
        for t in 0..spec.length {
            let b = if spec.phase_block > 0 {
                (t + offset) / spec.phase_block
            } else {
                0
            };
            if b != block {
                block = b;
                phase = rng.random_range(0.0..2.0 * PI);
            }
            let ts = g.advance(start, t as i64);
            let hod = ts.hour() as f64 + ts.minute() as f64 / 60.0 + ts.second() as f64 / 3600.0;
            let dow = ts.weekday().num_days_from_monday() as usize;
            let eps: f64 = StandardNormal.sample(&mut rng);
            xs.push(day_amplitude(dow, spec.coupling) * (2.0 * PI * hod / 24.0 + phase).sin() + spec.noise * eps);
        }
        values.push(xs);
    }
    let names = if spec.variables == 1 {
        vec!["value".to_string()]
    } else {
        (0..spec.variables).map(|i| format!("x{i}")).collect()
    };
    Ok(RawSeries {
        names,
        start,
        granularity: g,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_under_seed() {
        let spec = SyntheticSpec {
            length: 500,
            noise: 0.0,
            ..Default::default()
        };
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
        let noisy = SyntheticSpec { length: 500, ..Default::default() };
        let other = SyntheticSpec { seed: 1, ..noisy.clone() };
        assert_ne!(generate_synthetic(&noisy).unwrap(), generate_synthetic(&other).unwrap());
    }

    #[test]
    fn zero_coupling_is_day_independent() {
        let spec = SyntheticSpec {
            length: 24 * 14,
            coupling: 0.0,
            noise: 0.0,
            phase_block: 0,
            ..Default::default()
        };
        let s = generate_synthetic(&spec).unwrap();
        // with one phase and no noise every day repeats exactly
        for t in 24..s.len() {
            assert!((s.values[0][t] - s.values[0][t - 24]).abs() < 1e-12);
        }
    }

    #[test]
    fn amplitude_table_recovered() {
        // Monte Carlo: E[x²] = a²/2 + σ² over whole days.
        let spec = SyntheticSpec {
            length: 24 * 7 * 200,
            ..Default::default()
        };
        let s = generate_synthetic(&spec).unwrap();
        let mut sum = [0.0; 7];
        let mut n = [0usize; 7];
        for (t, x) in s.values[0].iter().enumerate() {
            let d = s.timestamp(t).weekday().num_days_from_monday() as usize;
            sum[d] += x * x;
            n[d] += 1;
        }
        for d in 0..7 {
            let est = (2.0 * (sum[d] / n[d] as f64 - spec.noise * spec.noise)).sqrt();
            let truth = day_amplitude(d, 1.0);
            assert!((est - truth).abs() / truth < 0.05, "day {d}: {est} vs {truth}");
        }
    }

    #[test]
    fn rejects_empty() {
        let spec = SyntheticSpec { length: 0, ..Default::default() };
        assert!(generate_synthetic(&spec).is_err());
    }
}
