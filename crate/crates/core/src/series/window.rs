use std::ops::Range;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use super::revin::RevinStats;
use super::time::WindowSpan;
use super::RawSeries;
use crate::error::{Error, Result};

/// Univariate lookback window (channel independence: one per variable).
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub variable: usize,
    pub span: WindowSpan,
    pub values: Vec<f64>,
}

/// Ground truth immediately following a lookback window.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetWindow {
    pub start: NaiveDateTime,
    pub values: Vec<f64>,
}

/// Sliding `(lookback, target)` pairs over the whole series.
pub fn make_windows(
    series: &RawSeries,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<(Window, TargetWindow)>> {
    make_windows_in(series, 0..series.len(), lookback, horizon, stride)
}

/// Sliding pairs whose lookback and target both lie inside `segment`.
pub fn make_windows_in(
    series: &RawSeries,
    segment: Range<usize>,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<(Window, TargetWindow)>> {
    if horizon == 0 || lookback == 0 || stride == 0 {
        return Err(Error::Config(
            "lookback, horizon and window stride must all be positive".into(),
        ));
    }
    let seg_len = segment.end.saturating_sub(segment.start);
    if segment.end > series.len() || lookback + horizon > seg_len {
        return Err(Error::Config(format!(
            "a window of {lookback}+{horizon} steps does not fit {seg_len} available steps"
        )));
    }
    let mut out = Vec::new();
    let mut s = segment.start;
    while s + lookback + horizon <= segment.end {
        for (var, xs) in series.values.iter().enumerate() {
            out.push((
                Window {
                    variable: var,
                    span: WindowSpan::new(series.timestamp(s), series.granularity, lookback),
                    values: xs[s..s + lookback].to_vec(),
                },
                TargetWindow {
                    start: series.timestamp(s + lookback),
                    values: xs[s + lookback..s + lookback + horizon].to_vec(),
                },
            ));
        }
        s += stride;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Chronological split into train/val/test segments. Validation and test
/// segments reach back `lookback` steps so their first window's history may
/// come from the previous split; targets never do.
pub fn split_borders(
    len: usize,
    lookback: usize,
    train_frac: f64,
    val_frac: f64,
) -> Result<[Range<usize>; 3]> {
    if !(0.0..1.0).contains(&train_frac) || val_frac < 0.0 || train_frac + val_frac >= 1.0 {
        return Err(Error::Config(format!(
            "invalid split fractions {train_frac}/{val_frac}"
        )));
    }
    let n_train = (len as f64 * train_frac) as usize;
    let n_val = (len as f64 * val_frac) as usize;
    let val_start = n_train.saturating_sub(lookback);
    let test_start = (n_train + n_val).saturating_sub(lookback);
    Ok([0..n_train, val_start..n_train + n_val, test_start..len])
}

/// Dataset-level standardisation fitted on the training segment.
#[derive(Clone, Debug, PartialEq)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn fit(series: &RawSeries, segment: Range<usize>) -> Self {
        let (mean, std) = series
            .values
            .iter()
            .map(|xs| RevinStats::of_series(&xs[segment.clone()]))
            .unzip();
        Self { mean, std }
    }

    pub fn identity(n_vars: usize) -> Self {
        Self {
            mean: vec![0.0; n_vars],
            std: vec![1.0; n_vars],
        }
    }

    pub fn transform(&self, series: &RawSeries) -> RawSeries {
        let mut out = series.clone();
        for (i, xs) in out.values.iter_mut().enumerate() {
            xs.iter_mut().for_each(|v| *v = (*v - self.mean[i]) / self.std[i]);
        }
        out
    }

    pub fn inverse(&self, variable: usize, values: &[f64]) -> Vec<f64> {
        values
            .iter()
            .map(|v| v * self.std[variable] + self.mean[variable])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::super::time::{parse_timestamp, Granularity};
    use super::*;

    fn ramp(n: usize, vars: usize) -> RawSeries {
        RawSeries {
            names: (0..vars).map(|i| format!("v{i}")).collect(),
            start: parse_timestamp("2017-01-01").unwrap(),
            granularity: Granularity::HOURLY,
            values: (0..vars)
                .map(|v| (0..n).map(|t| (t + 1000 * v) as f64).collect())
                .collect(),
        }
    }

    #[test]
    fn windows_are_contiguous_and_disjoint() {
        let s = ramp(50, 2);
        let ws = make_windows(&s, 10, 5, 3).unwrap();
        // starts 0,3,...,33 → 12 starts × 2 variables
        assert_eq!(ws.len(), 24);
        for (w, t) in &ws {
            assert_eq!(w.values.len(), 10);
            assert_eq!(t.values.len(), 5);
            assert_eq!(t.values[0], w.values[9] + 1.0);
            assert_eq!(t.start, w.span.at(10));
        }
        assert_eq!(ws[2].0.values[0] - ws[0].0.values[0], 3.0);
        assert_eq!(ws[1].0.variable, 1);
    }

    #[test]
    fn insufficient_length() {
        let s = ramp(12, 1);
        assert!(matches!(make_windows(&s, 10, 5, 1), Err(Error::Config(_))));
    }

    #[test]
    fn borders_overlap_only_in_history() {
        let [tr, va, te] = split_borders(1000, 96, 0.7, 0.1).unwrap();
        assert_eq!(tr, 0..700);
        assert_eq!(va, 604..800);
        assert_eq!(te, 704..1000);
    }

    #[test]
    fn scaler_round_trip() {
        let s = ramp(20, 1);
        let sc = Scaler::fit(&s, 0..10);
        let z = sc.transform(&s);
        let back = sc.inverse(0, &z.values[0]);
        for (a, b) in back.iter().zip(&s.values[0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
