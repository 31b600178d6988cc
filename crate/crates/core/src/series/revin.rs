use crate::error::{Error, Result};

/// Floor applied to the per-window standard deviation.
pub const REVIN_EPS: f64 = 1e-8;

/// Per-variable statistics of one window.
#[derive(Clone, Debug, PartialEq)]
pub struct RevinStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl RevinStats {
    /// Mean and population standard deviation of one variable.
    pub fn of_series(x: &[f64]) -> (f64, f64) {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, var.sqrt().max(REVIN_EPS))
    }
}

/// Normalises each variable (row) of an N×T window to zero mean and unit
/// variance within the window.
pub fn revin_normalize<R: AsRef<[f64]>>(window: &[R]) -> Result<(Vec<Vec<f64>>, RevinStats)> {
    let mut out = Vec::with_capacity(window.len());
    let mut stats = RevinStats {
        mean: Vec::with_capacity(window.len()),
        std: Vec::with_capacity(window.len()),
    };
    for row in window {
        let row = row.as_ref();
        if row.len() < 2 {
            return Err(Error::Config(format!(
                "RevIN needs at least 2 steps per window, got {}",
                row.len()
            )));
        }
        let (mean, std) = RevinStats::of_series(row);
        out.push(row.iter().map(|v| (v - mean) / std).collect());
        stats.mean.push(mean);
        stats.std.push(std);
    }
    Ok((out, stats))
}

/// Maps normalised values back to the original scale: `x · std + mean`.
pub fn revin_denormalize<R: AsRef<[f64]>>(values: &[R], stats: &RevinStats) -> Result<Vec<Vec<f64>>> {
    if values.len() != stats.mean.len() {
        return Err(Error::dim(
            "revin_denormalize",
            format!("{} variables vs stats for {}", values.len(), stats.mean.len()),
        ));
    }
    Ok(values
        .iter()
        .zip(stats.mean.iter().zip(&stats.std))
        .map(|(row, (m, s))| row.as_ref().iter().map(|v| v * s + m).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_two_three() {
        let (n, stats) = revin_normalize(&[[1.0, 2.0, 3.0]]).unwrap();
        let e = 1.5f64.sqrt();
        for (a, b) in n[0].iter().zip([-e, 0.0, e]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(stats.mean, vec![2.0]);
    }

    #[test]
    fn constant_window_clamps_std() {
        let (n, stats) = revin_normalize(&[[5.0, 5.0, 5.0]]).unwrap();
        assert_eq!(n[0], vec![0.0, 0.0, 0.0]);
        assert_eq!(stats.std, vec![REVIN_EPS]);
    }

    #[test]
    fn too_short_window() {
        assert!(revin_normalize(&[[1.0]]).is_err());
    }

    #[test]
    fn denormalize_examples() {
        let s = RevinStats { mean: vec![3.0], std: vec![2.0] };
        assert_eq!(revin_denormalize(&[[0.0]], &s).unwrap(), vec![vec![3.0]]);
        let id = RevinStats { mean: vec![0.0], std: vec![1.0] };
        assert_eq!(revin_denormalize(&[[1.0]], &id).unwrap(), vec![vec![1.0]]);
    }

    proptest! {
        #[test]
        fn round_trip(rows in proptest::collection::vec(proptest::collection::vec(-1e3f64..1e3, 2..64), 1..4)) {
            let (n, stats) = revin_normalize(&rows).unwrap();
            let back = revin_denormalize(&n, &stats).unwrap();
            for (r, b) in rows.iter().zip(&back) {
                for (x, y) in r.iter().zip(b) {
                    prop_assert!((x - y).abs() <= 1e-10);
                }
            }
        }
    }
}
