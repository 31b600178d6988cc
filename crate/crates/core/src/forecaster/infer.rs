use serde::{Deserialize, Serialize};

use super::data::BankSource;
use super::model::ForecastModel;
use crate::error::{Error, Result};
use crate::series::{patchify, revin_normalize, RevinStats, TargetWindow, Window, WindowSpan};

/// Normalisation statistics used while rolling forward.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RolloutRevin {
    /// Recompute from the current (extended) window at every step.
    #[default]
    Recompute,
    /// Keep the statistics of the initial lookback.
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
}

/// Mean squared and mean absolute error over all values.
pub fn metrics(pred: &[f64], truth: &[f64]) -> Result<Metrics> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::dim(
            "metrics",
            format!("{} predictions vs {} truths", pred.len(), truth.len()),
        ));
    }
    let n = pred.len() as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (p, t) in pred.iter().zip(truth) {
        se += (p - t) * (p - t);
        ae += (p - t).abs();
    }
    Ok(Metrics {
        mse: se / n,
        mae: ae / n,
    })
}

impl ForecastModel {
    /// One rollout step: the values following `window` that the prediction at
    /// the last fully observed patch position adds, in the window's scale.
    pub fn predict_next(
        &self,
        window: &[f64],
        span: WindowSpan,
        fixed: Option<&RevinStats>,
        source: &mut BankSource,
    ) -> Result<Vec<f64>> {
        let c = self.config();
        let (normed, stats) = match fixed {
            None => revin_normalize(&[window])?,
            Some(s) => (
                vec![window.iter().map(|v| (v - s.mean[0]) / s.std[0]).collect()],
                s.clone(),
            ),
        };
        let seq = patchify(&normed[0], c.patch_len, c.stride)?;
        let bank = self.bank_for(&span, source)?;
        let pred = self.predict(&seq.patches, &bank)?;
        let p = seq.count();
        let row = pred.row(p - 2);
        let fresh = c.new_per_step()?;
        let (mean, std) = (stats.mean[0], stats.std[0]);
        Ok(row[c.patch_len - fresh..].iter().map(|v| v * std + mean).collect())
    }

    /// Autoregressive forecast of `horizon` values after `lookback`.
    pub fn forecast(
        &self,
        lookback: &[f64],
        span: WindowSpan,
        horizon: usize,
        source: &mut BankSource,
    ) -> Result<Vec<f64>> {
        let c = self.config();
        if horizon == 0 {
            return Err(Error::Config("forecast horizon must be at least 1".into()));
        }
        if lookback.len() != c.lookback {
            return Err(Error::Contract(format!(
                "lookback of {} values, model expects {}",
                lookback.len(),
                c.lookback
            )));
        }
        let fixed = match c.rollout_revin {
            RolloutRevin::Recompute => None,
            RolloutRevin::Fixed => Some(revin_normalize(&[lookback])?.1),
        };
        let t = c.lookback;
        let mut history = lookback.to_vec();
        let mut span = span;
        let mut out = Vec::with_capacity(horizon + c.patch_len);
        while out.len() < horizon {
            let window = &history[history.len() - t..];
            let fresh = self.predict_next(window, span, fixed.as_ref(), source)?;
            span = span.advanced(fresh.len());
            history.extend_from_slice(&fresh);
            out.extend(fresh);
        }
        out.truncate(horizon);
        Ok(out)
    }
}

/// Forecast metrics over `(lookback, target)` pairs, each forecast as long as
/// its target.
pub fn evaluate_forecasts(
    model: &ForecastModel,
    windows: &[(Window, TargetWindow)],
    source: &mut BankSource,
) -> Result<Metrics> {
    let (mut pred, mut truth) = (Vec::new(), Vec::new());
    for (w, t) in windows {
        pred.extend(model.forecast(&w.values, w.span, t.values.len(), source)?);
        truth.extend_from_slice(&t.values);
    }
    metrics(&pred, &truth)
}

/// The last observed value repeated over the target.
pub fn persistence_metrics(windows: &[(Window, TargetWindow)]) -> Result<Metrics> {
    let (mut pred, mut truth) = (Vec::new(), Vec::new());
    for (w, t) in windows {
        let last = *w.values.last().ok_or_else(|| Error::Contract("empty lookback".into()))?;
        pred.extend(std::iter::repeat_n(last, t.values.len()));
        truth.extend_from_slice(&t.values);
    }
    metrics(&pred, &truth)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_cases() {
        let m = metrics(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!((m.mse, m.mae), (0.0, 0.0));
        let m = metrics(&[2.0, 3.0], &[1.0, 2.0]).unwrap();
        assert_eq!((m.mse, m.mae), (1.0, 1.0));
        assert!(metrics(&[1.0], &[]).is_err());
    }
}
