use std::ops::Range;

use chrono::NaiveDateTime;

use super::model::ForecastModel;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::prompts::BankCache;
use crate::series::{
    make_windows_in, split_borders, PatchSequence, RawSeries, Scaler, Split, TargetWindow, Window,
    WindowSpan,
};

/// A prepared teacher-forcing example.
#[derive(Clone, Debug)]
pub struct Sample {
    pub patches: PatchSequence,
    /// `(P − 1) × L_p` normalised next-patch targets.
    pub targets: Tensor,
    pub bank: Tensor,
    pub span: WindowSpan,
}

/// Relabels window start times with a fixed pseudo-random map onto
/// `positions` steps after `anchor`, so banks keep their structure but stop
/// describing the data they accompany.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpanShuffle {
    pub seed: u64,
    pub anchor: NaiveDateTime,
    pub positions: usize,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SpanShuffle {
    pub fn remap(&self, span: &WindowSpan) -> WindowSpan {
        let key = span.start.and_utc().timestamp() as u64;
        let k = splitmix64(self.seed ^ splitmix64(key)) % self.positions.max(1) as u64;
        WindowSpan {
            start: span.granularity.advance(self.anchor, k as i64),
            ..*span
        }
    }
}

/// Where temporal banks come from: the encoding cache plus an optional span
/// shuffle.
#[derive(Debug, Default)]
pub struct BankSource {
    pub cache: BankCache,
    pub shuffle: Option<SpanShuffle>,
}

impl BankSource {
    pub fn new(cache: BankCache) -> Self {
        Self {
            cache,
            shuffle: None,
        }
    }

    pub fn remap(&self, span: &WindowSpan) -> WindowSpan {
        match &self.shuffle {
            Some(s) => s.remap(span),
            None => *span,
        }
    }
}

/// A series with chronological train/validation/test segments.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    /// Values after optional standardisation.
    pub series: RawSeries,
    pub scaler: Scaler,
    pub splits: [Range<usize>; 3],
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        raw: RawSeries,
        lookback: usize,
        train_frac: f64,
        val_frac: f64,
        standardize: bool,
    ) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::Ingestion("series has no observations".into()));
        }
        let splits = split_borders(raw.len(), lookback, train_frac, val_frac)?;
        let scaler = if standardize {
            Scaler::fit(&raw, splits[0].clone())
        } else {
            Scaler::identity(raw.n_vars())
        };
        Ok(Self {
            name: name.into(),
            series: scaler.transform(&raw),
            scaler,
            splits,
        })
    }

    pub fn segment(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.splits[0].clone(),
            Split::Val => self.splits[1].clone(),
            Split::Test => self.splits[2].clone(),
        }
    }

    pub fn windows(
        &self,
        split: Split,
        lookback: usize,
        horizon: usize,
        stride: usize,
    ) -> Result<Vec<(Window, TargetWindow)>> {
        make_windows_in(&self.series, self.segment(split), lookback, horizon, stride)
    }

    /// Teacher-forcing samples for `model` over a split.
    pub fn samples(
        &self,
        model: &ForecastModel,
        split: Split,
        stride: usize,
        source: &mut BankSource,
    ) -> Result<Vec<Sample>> {
        let c = model.config();
        self.windows(split, c.lookback, c.future_needed()?, stride)?
            .iter()
            .map(|(w, t)| model.prepare(&w.values, &t.values, w.span, source))
            .collect()
    }

    /// SHA-256 of the (scaled) values, identifying the data a result used.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for xs in &self.series.values {
            for v in xs {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
