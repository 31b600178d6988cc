//! Temporal prompts: rendering calendar spans as text, encoding them with the
//! frozen backbone into an embedding bank, and caching the encodings.

mod cache;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::backbone::{tokenize, Backbone};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::series::{format_timestamp, patch_count, Granularity, WindowSpan};

pub use cache::BankCache;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TemporalSpan {
    pub start: NaiveDateTime,
    pub end: NaiveDateTime,
    pub granularity: Granularity,
}

impl TemporalSpan {
    pub fn new(start: NaiveDateTime, end: NaiveDateTime, granularity: Granularity) -> Result<Self> {
        let secs = (end - start).num_seconds();
        if secs <= 0 || secs % granularity.seconds() != 0 {
            return Err(Error::Config(format!(
                "span {} .. {} is not a positive multiple of {}",
                format_timestamp(start),
                format_timestamp(end),
                granularity
            )));
        }
        Ok(Self {
            start,
            end,
            granularity,
        })
    }

    /// Cache key; the backbone fingerprint is appended by the cache.
    pub fn key(&self) -> String {
        format!(
            "{}|{}|{}",
            format_timestamp(self.start),
            format_timestamp(self.end),
            self.granularity.seconds()
        )
    }
}

pub fn render_prompt(span: &TemporalSpan) -> String {
    format!(
        "This series spans {} to {}. Sampling granularity: {}.",
        format_timestamp(span.start),
        format_timestamp(span.end),
        span.granularity.label()
    )
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpanPolicy {
    /// One span per patch, `M = P`.
    #[default]
    PerPatch,
    /// A single span for the whole lookback, `M = 1`.
    WholeWindow,
}

impl SpanPolicy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "per-patch" => Ok(Self::PerPatch),
            "whole-window" => Ok(Self::WholeWindow),
            _ => Err(Error::Config(format!(
                "unknown span policy `{s}` (expected per-patch or whole-window)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::PerPatch => "per-patch",
            Self::WholeWindow => "whole-window",
        }
    }
}

/// Spans described to the prompt encoder for a lookback window. Patch `p`
/// covers steps `p·S ..= p·S + L_p − 1` from the window start; the padded
/// final patch therefore reaches past the last observed step.
pub fn spans_for_window(
    window: &WindowSpan,
    patch_len: usize,
    stride: usize,
    policy: SpanPolicy,
) -> Result<Vec<TemporalSpan>> {
    match policy {
        SpanPolicy::WholeWindow => Ok(vec![TemporalSpan::new(
            window.start,
            window.end(),
            window.granularity,
        )?]),
        SpanPolicy::PerPatch => {
            let p = patch_count(window.len, patch_len, stride)?;
            (0..p)
                .map(|i| {
                    let first = (i * stride) as i64;
                    TemporalSpan::new(
                        window.at(first),
                        window.at(first + patch_len as i64 - 1),
                        window.granularity,
                    )
                })
                .collect()
        }
    }
}

/// `M × d` matrix of prompt encodings, row `p` for `spans[p]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalEmbeddingBank {
    pub vectors: Tensor,
    pub spans: Vec<TemporalSpan>,
}

impl TemporalEmbeddingBank {
    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }
}

/// Encodes one span, bypassing any cache.
pub fn encode_span(span: &TemporalSpan, backbone: &Backbone) -> Result<Vec<f64>> {
    let text = render_prompt(span);
    log::debug!("temporal prompt: {text}");
    backbone.encode_text(&tokenize(&text)?)
}

/// Bank for `spans`, served from `cache` where possible and populating it
/// otherwise.
pub fn build_bank(
    spans: &[TemporalSpan],
    backbone: &Backbone,
    cache: &mut BankCache,
) -> Result<TemporalEmbeddingBank> {
    if spans.is_empty() {
        return Err(Error::EmptyBank);
    }
    let d = backbone.config().width;
    let mut data = Vec::with_capacity(spans.len() * d);
    for span in spans {
        data.extend_from_slice(&cache.get_or_encode(span, backbone)?);
    }
    Ok(TemporalEmbeddingBank {
        vectors: Tensor::matrix(spans.len(), d, data)?,
        spans: spans.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::DecoderConfig;
    use crate::series::parse_timestamp;

    fn ts(s: &str) -> NaiveDateTime {
        parse_timestamp(s).unwrap()
    }

    fn small_backbone() -> Backbone {
        let cfg = DecoderConfig {
            depth: 2,
            width: 8,
            heads: 2,
            ffn_mult: 2,
            max_seq: 128,
            ..DecoderConfig::default()
        };
        Backbone::new(&cfg, 0).unwrap()
    }

    #[test]
    fn template_text() {
        let span = TemporalSpan::new(ts("2017-01-01 00:00"), ts("2017-01-02 23:00"), Granularity::HOURLY).unwrap();
        assert_eq!(
            render_prompt(&span),
            "This series spans 2017-01-01 00:00:00 to 2017-01-02 23:00:00. Sampling granularity: hourly."
        );
    }

    #[test]
    fn shifted_spans_differ_only_in_timestamps() {
        let a = TemporalSpan::new(ts("2017-01-01 00:00"), ts("2017-01-01 05:00"), Granularity::HOURLY).unwrap();
        let b = TemporalSpan::new(ts("2017-01-01 01:00"), ts("2017-01-01 06:00"), Granularity::HOURLY).unwrap();
        let (ra, rb) = (render_prompt(&a), render_prompt(&b));
        assert_eq!(ra.len(), rb.len());
        let differing: Vec<usize> = ra.bytes().zip(rb.bytes()).enumerate().filter(|(_, (x, y))| x != y).map(|(i, _)| i).collect();
        assert_eq!(differing, vec![30, 53]);
    }

    #[test]
    fn invalid_spans() {
        let t = ts("2017-01-01 00:00");
        assert!(TemporalSpan::new(t, t, Granularity::HOURLY).is_err());
        assert!(TemporalSpan::new(t, ts("2017-01-01 00:30"), Granularity::HOURLY).is_err());
    }

    #[test]
    fn per_patch_spans() {
        let w = WindowSpan::new(ts("2017-01-01"), Granularity::HOURLY, 96);
        let spans = spans_for_window(&w, 16, 16, SpanPolicy::PerPatch).unwrap();
        assert_eq!(spans.len(), 7);
        assert_eq!(format_timestamp(spans[0].end), "2017-01-01 15:00:00");
        assert_eq!(format_timestamp(spans[6].start), "2017-01-05 00:00:00");
        let whole = spans_for_window(&w, 16, 16, SpanPolicy::WholeWindow).unwrap();
        assert_eq!(whole.len(), 1);
        assert_eq!(whole[0].end, w.end());
    }

    #[test]
    fn single_span_bank_is_direct_encoding() {
        let bb = small_backbone();
        let span = TemporalSpan::new(ts("2017-01-01"), ts("2017-01-01 03:00"), Granularity::HOURLY).unwrap();
        let mut cache = BankCache::in_memory();
        let bank = build_bank(&[span], &bb, &mut cache).unwrap();
        assert_eq!(bank.vectors.shape(), &[1, 8]);
        let direct = bb.encode_text(&tokenize(&render_prompt(&span)).unwrap()).unwrap();
        assert_eq!(bank.vectors.row(0), direct.as_slice());
        assert!(matches!(build_bank(&[], &bb, &mut cache), Err(Error::EmptyBank)));
    }
}
