use proptest::prelude::*;

use tpc_core::backbone::{detokenize, tokenize, Backbone, DecoderConfig, SequenceLayout, VisibilityMode, BOS, EOS};
use tpc_core::prompts::{build_bank, render_prompt, spans_for_window, BankCache, SpanPolicy, TemporalSpan};
use tpc_core::series::{parse_timestamp, Granularity, WindowSpan};

fn small_backbone() -> Backbone {
    let cfg = DecoderConfig {
        depth: 2,
        width: 8,
        heads: 2,
        ..DecoderConfig::default()
    };
    Backbone::new(&cfg, 11).unwrap()
}

fn window() -> WindowSpan {
    WindowSpan::new(parse_timestamp("2016-07-01 00:00:00").unwrap(), Granularity::HOURLY, 96)
}

#[test]
fn per_patch_spans_cover_each_patch() {
    let spans = spans_for_window(&window(), 16, 16, SpanPolicy::PerPatch).unwrap();
    assert_eq!(spans.len(), 7);
    assert_eq!(
        render_prompt(&spans[0]),
        "This series spans 2016-07-01 00:00:00 to 2016-07-01 15:00:00. Sampling granularity: hourly."
    );
    let last = spans.last().unwrap();
    assert_eq!(last.start, parse_timestamp("2016-07-05 00:00:00").unwrap());
    assert_eq!(last.end, parse_timestamp("2016-07-05 15:00:00").unwrap());

    let whole = spans_for_window(&window(), 16, 16, SpanPolicy::WholeWindow).unwrap();
    assert_eq!(whole.len(), 1);
    assert_eq!(whole[0].end, parse_timestamp("2016-07-04 23:00:00").unwrap());
}

#[test]
fn reversed_span_is_rejected() {
    let a = parse_timestamp("2016-07-01 05:00:00").unwrap();
    let b = parse_timestamp("2016-07-01 01:00:00").unwrap();
    assert!(TemporalSpan::new(a, b, Granularity::HOURLY).is_err());
    assert!(TemporalSpan::new(a, a, Granularity::HOURLY).is_err());
}

#[test]
fn file_cache_serves_reopened_banks() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("banks.cache");
    let bb = small_backbone();
    let spans = spans_for_window(&window(), 16, 8, SpanPolicy::PerPatch).unwrap();

    let mut cache = BankCache::open(&path).unwrap();
    let first = build_bank(&spans, &bb, &mut cache).unwrap();
    assert_eq!(cache.misses(), spans.len());
    drop(cache);

    let mut cache = BankCache::open(&path).unwrap();
    let second = build_bank(&spans, &bb, &mut cache).unwrap();
    assert_eq!((cache.hits(), cache.misses()), (spans.len(), 0));
    assert_eq!(first, second);

    let other = Backbone::new(bb.config(), 12).unwrap();
    build_bank(&spans, &other, &mut cache).unwrap();
    assert_eq!(cache.misses(), spans.len());
}

proptest! {
    #[test]
    fn tokenizer_round_trips(text in "[ -~]{0,64}") {
        let ids = tokenize(&text).unwrap();
        prop_assert_eq!(ids.len(), text.len() + 2);
        prop_assert_eq!(ids[0], BOS);
        prop_assert_eq!(*ids.last().unwrap(), EOS);
        prop_assert_eq!(detokenize(&ids).unwrap(), text);
    }

    #[test]
    fn patches_never_see_later_patches(p in 1usize..12, n_ts in 0usize..5, prefix in any::<bool>()) {
        let mode = if prefix { VisibilityMode::Prefix } else { VisibilityMode::SuffixGlobal };
        let layout = SequenceLayout::new(mode, p, n_ts);
        let mask = layout.mask();
        let rows = layout.patch_rows();
        for i in rows.clone() {
            prop_assert!(mask.is_visible(i, i));
            for j in rows.clone().filter(|&j| j > i) {
                prop_assert!(!mask.is_visible(i, j));
            }
            for j in layout.ts_rows() {
                prop_assert!(mask.is_visible(i, j));
            }
        }
        for i in layout.ts_rows() {
            for j in rows.clone() {
                prop_assert!(!mask.is_visible(i, j));
            }
        }
    }
}
