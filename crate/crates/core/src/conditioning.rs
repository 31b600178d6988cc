//! Temporal-prior conditioning modules: learnable TS-tokens, gated
//! cross-attention from the TS-tokens to the temporal bank, and a gated
//! feed-forward update.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::backbone::{layer_norm, linear, multi_head_attention, SequenceLayout};
use crate::error::{Error, Result};
use crate::numerics::rng::{normal_tensor, rng_for};
use crate::numerics::{sigmoid, Graph, ParamId, ParamStore, Tensor, Var};

/// Rows the gated feed-forward update is applied to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FfnScope {
    #[default]
    All,
    TsOnly,
}

impl FfnScope {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "ts-only" => Ok(Self::TsOnly),
            _ => Err(Error::Config(format!(
                "unknown ffn scope `{s}` (expected all or ts-only)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::All => "all",
            Self::TsOnly => "ts-only",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TpcConfig {
    /// Number of TS-tokens.
    pub n_f: usize,
    /// Insertion layers; empty means the default `1, 3, 5, …` (depth / 2 layers).
    pub layers: Vec<usize>,
    /// Use the default schedule when `layers` is empty. Set to false to run
    /// with no conditioning modules at all.
    pub default_layers: bool,
    pub cross_heads: usize,
    pub ffn_mult: usize,
    pub ffn_scope: FfnScope,
    /// Gate pre-activation at initialisation; 0 gives σ(0) = 0.5.
    pub gate_init: f64,
}

impl Default for TpcConfig {
    fn default() -> Self {
        Self {
            n_f: 4,
            layers: Vec::new(),
            default_layers: true,
            cross_heads: 1,
            ffn_mult: 4,
            ffn_scope: FfnScope::All,
            gate_init: 0.0,
        }
    }
}

/// Strictly increasing layer indices below the decoder depth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InsertionSchedule {
    layers: Vec<usize>,
}

impl InsertionSchedule {
    pub fn new(layers: Vec<usize>, depth: usize) -> Result<Self> {
        if layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "insertion layers {layers:?} must be strictly increasing"
            )));
        }
        if let Some(&l) = layers.iter().find(|&&l| l >= depth) {
            return Err(Error::Config(format!(
                "insertion layer {l} is outside a decoder of depth {depth}"
            )));
        }
        Ok(Self { layers })
    }

    /// `depth / 2` evenly spaced layers: `1, 3, 5, …`.
    pub fn default_for(depth: usize) -> Self {
        Self {
            layers: (0..depth / 2).map(|i| 2 * i + 1).collect(),
        }
    }

    pub fn from_config(config: &TpcConfig, depth: usize) -> Result<Self> {
        if config.layers.is_empty() {
            if config.default_layers {
                Ok(Self::default_for(depth))
            } else {
                Ok(Self { layers: Vec::new() })
            }
        } else {
            Self::new(config.layers.clone(), depth)
        }
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

pub fn gate_value(a: f64) -> f64 {
    sigmoid(a)
}

/// `n_f × d` learnable tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TsTokenBank {
    pub tokens: ParamId,
    pub n_f: usize,
}

impl TsTokenBank {
    pub fn register(store: &mut ParamStore, n_f: usize, width: usize, seed: u64) -> Result<Self> {
        if n_f == 0 {
            return Err(Error::Config("a TS-token bank needs at least one token".into()));
        }
        let value = normal_tensor(&mut rng_for(seed, "tpc/ts_tokens"), &[n_f, width], 1.0);
        Ok(Self {
            tokens: store.add("tpc.ts_tokens", value, true)?,
            n_f,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TpcLayerParams {
    pub layer: usize,
    pub ln_q_g: ParamId,
    pub ln_q_b: ParamId,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub a1: ParamId,
    pub ln_f_g: ParamId,
    pub ln_f_b: ParamId,
    pub w_fc: ParamId,
    pub b_fc: ParamId,
    pub w_proj: ParamId,
    pub b_proj: ParamId,
    pub a2: ParamId,
}

impl TpcLayerParams {
    /// Projections N(0, 1/fan_in), the FFN output further scaled by
    /// 1/sqrt(2·depth); norms at identity; gates at `config.gate_init`.
    pub fn register(
        store: &mut ParamStore,
        layer: usize,
        width: usize,
        depth: usize,
        config: &TpcConfig,
        seed: u64,
    ) -> Result<Self> {
        let d = width;
        let f = config.ffn_mult * d;
        let prefix = format!("tpc.l{layer}");
        let normal = |store: &mut ParamStore, local: &str, shape: &[usize], std: f64| {
            let name = format!("{prefix}.{local}");
            let value = normal_tensor(&mut rng_for(seed, &name), shape, std);
            store.add(name, value, true)
        };
        let w_q = normal(store, "cross.w_q", &[d, d], 1.0 / (d as f64).sqrt())?;
        let w_k = normal(store, "cross.w_k", &[d, d], 1.0 / (d as f64).sqrt())?;
        let w_v = normal(store, "cross.w_v", &[d, d], 1.0 / (d as f64).sqrt())?;
        let w_fc = normal(store, "ffn.w_fc", &[d, f], 1.0 / (d as f64).sqrt())?;
        let w_proj = normal(
            store,
            "ffn.w_proj",
            &[f, d],
            1.0 / (f as f64).sqrt() / (2.0 * depth as f64).sqrt(),
        )?;
        let mut fill = |local: &str, shape: &[usize], v: f64| {
            store.add(format!("{prefix}.{local}"), Tensor::full(shape, v), true)
        };
        Ok(Self {
            layer,
            ln_q_g: fill("cross.ln.g", &[d], 1.0)?,
            ln_q_b: fill("cross.ln.b", &[d], 0.0)?,
            w_q,
            w_k,
            w_v,
            a1: fill("gate.a1", &[1], config.gate_init)?,
            ln_f_g: fill("ffn.ln.g", &[d], 1.0)?,
            ln_f_b: fill("ffn.ln.b", &[d], 0.0)?,
            w_fc,
            b_fc: fill("ffn.b_fc", &[f], 0.0)?,
            w_proj,
            b_proj: fill("ffn.b_proj", &[d], 0.0)?,
            a2: fill("gate.a2", &[1], config.gate_init)?,
        })
    }

    pub fn ids(&self) -> [ParamId; 13] {
        [
            self.ln_q_g, self.ln_q_b, self.w_q, self.w_k, self.w_v, self.a1, self.ln_f_g,
            self.ln_f_b, self.w_fc, self.b_fc, self.w_proj, self.b_proj, self.a2,
        ]
    }
}

/// `X_ts + σ(a₁)·softmax(Norm(X_ts)W_Q (bank W_K)ᵀ / √d)(bank W_V)`.
/// Only the TS-token rows and the bank enter.
pub fn gated_cross_attention<'a>(
    g: &mut Graph<'a>,
    store: &'a ParamStore,
    params: &TpcLayerParams,
    x_ts: Var,
    bank: Var,
    heads: usize,
) -> Result<Var> {
    if g.value(bank).shape().first() == Some(&0) || g.value(bank).numel() == 0 {
        return Err(Error::EmptyBank);
    }
    let d = g.value(x_ts).cols();
    if g.value(bank).cols() != d {
        return Err(Error::dim(
            "gated_cross_attention",
            format!("bank width {} vs token width {d}", g.value(bank).cols()),
        ));
    }
    let normed = layer_norm(g, store, x_ts, params.ln_q_g, params.ln_q_b)?;
    let wq = g.param(store, params.w_q);
    let wk = g.param(store, params.w_k);
    let wv = g.param(store, params.w_v);
    let q = g.matmul(normed, wq)?;
    let k = g.matmul(bank, wk)?;
    let v = g.matmul(bank, wv)?;
    let ca = multi_head_attention(g, q, k, v, heads, None)?;
    let a1 = g.param(store, params.a1);
    let gate = g.sigmoid(a1)?;
    let gated = g.scale_by(ca, gate)?;
    g.add(x_ts, gated)
}

/// `H + σ(a₂)·FFN(Norm(H))`, position-wise.
pub fn gated_ffn<'a>(
    g: &mut Graph<'a>,
    store: &'a ParamStore,
    params: &TpcLayerParams,
    h: Var,
) -> Result<Var> {
    let x = layer_norm(g, store, h, params.ln_f_g, params.ln_f_b)?;
    let f = linear(g, store, x, params.w_fc, params.b_fc)?;
    let f = g.gelu(f)?;
    let f = linear(g, store, f, params.w_proj, params.b_proj)?;
    let a2 = g.param(store, params.a2);
    let gate = g.sigmoid(a2)?;
    let gated = g.scale_by(f, gate)?;
    g.add(h, gated)
}

fn rows(g: &mut Graph<'_>, h: Var, r: Range<usize>) -> Result<Var> {
    g.slice_rows(h, r.start, r.len())
}

/// One conditioning module applied to the post-block state `h`: the TS-token
/// rows cross-attend to the bank, then the gated FFN runs over `scope`.
#[allow(clippy::too_many_arguments)]
pub fn tpc_layer<'a>(
    g: &mut Graph<'a>,
    store: &'a ParamStore,
    params: &TpcLayerParams,
    h: Var,
    bank: Var,
    layout: &SequenceLayout,
    cross_heads: usize,
    scope: FfnScope,
) -> Result<Var> {
    let n = g.value(h).rows();
    if g.value(h).shape().len() != 2 || n != layout.len() {
        return Err(Error::Contract(format!(
            "conditioning layer got {n} rows, expected {} patches + {} TS-tokens",
            layout.n_patches, layout.n_ts
        )));
    }
    if layout.n_ts == 0 {
        return match scope {
            FfnScope::All => gated_ffn(g, store, params, h),
            FfnScope::TsOnly => Ok(h),
        };
    }
    let patches = rows(g, h, layout.patch_rows())?;
    let ts = rows(g, h, layout.ts_rows())?;
    let ts = gated_cross_attention(g, store, params, ts, bank, cross_heads)?;
    match scope {
        FfnScope::All => {
            let joined = join(g, layout, patches, ts)?;
            gated_ffn(g, store, params, joined)
        }
        FfnScope::TsOnly => {
            let ts = gated_ffn(g, store, params, ts)?;
            join(g, layout, patches, ts)
        }
    }
}

fn join(g: &mut Graph<'_>, layout: &SequenceLayout, patches: Var, ts: Var) -> Result<Var> {
    if layout.n_patches == 0 {
        return Ok(ts);
    }
    if layout.ts_rows().start == 0 {
        g.concat_rows(&[ts, patches])
    } else {
        g.concat_rows(&[patches, ts])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::VisibilityMode;
    use crate::numerics::gelu;

    const D: usize = 6;

    fn setup(gate_init: f64) -> (ParamStore, TpcLayerParams) {
        let mut store = ParamStore::new();
        let cfg = TpcConfig {
            ffn_mult: 2,
            gate_init,
            ..TpcConfig::default()
        };
        let p = TpcLayerParams::register(&mut store, 0, D, 2, &cfg, 11).unwrap();
        (store, p)
    }

    fn rand(shape: &[usize], tag: &str) -> Tensor {
        normal_tensor(&mut rng_for(1, tag), shape, 1.0)
    }

    #[test]
    fn gate_values() {
        assert_eq!(gate_value(0.0), 0.5);
        assert_eq!(gate_value(f64::INFINITY), 1.0);
        assert!((gate_value(3f64.ln()) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn schedule_rules() {
        assert_eq!(InsertionSchedule::default_for(6).layers(), &[1, 3, 5]);
        assert!(InsertionSchedule::new(vec![3, 1], 6).is_err());
        assert!(InsertionSchedule::new(vec![1, 1], 6).is_err());
        assert!(InsertionSchedule::new(vec![6], 6).is_err());
    }

    #[test]
    fn closed_cross_gate_is_identity() {
        let (mut store, p) = setup(0.0);
        store.value_mut(p.a1).data_mut()[0] = f64::NEG_INFINITY;
        let x = rand(&[3, D], "x");
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let bank = g.constant(rand(&[4, D], "bank"));
        let y = gated_cross_attention(&mut g, &store, &p, xv, bank, 1).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn single_key_closed_form() {
        let (store, p) = setup(0.0);
        let x = rand(&[3, D], "x");
        let bank = rand(&[1, D], "bank");
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let bv = g.constant(bank.clone());
        let y = gated_cross_attention(&mut g, &store, &p, xv, bv, 1).unwrap();
        // softmax over one key is 1: every token receives 0.5 · (bank · W_V)
        let v = bank.matmul(store.value(p.w_v)).unwrap();
        for i in 0..3 {
            for j in 0..D {
                let want = x.get(i, j) + 0.5 * v.get(0, j);
                assert!((g.value(y).get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_bank() {
        let (store, p) = setup(0.0);
        let mut g = Graph::new();
        let xv = g.constant(rand(&[2, D], "x"));
        let bank = g.constant(Tensor::zeros(&[0, D]));
        assert!(matches!(
            gated_cross_attention(&mut g, &store, &p, xv, bank, 1),
            Err(Error::EmptyBank)
        ));
    }

    #[test]
    fn ffn_identity_cases() {
        let x = rand(&[5, D], "x");
        let (mut store, p) = setup(0.0);
        store.value_mut(p.a2).data_mut()[0] = f64::NEG_INFINITY;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = gated_ffn(&mut g, &store, &p, xv).unwrap();
        assert_eq!(g.value(y), &x);

        let (mut store, p) = setup(2.0);
        for id in [p.w_fc, p.b_fc, p.w_proj, p.b_proj] {
            store.value_mut(id).data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = gated_ffn(&mut g, &store, &p, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn ffn_matches_direct_evaluation() {
        let (store, p) = setup(0.3);
        let x = rand(&[4, D], "x");
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = gated_ffn(&mut g, &store, &p, xv).unwrap();
        let gate = 1.0 / (1.0 + (-0.3f64).exp());
        let (wfc, wp) = (store.value(p.w_fc), store.value(p.w_proj));
        for i in 0..4 {
            let r = x.row(i);
            let m = r.iter().sum::<f64>() / D as f64;
            let var = r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / D as f64;
            let n: Vec<f64> = r.iter().map(|v| (v - m) / (var + 1e-5).sqrt()).collect();
            let hid: Vec<f64> = (0..2 * D)
                .map(|k| gelu((0..D).map(|j| n[j] * wfc.get(j, k)).sum()))
                .collect();
            for j in 0..D {
                let f: f64 = (0..2 * D).map(|k| hid[k] * wp.get(k, j)).sum();
                assert!((g.value(y).get(i, j) - (r[j] + gate * f)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn patch_rows_ignore_the_bank() {
        let (store, p) = setup(0.0);
        let layout = SequenceLayout::new(VisibilityMode::SuffixGlobal, 3, 2);
        let h = rand(&[5, D], "h");
        let run = |bank: Tensor| {
            let mut g = Graph::new();
            let hv = g.constant(h.clone());
            let bv = g.constant(bank);
            let y = tpc_layer(&mut g, &store, &p, hv, bv, &layout, 1, FfnScope::All).unwrap();
            g.value(y).clone()
        };
        let a = run(rand(&[3, D], "b1"));
        let b = run(rand(&[3, D], "b2"));
        for i in 0..3 {
            assert_eq!(a.row(i), b.row(i));
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn row_count_is_checked() {
        let (store, p) = setup(0.0);
        let layout = SequenceLayout::new(VisibilityMode::Prefix, 3, 2);
        let mut g = Graph::new();
        let hv = g.constant(rand(&[4, D], "h"));
        let bv = g.constant(rand(&[3, D], "b"));
        assert!(matches!(
            tpc_layer(&mut g, &store, &p, hv, bv, &layout, 1, FfnScope::All),
            Err(Error::Contract(_))
        ));
    }
}
