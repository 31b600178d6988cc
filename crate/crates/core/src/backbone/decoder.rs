use serde::{Deserialize, Serialize};

use super::mask::AttentionMask;
use super::tokenizer::VOCAB_SIZE;
use crate::error::{Error, Result};
use crate::numerics::rng::{normal_tensor, rng_for};
use crate::numerics::{Checkpoint, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub vocab: usize,
    pub max_seq: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            depth: 6,
            width: 64,
            heads: 4,
            ffn_mult: 4,
            vocab: VOCAB_SIZE,
            max_seq: 256,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth == 0 {
            return bad("backbone depth must be at least 1".into());
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return bad(format!(
                "backbone width {} is not divisible by {} heads",
                self.width, self.heads
            ));
        }
        if self.ffn_mult == 0 {
            return bad("ffn_mult must be positive".into());
        }
        if self.vocab < VOCAB_SIZE {
            return bad(format!("vocabulary of {} is smaller than {VOCAB_SIZE}", self.vocab));
        }
        if self.max_seq == 0 {
            return bad("max_seq must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// Trainable low-rank delta `scale · B·A` added to a frozen projection.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraIds {
    /// r × d
    pub a: ParamId,
    /// d × r, zero at initialisation
    pub b: ParamId,
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerIds {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub w_q: ParamId,
    pub b_q: ParamId,
    pub w_k: ParamId,
    pub b_k: ParamId,
    pub w_v: ParamId,
    pub b_v: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w_fc: ParamId,
    pub b_fc: ParamId,
    pub w_proj: ParamId,
    pub b_proj: ParamId,
    pub lora_q: Option<LoraIds>,
    pub lora_v: Option<LoraIds>,
}

impl LayerIds {
    /// Frozen weights of the block (adapters excluded).
    pub fn base_ids(&self) -> [ParamId; 16] {
        [
            self.ln1_g, self.ln1_b, self.w_q, self.b_q, self.w_k, self.b_k, self.w_v, self.b_v,
            self.w_o, self.b_o, self.ln2_g, self.ln2_b, self.w_fc, self.b_fc, self.w_proj,
            self.b_proj,
        ]
    }
}

/// Handles to one copy of the decoder weights inside a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneIds {
    pub config: DecoderConfig,
    pub prefix: String,
    pub wte: ParamId,
    pub wpe: ParamId,
    pub layers: Vec<LayerIds>,
    pub lnf_g: ParamId,
    pub lnf_b: ParamId,
}

struct Init<'s> {
    store: &'s mut ParamStore,
    prefix: &'s str,
    seed: u64,
}

impl Init<'_> {
    fn normal(&mut self, local: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        // The stream depends only on the local name, so every copy registered
        // under any prefix holds the same values.
        let mut rng = rng_for(self.seed, &format!("backbone/{local}"));
        let value = normal_tensor(&mut rng, shape, std);
        self.store.add(format!("{}.{local}", self.prefix), value, false)
    }

    fn fill(&mut self, local: &str, len: usize, value: f64) -> Result<ParamId> {
        self.store
            .add(format!("{}.{local}", self.prefix), Tensor::full(&[len], value), false)
    }
}

impl BackboneIds {
    /// Registers frozen, seeded-random decoder weights under `prefix`.
    ///
    /// Embeddings are N(0, 1); linear maps N(0, 1/fan_in), with the two
    /// residual-branch output projections further scaled by 1/sqrt(2·depth).
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        config: &DecoderConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let f = config.ffn_mult * d;
        let lin = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let resid = 1.0 / (2.0 * config.depth as f64).sqrt();
        let mut init = Init {
            store,
            prefix,
            seed,
        };
        let wte = init.normal("wte", &[config.vocab, d], 1.0)?;
        let wpe = init.normal("wpe", &[config.max_seq, d], 1.0)?;
        let mut layers = Vec::with_capacity(config.depth);
        for l in 0..config.depth {
            let n = |s: &str| format!("h{l}.{s}");
            layers.push(LayerIds {
                ln1_g: init.fill(&n("ln1.g"), d, 1.0)?,
                ln1_b: init.fill(&n("ln1.b"), d, 0.0)?,
                w_q: init.normal(&n("attn.w_q"), &[d, d], lin(d))?,
                b_q: init.fill(&n("attn.b_q"), d, 0.0)?,
                w_k: init.normal(&n("attn.w_k"), &[d, d], lin(d))?,
                b_k: init.fill(&n("attn.b_k"), d, 0.0)?,
                w_v: init.normal(&n("attn.w_v"), &[d, d], lin(d))?,
                b_v: init.fill(&n("attn.b_v"), d, 0.0)?,
                w_o: init.normal(&n("attn.w_o"), &[d, d], lin(d) * resid)?,
                b_o: init.fill(&n("attn.b_o"), d, 0.0)?,
                ln2_g: init.fill(&n("ln2.g"), d, 1.0)?,
                ln2_b: init.fill(&n("ln2.b"), d, 0.0)?,
                w_fc: init.normal(&n("mlp.w_fc"), &[d, f], lin(d))?,
                b_fc: init.fill(&n("mlp.b_fc"), f, 0.0)?,
                w_proj: init.normal(&n("mlp.w_proj"), &[f, d], lin(f) * resid)?,
                b_proj: init.fill(&n("mlp.b_proj"), d, 0.0)?,
                lora_q: None,
                lora_v: None,
            });
        }
        let lnf_g = init.fill("ln_f.g", d, 1.0)?;
        let lnf_b = init.fill("ln_f.b", d, 0.0)?;
        Ok(Self {
            config: config.clone(),
            prefix: prefix.to_string(),
            wte,
            wpe,
            layers,
            lnf_g,
            lnf_b,
        })
    }

    /// Every frozen decoder weight (adapters excluded), in registration order.
    pub fn base_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.wte, self.wpe];
        for layer in &self.layers {
            ids.extend(layer.base_ids());
        }
        ids.extend([self.lnf_g, self.lnf_b]);
        ids
    }

    /// Adds rank-`rank` adapters to W_Q and W_V of every layer. `A` is
    /// N(0, 1/d), `B` starts at zero and the delta is scaled by `alpha / rank`.
    pub fn attach_lora(
        &mut self,
        store: &mut ParamStore,
        rank: usize,
        alpha: f64,
        seed: u64,
    ) -> Result<()> {
        let d = self.config.width;
        if rank == 0 || rank >= d {
            return Err(Error::Config(format!(
                "LoRA rank must lie in 1..{d}, got {rank}"
            )));
        }
        let scale = alpha / rank as f64;
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let mut adapter = |which: &str| -> Result<LoraIds> {
                let name = format!("lora.h{l}.{which}");
                let mut rng = rng_for(seed, &name);
                let a = normal_tensor(&mut rng, &[rank, d], 1.0 / (d as f64).sqrt());
                Ok(LoraIds {
                    a: store.add(format!("{name}.a"), a, true)?,
                    b: store.add(format!("{name}.b"), Tensor::zeros(&[d, rank]), true)?,
                    scale,
                })
            };
            layer.lora_q = Some(adapter("q")?);
            layer.lora_v = Some(adapter("v")?);
        }
        Ok(())
    }
}

/// `x·W + b`.
pub fn linear<'a>(
    g: &mut Graph<'a>,
    store: &'a ParamStore,
    x: Var,
    w: ParamId,
    b: ParamId,
) -> Result<Var> {
    let w = g.param(store, w);
    let b = g.param(store, b);
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

fn adapted<'a>(
    g: &mut Graph<'a>,
    store: &'a ParamStore,
    x: Var,
    w: ParamId,
    b: ParamId,
    lora: Option<&LoraIds>,
) -> Result<Var> {
    let y = linear(g, store, x, w, b)?;
    let Some(lora) = lora else { return Ok(y) };
    let a = g.param(store, lora.a);
    let bm = g.param(store, lora.b);
    let xb = g.matmul(x, bm)?;
    let xba = g.matmul(xb, a)?;
    let delta = g.scale(xba, lora.scale)?;
    g.add(y, delta)
}

pub fn layer_norm<'a>(
    g: &mut Graph<'a>,
    store: &'a ParamStore,
    x: Var,
    gain: ParamId,
    bias: ParamId,
) -> Result<Var> {
    let gv = g.param(store, gain);
    let bv = g.param(store, bias);
    g.layer_norm(x, gv, bv)
}

/// Scaled dot-product attention split over `heads` column blocks of
/// `q`, `k` and `v`, re-joined column-wise.
pub fn multi_head_attention(
    g: &mut Graph<'_>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<&Tensor>,
) -> Result<Var> {
    let d = g.value(q).cols();
    if heads == 0 || d % heads != 0 || g.value(k).cols() != d || g.value(v).cols() != d {
        return Err(Error::Contract(format!(
            "attention over widths {}/{}/{} with {heads} heads",
            d,
            g.value(k).cols(),
            g.value(v).cols()
        )));
    }
    let dh = d / heads;
    let inv = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, inv)?;
        let attn = g.softmax_rows(scores, mask)?;
        outs.push(g.matmul(attn, vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        g.concat_cols(&outs)
    }
}

/// One pre-norm decoder block: masked multi-head self-attention with a
/// residual, then a GELU feed-forward with a residual.
pub fn self_attention_layer<'a>(
    g: &mut Graph<'a>,
    store: &'a ParamStore,
    layer: &LayerIds,
    heads: usize,
    h: Var,
    mask: &AttentionMask,
) -> Result<Var> {
    let (n, d) = (g.value(h).rows(), g.value(h).cols());
    if g.value(h).shape().len() != 2 || d != store.value(layer.w_q).rows() {
        return Err(Error::Contract(format!(
            "hidden state {:?} does not match layer width {}",
            g.value(h).shape(),
            store.value(layer.w_q).rows()
        )));
    }
    if mask.len() != n {
        return Err(Error::Contract(format!(
            "mask of size {} for a sequence of {n}",
            mask.len()
        )));
    }
    let x = layer_norm(g, store, h, layer.ln1_g, layer.ln1_b)?;
    let q = adapted(g, store, x, layer.w_q, layer.b_q, layer.lora_q.as_ref())?;
    let k = linear(g, store, x, layer.w_k, layer.b_k)?;
    let v = adapted(g, store, x, layer.w_v, layer.b_v, layer.lora_v.as_ref())?;
    let a = multi_head_attention(g, q, k, v, heads, Some(mask.tensor()))?;
    let o = linear(g, store, a, layer.w_o, layer.b_o)?;
    let h = g.add(h, o)?;

    let x = layer_norm(g, store, h, layer.ln2_g, layer.ln2_b)?;
    let f = linear(g, store, x, layer.w_fc, layer.b_fc)?;
    let f = g.gelu(f)?;
    let f = linear(g, store, f, layer.w_proj, layer.b_proj)?;
    g.add(h, f)
}

/// Hook invoked after the block at each insertion layer.
pub type LayerHook<'h, 'a> = dyn FnMut(&mut Graph<'a>, usize, Var) -> Result<Var> + 'h;

/// Runs every block, handing the state to `hook` after each layer listed in
/// `hook_layers`, and applies the final layer norm.
pub fn decoder_forward<'a>(
    g: &mut Graph<'a>,
    store: &'a ParamStore,
    ids: &BackboneIds,
    h0: Var,
    mask: &AttentionMask,
    hook_layers: &[usize],
    hook: &mut LayerHook<'_, 'a>,
) -> Result<Var> {
    let depth = ids.config.depth;
    if let Some(&bad) = hook_layers.iter().find(|&&l| l >= depth) {
        return Err(Error::Config(format!(
            "insertion layer {bad} is outside a decoder of depth {depth}"
        )));
    }
    let mut h = h0;
    for (l, layer) in ids.layers.iter().enumerate() {
        h = self_attention_layer(g, store, layer, ids.config.heads, h, mask)?;
        if hook_layers.contains(&l) {
            h = hook(g, l, h)?;
        }
    }
    layer_norm(g, store, h, ids.lnf_g, ids.lnf_b)
}

/// Adds positional rows `positions` of the learned table to `x`.
pub fn add_positions<'a>(
    g: &mut Graph<'a>,
    store: &'a ParamStore,
    ids: &BackboneIds,
    x: Var,
    positions: &[usize],
) -> Result<Var> {
    if let Some(&p) = positions.iter().find(|&&p| p >= ids.config.max_seq) {
        return Err(Error::Length {
            len: p + 1,
            max: ids.config.max_seq,
        });
    }
    let table = g.param(store, ids.wpe);
    let pos = g.gather_rows(table, positions)?;
    g.add(x, pos)
}

/// Token embeddings plus positions `0..n`.
pub fn embed_tokens<'a>(
    g: &mut Graph<'a>,
    store: &'a ParamStore,
    ids: &BackboneIds,
    tokens: &[usize],
) -> Result<Var> {
    if tokens.len() > ids.config.max_seq {
        return Err(Error::Length {
            len: tokens.len(),
            max: ids.config.max_seq,
        });
    }
    let table = g.param(store, ids.wte);
    let x = g.gather_rows(table, tokens)?;
    let positions: Vec<usize> = (0..tokens.len()).collect();
    add_positions(g, store, ids, x, &positions)
}

/// A standalone frozen decoder, used to encode temporal prompts.
#[derive(Clone, Debug)]
pub struct Backbone {
    store: ParamStore,
    ids: BackboneIds,
    seed: u64,
    fingerprint: String,
}

impl Backbone {
    pub fn new(config: &DecoderConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let ids = BackboneIds::register(&mut store, "backbone", config, seed)?;
        let fingerprint = Checkpoint::from_store(&store, "").fingerprint();
        Ok(Self {
            store,
            ids,
            seed,
            fingerprint,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.ids.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn ids(&self) -> &BackboneIds {
        &self.ids
    }

    /// SHA-256 of the weights.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Final hidden state (after the last layer norm) at the last position of
    /// a plain causal pass over `tokens`.
    pub fn encode_text(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        if tokens.is_empty() {
            return Err(Error::Contract("cannot encode an empty token sequence".into()));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.ids.config.vocab) {
            return Err(Error::Contract(format!("token id {t} out of vocabulary")));
        }
        let mut g = Graph::new();
        let x = embed_tokens(&mut g, &self.store, &self.ids, tokens)?;
        let mask = AttentionMask::causal(tokens.len());
        let h = decoder_forward(&mut g, &self.store, &self.ids, x, &mask, &[], &mut |_, _, h| Ok(h))?;
        let last = g.value(h).rows() - 1;
        Ok(g.value(h).row(last).to_vec())
    }
}
