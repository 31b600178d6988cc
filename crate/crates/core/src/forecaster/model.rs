use serde::{Deserialize, Serialize};

use super::data::{BankSource, Sample};
use super::infer::RolloutRevin;
use crate::backbone::{
    add_positions, decoder_forward, AttentionMask, Backbone, BackboneIds, DecoderConfig,
    SequenceLayout, VisibilityMode,
};
use crate::conditioning::{
    tpc_layer, InsertionSchedule, TpcConfig, TpcLayerParams, TsTokenBank,
};
use crate::error::{Error, Result};
use crate::numerics::rng::{normal_tensor, rng_for};
use crate::numerics::{Checkpoint, Graph, ParamId, ParamStore, Tensor, Var};
use crate::prompts::{spans_for_window, SpanPolicy};
use crate::series::{patch_count, patchify, revin_normalize, PatchSequence, RevinStats, WindowSpan};

/// How temporal information reaches the patch stream.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// TS-tokens with gated cross-attention modules.
    #[default]
    Tpc,
    /// Bank row `p` added to patch embedding `p` at the input.
    PosEmbed,
    /// Bank rows placed before the patches under a causal mask.
    PrefixPrompt,
}

/// Which parameters are optimised besides the patch embedder and head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tuning {
    /// Backbone frozen; architecture-specific adapters trainable.
    #[default]
    Adapters,
    /// Every backbone weight trainable.
    Full,
    /// Whole decoder blocks at the insertion indices trainable.
    Partial,
    /// Low-rank adapters on W_Q and W_V of every block.
    Lora,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossPositions {
    /// Every position with a fully observed next patch.
    #[default]
    All,
    /// Only the last such position.
    Last,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub lookback: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub architecture: Architecture,
    pub tuning: Tuning,
    pub visibility: VisibilityMode,
    pub span_policy: SpanPolicy,
    pub rollout_revin: RolloutRevin,
    /// Seed of the frozen decoder weights, independent of the run seed.
    pub backbone_seed: u64,
    pub lora_rank: usize,
    /// Defaults to the rank when absent.
    pub lora_alpha: Option<f64>,
    /// Blocks unfrozen by partial tuning; empty means the insertion schedule.
    pub partial_layers: Vec<usize>,
    pub backbone: DecoderConfig,
    pub tpc: TpcConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            lookback: 96,
            patch_len: 16,
            stride: 16,
            architecture: Architecture::Tpc,
            tuning: Tuning::Adapters,
            visibility: VisibilityMode::SuffixGlobal,
            span_policy: SpanPolicy::PerPatch,
            rollout_revin: RolloutRevin::Recompute,
            backbone_seed: 0,
            lora_rank: 4,
            lora_alpha: None,
            partial_layers: Vec::new(),
            backbone: DecoderConfig::default(),
            tpc: TpcConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let (t, lp, s) = (self.lookback, self.patch_len, self.stride);
        if lp == 0 || s == 0 || lp > t || s > t {
            return Err(Error::Config(format!(
                "patch length {lp} and stride {s} must lie in 1..={t}"
            )));
        }
        if lp < 2 && self.architecture != Architecture::Tpc {
            return Err(Error::Config("temporal spans need a patch length of at least 2".into()));
        }
        self.new_per_step()?;
        let p = self.patches()?;
        let m = self.bank_rows()?;
        let seq = match self.architecture {
            Architecture::Tpc => p + self.tpc.n_f,
            Architecture::PosEmbed => p,
            Architecture::PrefixPrompt => m + p,
        };
        if seq > self.backbone.max_seq {
            return Err(Error::Config(format!(
                "sequence of {seq} positions exceeds max_seq {}",
                self.backbone.max_seq
            )));
        }
        if self.architecture == Architecture::PosEmbed && self.span_policy != SpanPolicy::PerPatch {
            return Err(Error::Config(
                "additive positional conditioning needs the per-patch span policy".into(),
            ));
        }
        if self.architecture == Architecture::Tpc {
            InsertionSchedule::from_config(&self.tpc, self.backbone.depth)?;
            if self.tpc.cross_heads == 0 || self.backbone.width % self.tpc.cross_heads != 0 {
                return Err(Error::Config(format!(
                    "width {} is not divisible by {} cross-attention heads",
                    self.backbone.width, self.tpc.cross_heads
                )));
            }
            if self.tpc.ffn_mult == 0 {
                return Err(Error::Config("tpc ffn_mult must be positive".into()));
            }
        }
        if self.tuning == Tuning::Lora && (self.lora_rank == 0 || self.lora_rank >= self.backbone.width) {
            return Err(Error::Config(format!(
                "LoRA rank must lie in 1..{}, got {}",
                self.backbone.width, self.lora_rank
            )));
        }
        if self.tuning == Tuning::Partial {
            InsertionSchedule::new(self.partial_block_list(), self.backbone.depth)?;
        }
        Ok(())
    }

    pub fn patches(&self) -> Result<usize> {
        patch_count(self.lookback, self.patch_len, self.stride)
    }

    /// Bank rows per window under the span policy.
    pub fn bank_rows(&self) -> Result<usize> {
        match self.span_policy {
            SpanPolicy::PerPatch => self.patches(),
            SpanPolicy::WholeWindow => Ok(1),
        }
    }

    /// Steps after the lookback that the training targets reach into.
    pub fn future_needed(&self) -> Result<usize> {
        let p = self.patches()?;
        Ok((p - 2) * self.stride + 2 * self.patch_len - self.lookback)
    }

    /// New values produced by one rollout step: `L_p − ((T − L_p) mod S)`.
    pub fn new_per_step(&self) -> Result<usize> {
        let r = (self.lookback - self.patch_len) % self.stride;
        if r >= self.patch_len {
            return Err(Error::Config(format!(
                "stride {} leaves no unseen values in the last full patch (T={}, L_p={})",
                self.stride, self.lookback, self.patch_len
            )));
        }
        Ok(self.patch_len - r)
    }

    pub fn uses_bank(&self) -> bool {
        match self.architecture {
            Architecture::Tpc => self.tpc.n_f > 0 && !self.schedule_layers().is_empty(),
            Architecture::PosEmbed | Architecture::PrefixPrompt => true,
        }
    }

    fn schedule_layers(&self) -> Vec<usize> {
        InsertionSchedule::from_config(&self.tpc, self.backbone.depth)
            .map(|s| s.layers().to_vec())
            .unwrap_or_default()
    }

    fn partial_block_list(&self) -> Vec<usize> {
        if self.partial_layers.is_empty() {
            InsertionSchedule::default_for(self.backbone.depth).layers().to_vec()
        } else {
            self.partial_layers.clone()
        }
    }
}

/// Parameter handles and layout of a forecasting network.
#[derive(Clone, Debug)]
pub struct ForecastNet {
    pub config: ModelConfig,
    pub backbone: BackboneIds,
    pub w_e: ParamId,
    pub b_e: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub ts_tokens: Option<TsTokenBank>,
    pub schedule: InsertionSchedule,
    pub tpc_layers: Vec<TpcLayerParams>,
    n_patches: usize,
}

impl ForecastNet {
    /// Registers every parameter into `store`. `seed` drives the trainable
    /// initialisation; the backbone uses `config.backbone_seed`.
    pub fn register(store: &mut ParamStore, config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.backbone.width;
        let lp = config.patch_len;
        let mut backbone = BackboneIds::register(store, "backbone", &config.backbone, config.backbone_seed)?;
        let init = |tag: &str, shape: &[usize], std: f64| {
            normal_tensor(&mut rng_for(seed, tag), shape, std)
        };
        let w_e = store.add("patch.w_e", init("patch.w_e", &[lp, d], 1.0 / (lp as f64).sqrt()), true)?;
        let b_e = store.add("patch.b_e", Tensor::zeros(&[d]), true)?;

        let (mut ts_tokens, mut tpc_layers) = (None, Vec::new());
        let schedule = if config.architecture == Architecture::Tpc {
            let schedule = InsertionSchedule::from_config(&config.tpc, config.backbone.depth)?;
            if config.tpc.n_f > 0 {
                ts_tokens = Some(TsTokenBank::register(store, config.tpc.n_f, d, seed)?);
            }
            for &l in schedule.layers() {
                tpc_layers.push(TpcLayerParams::register(
                    store,
                    l,
                    d,
                    config.backbone.depth,
                    &config.tpc,
                    seed,
                )?);
            }
            schedule
        } else {
            InsertionSchedule::new(Vec::new(), config.backbone.depth)?
        };

        let w_o = store.add("head.w_o", init("head.w_o", &[d, lp], 1.0 / (d as f64).sqrt()), true)?;
        let b_o = store.add("head.b_o", Tensor::zeros(&[lp]), true)?;

        match config.tuning {
            Tuning::Adapters => {}
            Tuning::Full => {
                for id in backbone.base_ids() {
                    store.set_trainable(id, true);
                }
            }
            Tuning::Partial => {
                for l in config.partial_block_list() {
                    for id in backbone.layers[l].base_ids() {
                        store.set_trainable(id, true);
                    }
                }
            }
            Tuning::Lora => {
                let alpha = config.lora_alpha.unwrap_or(config.lora_rank as f64);
                backbone.attach_lora(store, config.lora_rank, alpha, seed)?;
            }
        }
        Ok(Self {
            config: config.clone(),
            backbone,
            w_e,
            b_e,
            w_o,
            b_o,
            ts_tokens,
            schedule,
            tpc_layers,
            n_patches: config.patches()?,
        })
    }

    pub fn n_patches(&self) -> usize {
        self.n_patches
    }

    /// Layout of the decoder input for the TPC architecture.
    pub fn layout(&self) -> SequenceLayout {
        let n_ts = self.ts_tokens.as_ref().map_or(0, |t| t.n_f);
        SequenceLayout::new(self.config.visibility, self.n_patches, n_ts)
    }

    /// `E = X·W_e + b_e`, one row per patch.
    pub fn embed_patches<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        patches: Var,
    ) -> Result<Var> {
        let lp = g.value(patches).cols();
        if lp != self.config.patch_len {
            return Err(Error::Contract(format!(
                "patch length {lp}, model expects {}",
                self.config.patch_len
            )));
        }
        let w = g.param(store, self.w_e);
        let b = g.param(store, self.b_e);
        let e = g.matmul(patches, w)?;
        g.add_bias(e, b)
    }

    /// Next-patch predictions, `P × L_p`; row `p` targets the `L_p` values
    /// that follow patch `p`.
    pub fn forward<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        patches: &Tensor,
        bank: &Tensor,
    ) -> Result<Var> {
        let p = self.n_patches;
        if patches.rows() != p || patches.shape().len() != 2 {
            return Err(Error::Contract(format!(
                "expected {p} patches, got shape {:?}",
                patches.shape()
            )));
        }
        let x = g.constant(patches.clone());
        let e = self.embed_patches(g, store, x)?;
        let bank_var = g.constant(bank.clone());
        let bank_rows = || -> Result<()> {
            if bank.numel() == 0 || bank.cols() != self.config.backbone.width {
                return Err(Error::EmptyBank);
            }
            Ok(())
        };
        let ids = &self.backbone;
        let (hidden, patch_start) = match self.config.architecture {
            Architecture::Tpc => {
                let layout = self.layout();
                let h0 = match &self.ts_tokens {
                    None => e,
                    Some(ts) => {
                        let t = g.param(store, ts.tokens);
                        if layout.ts_rows().start == 0 {
                            g.concat_rows(&[t, e])?
                        } else {
                            g.concat_rows(&[e, t])?
                        }
                    }
                };
                let positions: Vec<usize> = (0..layout.len()).collect();
                let h0 = add_positions(g, store, ids, h0, &positions)?;
                let mask = layout.mask();
                let use_bank = layout.n_ts > 0 && !self.tpc_layers.is_empty();
                if use_bank {
                    bank_rows()?;
                }
                let tpc = &self.config.tpc;
                let layers = &self.tpc_layers;
                let mut hook = |g: &mut Graph<'a>, l: usize, h: Var| -> Result<Var> {
                    let params = layers
                        .iter()
                        .find(|p| p.layer == l)
                        .expect("hook only fires at scheduled layers");
                    tpc_layer(g, store, params, h, bank_var, &layout, tpc.cross_heads, tpc.ffn_scope)
                };
                let h = decoder_forward(g, store, ids, h0, &mask, self.schedule.layers(), &mut hook)?;
                (h, layout.patch_rows().start)
            }
            Architecture::PosEmbed => {
                bank_rows()?;
                if bank.rows() != p {
                    return Err(Error::Contract(format!(
                        "additive conditioning needs {p} bank rows, got {}",
                        bank.rows()
                    )));
                }
                let h0 = g.add(e, bank_var)?;
                let positions: Vec<usize> = (0..p).collect();
                let h0 = add_positions(g, store, ids, h0, &positions)?;
                let mask = AttentionMask::causal(p);
                let h = decoder_forward(g, store, ids, h0, &mask, &[], &mut |_, _, h| Ok(h))?;
                (h, 0)
            }
            Architecture::PrefixPrompt => {
                bank_rows()?;
                let m = bank.rows();
                let h0 = g.concat_rows(&[bank_var, e])?;
                let positions: Vec<usize> = (0..m + p).collect();
                let h0 = add_positions(g, store, ids, h0, &positions)?;
                let mask = AttentionMask::causal(m + p);
                let h = decoder_forward(g, store, ids, h0, &mask, &[], &mut |_, _, h| Ok(h))?;
                (h, m)
            }
        };
        let patch_states = g.slice_rows(hidden, patch_start, p)?;
        let w = g.param(store, self.w_o);
        let b = g.param(store, self.b_o);
        let y = g.matmul(patch_states, w)?;
        g.add_bias(y, b)
    }

    /// Teacher-forced training loss on one prepared sample.
    pub fn sample_loss<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        sample: &Sample,
        positions: LossPositions,
    ) -> Result<Var> {
        let pred = self.forward(g, store, &sample.patches.patches, &sample.bank)?;
        loss(g, pred, &sample.targets, positions)
    }
}

/// Mean squared error between next-patch predictions (`P × L_p`) and the
/// `(P − 1) × L_p` targets of the predictable positions.
pub fn loss(g: &mut Graph<'_>, pred: Var, targets: &Tensor, positions: LossPositions) -> Result<Var> {
    let n = targets.rows();
    if g.value(pred).rows() < n || g.value(pred).cols() != targets.cols() {
        return Err(Error::dim(
            "loss",
            format!("predictions {:?} vs targets {:?}", g.value(pred).shape(), targets.shape()),
        ));
    }
    match positions {
        LossPositions::All => {
            let rows = g.slice_rows(pred, 0, n)?;
            g.mse(rows, targets.clone())
        }
        LossPositions::Last => {
            let row = g.slice_rows(pred, n - 1, 1)?;
            let t = Tensor::matrix(1, targets.cols(), targets.row(n - 1).to_vec())?;
            g.mse(row, t)
        }
    }
}

/// A network, its parameters and the frozen prompt encoder.
#[derive(Clone, Debug)]
pub struct ForecastModel {
    pub net: ForecastNet,
    pub store: ParamStore,
    pub prompt: Backbone,
    pub seed: u64,
}

impl ForecastModel {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = ForecastNet::register(&mut store, config, seed)?;
        let prompt = Backbone::new(&config.backbone, config.backbone_seed)?;
        Ok(Self {
            net,
            store,
            prompt,
            seed,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    /// RevIN-normalised patches of a lookback window.
    pub fn patchify_window(&self, lookback: &[f64], span: WindowSpan) -> Result<PatchSequence> {
        let c = self.config();
        if lookback.len() != c.lookback {
            return Err(Error::Contract(format!(
                "lookback of {} values, model expects {}",
                lookback.len(),
                c.lookback
            )));
        }
        let (normed, stats) = revin_normalize(&[lookback])?;
        let mut seq = patchify(&normed[0], c.patch_len, c.stride)?;
        seq.span = Some(span);
        seq.stats = Some(stats);
        Ok(seq)
    }

    /// Temporal bank for a lookback span; empty when the model has no use
    /// for one.
    pub fn bank_for(&self, span: &WindowSpan, source: &mut BankSource) -> Result<Tensor> {
        let c = self.config();
        if !c.uses_bank() {
            return Ok(Tensor::zeros(&[0, c.backbone.width]));
        }
        let span = source.remap(span);
        let spans = spans_for_window(&span, c.patch_len, c.stride, c.span_policy)?;
        Ok(crate::prompts::build_bank(&spans, &self.prompt, &mut source.cache)?.vectors)
    }

    /// Builds a training sample from a lookback window and at least
    /// [`ModelConfig::future_needed`] following values.
    pub fn prepare(
        &self,
        lookback: &[f64],
        future: &[f64],
        span: WindowSpan,
        source: &mut BankSource,
    ) -> Result<Sample> {
        let c = self.config();
        let need = c.future_needed()?;
        if future.len() < need {
            return Err(Error::Contract(format!(
                "{} future values given, {need} needed for the training targets",
                future.len()
            )));
        }
        let patches = self.patchify_window(lookback, span)?;
        let stats: &RevinStats = patches.stats.as_ref().expect("set by patchify_window");
        let (mean, std) = (stats.mean[0], stats.std[0]);
        let ext: Vec<f64> = lookback
            .iter()
            .chain(&future[..need])
            .map(|v| (v - mean) / std)
            .collect();
        let p = patches.count();
        let (lp, s) = (c.patch_len, c.stride);
        let mut targets = Vec::with_capacity((p - 1) * lp);
        for i in 0..p - 1 {
            let start = i * s + lp;
            targets.extend_from_slice(&ext[start..start + lp]);
        }
        let bank = self.bank_for(&span, source)?;
        Ok(Sample {
            patches,
            targets: Tensor::matrix(p - 1, lp, targets)?,
            bank,
            span,
        })
    }

    /// Predictions for a prepared input, `P × L_p`, in normalised space.
    pub fn predict(&self, patches: &Tensor, bank: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let y = self.net.forward(&mut g, &self.store, patches, bank)?;
        Ok(g.value(y).clone())
    }

    pub fn checkpoint(&self, meta: impl Into<String>) -> Checkpoint {
        Checkpoint::from_store(&self.store, meta)
    }

    /// SHA-256 of the trunk copy of the backbone (adapters excluded).
    pub fn backbone_fingerprint(&self) -> String {
        Checkpoint::from_store_filtered(&self.store, "", |n| n.starts_with("backbone.")).fingerprint()
    }
}
