//! Alternative ways of conditioning on temporal prompts and of adapting the
//! backbone, trained and scored under one harness.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::forecaster::{
    evaluate_forecasts, param_report, persistence_metrics, train, Architecture, BankSource,
    Dataset, ForecastModel, Metrics, ModelConfig, Tuning,
};
use crate::conditioning::InsertionSchedule;
use crate::prompts::SpanPolicy;
use crate::series::Split;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantKind {
    Tpc,
    PosEmbed,
    PrefixPrompt,
    FullFt,
    PartialFt,
    Lora,
}

impl VariantKind {
    pub const ALL: [VariantKind; 6] = [
        Self::Tpc,
        Self::PosEmbed,
        Self::PrefixPrompt,
        Self::FullFt,
        Self::PartialFt,
        Self::Lora,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Tpc => "tpc",
            Self::PosEmbed => "pos-embed",
            Self::PrefixPrompt => "prefix-prompt",
            Self::FullFt => "full-ft",
            Self::PartialFt => "partial-ft",
            Self::Lora => "lora",
        }
    }
}

/// A variant with its kind-specific settings: `rank` for LoRA, `layers` for
/// partial fine-tuning (empty meaning the conditioning schedule).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub kind: VariantKind,
    pub rank: Option<usize>,
    pub layers: Option<Vec<usize>>,
}

impl VariantSpec {
    pub fn new(kind: VariantKind) -> Self {
        Self {
            kind,
            rank: (kind == VariantKind::Lora).then_some(4),
            layers: (kind == VariantKind::PartialFt).then(Vec::new),
        }
    }

    /// `tpc`, `pos-embed`, `prefix-prompt`, `full-ft`, `partial-ft`,
    /// `partial-ft:1,3`, `lora` or `lora:8`.
    pub fn parse(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let kind = VariantKind::ALL
            .into_iter()
            .find(|k| k.as_str() == name)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))?;
        let mut spec = Self::new(kind);
        match (kind, arg) {
            (_, None) => {}
            (VariantKind::Lora, Some(a)) => {
                spec.rank = Some(
                    a.parse()
                        .map_err(|_| Error::Config(format!("bad LoRA rank in `{s}`")))?,
                );
            }
            (VariantKind::PartialFt, Some(a)) => {
                let layers = a
                    .split(',')
                    .map(|x| x.trim().parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::Config(format!("bad layer list in `{s}`")))?;
                spec.layers = Some(layers);
            }
            _ => {
                return Err(Error::Config(format!(
                    "variant `{name}` takes no argument"
                )))
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let needs_rank = self.kind == VariantKind::Lora;
        let needs_layers = self.kind == VariantKind::PartialFt;
        if needs_rank != self.rank.is_some() || needs_layers != self.layers.is_some() {
            return Err(Error::Config(format!(
                "variant {} has mismatched settings",
                self.kind.as_str()
            )));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match (self.kind, &self.rank, &self.layers) {
            (VariantKind::Lora, Some(r), _) if *r != 4 => format!("lora:{r}"),
            (VariantKind::PartialFt, _, Some(l)) if !l.is_empty() => format!(
                "partial-ft:{}",
                l.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
            ),
            (k, _, _) => k.as_str().to_string(),
        }
    }

    /// The model config of this variant derived from `base`.
    pub fn apply(&self, base: &ModelConfig) -> Result<ModelConfig> {
        self.validate()?;
        let mut c = base.clone();
        let (arch, tuning) = match self.kind {
            VariantKind::Tpc => (Architecture::Tpc, Tuning::Adapters),
            VariantKind::PosEmbed => (Architecture::PosEmbed, Tuning::Adapters),
            VariantKind::PrefixPrompt => (Architecture::PrefixPrompt, Tuning::Adapters),
            VariantKind::FullFt => (Architecture::PosEmbed, Tuning::Full),
            VariantKind::PartialFt => (Architecture::PosEmbed, Tuning::Partial),
            VariantKind::Lora => (Architecture::PosEmbed, Tuning::Lora),
        };
        if arch == Architecture::PosEmbed && c.span_policy != SpanPolicy::PerPatch {
            return Err(Error::Config(format!(
                "variant {} needs the per-patch span policy",
                self.kind.as_str()
            )));
        }
        c.architecture = arch;
        c.tuning = tuning;
        if let Some(r) = self.rank {
            c.lora_rank = r;
        }
        if let Some(layers) = &self.layers {
            c.partial_layers = if layers.is_empty() {
                InsertionSchedule::from_config(&base.tpc, base.backbone.depth)?
                    .layers()
                    .to_vec()
            } else {
                layers.clone()
            };
        }
        c.validate()?;
        Ok(c)
    }
}

fn build(kind: VariantKind, base: &ModelConfig, seed: u64) -> Result<ForecastModel> {
    ForecastModel::new(&VariantSpec::new(kind).apply(base)?, seed)
}

pub fn build_tpc_variant(base: &ModelConfig, seed: u64) -> Result<ForecastModel> {
    build(VariantKind::Tpc, base, seed)
}

/// Bank rows added to the patch embeddings; no TS-tokens or modules.
pub fn build_pos_embed_variant(base: &ModelConfig, seed: u64) -> Result<ForecastModel> {
    build(VariantKind::PosEmbed, base, seed)
}

/// Bank rows prepended to the patch sequence under a causal mask.
pub fn build_prefix_prompt_variant(base: &ModelConfig, seed: u64) -> Result<ForecastModel> {
    build(VariantKind::PrefixPrompt, base, seed)
}

/// Additive conditioning with every backbone weight trainable.
pub fn build_full_ft_variant(base: &ModelConfig, seed: u64) -> Result<ForecastModel> {
    build(VariantKind::FullFt, base, seed)
}

/// Additive conditioning with the blocks at the insertion indices trainable.
pub fn build_partial_ft_variant(base: &ModelConfig, seed: u64) -> Result<ForecastModel> {
    build(VariantKind::PartialFt, base, seed)
}

/// Additive conditioning with rank-`rank` adapters on W_Q and W_V.
pub fn build_lora_variant(base: &ModelConfig, rank: usize, seed: u64) -> Result<ForecastModel> {
    let spec = VariantSpec {
        rank: Some(rank),
        ..VariantSpec::new(VariantKind::Lora)
    };
    ForecastModel::new(&spec.apply(base)?, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub dataset: String,
    pub variant: String,
    pub seed: u64,
    pub mse: f64,
    pub mae: f64,
    pub trainable: usize,
    pub total: usize,
    pub steps: usize,
    pub lr: f64,
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub dataset: String,
    pub data_fingerprint: String,
    pub test_windows: usize,
    pub persistence: Metrics,
    pub rows: Vec<AblationRow>,
}

/// Trains and evaluates every variant for every seed on the same windows.
/// `progress` is called after each row.
pub fn run_ablation(
    cfg: &RunConfig,
    dataset: &Dataset,
    variants: &[VariantSpec],
    seeds: &[u64],
    source: &mut BankSource,
    mut progress: impl FnMut(&AblationRow),
) -> Result<AblationResult> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one variant and one seed".into()));
    }
    let base = &cfg.model;
    let test = dataset.windows(Split::Test, base.lookback, cfg.data.horizon, cfg.data.eval_stride)?;
    let persistence = persistence_metrics(&test)?;
    let mut rows = Vec::new();
    for &seed in seeds {
        for v in variants {
            let started = Instant::now();
            let mc = v.apply(base)?;
            let mut model = ForecastModel::new(&mc, seed)?;
            let tr = dataset.samples(&model, Split::Train, cfg.data.train_stride, source)?;
            let va = dataset.samples(&model, Split::Val, cfg.data.train_stride, source)?;
            let report = train(&mut model, &tr, &va, &cfg.train)?;
            let m = evaluate_forecasts(&model, &test, source)?;
            let pr = param_report(&model.store);
            let row = AblationRow {
                dataset: dataset.name.clone(),
                variant: v.label(),
                seed,
                mse: m.mse,
                mae: m.mae,
                trainable: pr.trainable,
                total: pr.total,
                steps: report.steps,
                lr: report.lr,
                wall_clock_s: started.elapsed().as_secs_f64(),
            };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(AblationResult {
        dataset: dataset.name.clone(),
        data_fingerprint: dataset.fingerprint(),
        test_windows: test.len(),
        persistence,
        rows,
    })
}

impl AblationResult {
    /// One CSV row per variant × dataset × seed.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        Ok(String::from_utf8(bytes).expect("csv is UTF-8"))
    }

    /// Variants in first-seen order.
    pub fn variants(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.variant) {
                out.push(r.variant.clone());
            }
        }
        out
    }

    /// Mean and sample standard deviation of the test MSE of one variant.
    pub fn mse_stats(&self, variant: &str) -> Option<(f64, f64)> {
        let xs: Vec<f64> = self.rows.iter().filter(|r| r.variant == variant).map(|r| r.mse).collect();
        mean_std(&xs)
    }

    /// Seed-averaged table with one row per variant plus persistence.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "dataset: {} ({} test windows)", self.dataset, self.test_windows);
        let _ = writeln!(
            s,
            "{:<16} {:>10} {:>10} {:>10} {:>10} {:>11}",
            "variant", "MSE", "MSE sd", "MAE", "MAE sd", "trainable"
        );
        for v in self.variants() {
            let rows: Vec<&AblationRow> = self.rows.iter().filter(|r| r.variant == v).collect();
            let (mse, mse_sd) = mean_std(&rows.iter().map(|r| r.mse).collect::<Vec<_>>()).unwrap_or_default();
            let (mae, mae_sd) = mean_std(&rows.iter().map(|r| r.mae).collect::<Vec<_>>()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{:<16} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>11}",
                v, mse, mse_sd, mae, mae_sd, rows[0].trainable
            );
        }
        let _ = writeln!(
            s,
            "{:<16} {:>10.4} {:>10} {:>10.4} {:>10} {:>11}",
            "persistence", self.persistence.mse, "-", self.persistence.mae, "-", 0
        );
        s
    }
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Some((mean, var.sqrt()))
}
