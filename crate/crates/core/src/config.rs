//! Run configuration.
//!
//! Configs are TOML documents written with flat dotted keys, one setting per
//! line:
//!
//! ```toml
//! seed = 0
//! data.source = "synthetic"
//! data.synthetic.length = 10000
//! model.backbone.depth = 6
//! model.tpc.layers = [1, 3, 5]
//! train.lr = 0.001
//! ```
//!
//! Any key may be overridden with a `(key, value)` pair, the value being a
//! TOML literal (bare words are taken as strings). Unknown keys are
//! rejected. [`RunConfig::to_flat_toml`] renders the fully resolved config in
//! the same form; parsing that text back yields an identical config.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::forecaster::{Dataset, ModelConfig, TrainConfig};
use crate::series::{generate_synthetic, load_csv, Granularity, RawSeries, SyntheticSpec};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    #[default]
    Synthetic,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub name: String,
    pub source: DataSource,
    /// CSV path for `source = "csv"`.
    pub path: String,
    /// Expected sampling interval of a CSV; empty infers it from the data.
    pub granularity: String,
    pub synthetic: SyntheticSpec,
    /// Standardise every variable with training-segment statistics.
    pub standardize: bool,
    pub train_frac: f64,
    pub val_frac: f64,
    /// Forecast horizon τ used for evaluation.
    pub horizon: usize,
    /// Window stride for training and validation samples.
    pub train_stride: usize,
    /// Window stride for test evaluation.
    pub eval_stride: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            source: DataSource::Synthetic,
            path: String::new(),
            granularity: String::new(),
            synthetic: SyntheticSpec::default(),
            standardize: true,
            train_frac: 0.7,
            val_frac: 0.1,
            horizon: 32,
            train_stride: 1,
            eval_stride: 1,
        }
    }
}

impl DataConfig {
    pub fn load_series(&self) -> Result<RawSeries> {
        match self.source {
            DataSource::Synthetic => generate_synthetic(&self.synthetic),
            DataSource::Csv => {
                if self.path.is_empty() {
                    return Err(Error::Config("data.path is required for csv data".into()));
                }
                let g = if self.granularity.is_empty() {
                    None
                } else {
                    Some(Granularity::parse(&self.granularity)?)
                };
                load_csv(Path::new(&self.path), g)
            }
        }
    }

    pub fn load(&self, lookback: usize) -> Result<Dataset> {
        let raw = self.load_series()?;
        Dataset::new(
            self.name.clone(),
            raw,
            lookback,
            self.train_frac,
            self.val_frac,
            self.standardize,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Variant names; see `VariantSpec::parse`.
    pub variants: Vec<String>,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            variants: ["tpc", "pos-embed", "prefix-prompt", "full-ft", "partial-ft", "lora"]
                .map(String::from)
                .to_vec(),
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ablation: AblationConfig,
}

fn set_dotted(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts = key.split('.').peekable();
    let mut cur = table;
    while let Some(part) = parts.next() {
        if part.is_empty() {
            return Err(Error::Config(format!("malformed key `{key}`")));
        }
        if parts.peek().is_none() {
            cur.insert(part.to_string(), value);
            return Ok(());
        }
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{part}` in `{key}` is not a table")))?;
    }
    Ok(())
}

fn parse_literal(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn flatten(prefix: &str, table: &Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

impl RunConfig {
    /// Parses config text, applies overrides, and validates.
    pub fn from_toml_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: Table =
            toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        for (k, v) in overrides {
            set_dotted(&mut table, k, parse_literal(v))?;
        }
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let d = &self.data;
        if d.horizon == 0 || d.train_stride == 0 || d.eval_stride == 0 {
            return Err(Error::Config(
                "data.horizon, data.train_stride and data.eval_stride must be positive".into(),
            ));
        }
        if !(d.train_frac > 0.0 && d.val_frac >= 0.0 && d.train_frac + d.val_frac < 1.0) {
            return Err(Error::Config(format!(
                "invalid split fractions {}/{}",
                d.train_frac, d.val_frac
            )));
        }
        if d.source == DataSource::Synthetic && (d.synthetic.length == 0 || d.synthetic.variables == 0) {
            return Err(Error::Config("synthetic length and variables must be positive".into()));
        }
        Ok(())
    }

    /// The resolved config as flat dotted-key TOML, keys sorted.
    pub fn to_flat_toml(&self) -> String {
        let value = Value::try_from(self).expect("config serialises to TOML");
        let table = value.as_table().expect("config is a table");
        let mut flat = Vec::new();
        flatten("", table, &mut flat);
        flat.sort_by(|a, b| a.0.cmp(&b.0));
        flat.iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

/// Output directory helper: creates it if needed.
pub fn ensure_dir(dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    Ok(dir.to_path_buf())
}
