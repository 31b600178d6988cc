//! Command-line entry points.
//!
//! Every command takes the resolved [`RunConfig`] (file plus overrides plus
//! `--seed`) and echoes it into each artifact it writes: checkpoint
//! metadata, `# `-prefixed CSV headers, and a `config` field in JSON files.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::ablation::{run_ablation, AblationResult, VariantSpec};
use crate::config::{ensure_dir, RunConfig};
use crate::error::{Error, Result};
use crate::forecaster::{
    evaluate_forecasts, param_report, persistence_metrics, train, BankSource, EpochLosses,
    ForecastModel, Metrics, ParamReport, TrainReport,
};
use crate::numerics::Checkpoint;
use crate::prompts::BankCache;
use crate::series::{format_timestamp, WindowSpan, Split};

pub const CHECKPOINT_FILE: &str = "checkpoint.tpck";
pub const METRICS_FILE: &str = "metrics.json";
pub const LOSS_CURVE_FILE: &str = "loss_curve.csv";
pub const FORECAST_FILE: &str = "forecast.csv";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_TABLE: &str = "ablation.txt";
pub const ABLATION_JSON: &str = "ablation.json";
pub const PARAMS_TEXT: &str = "params.txt";
pub const PARAMS_JSON: &str = "params.json";

/// Flags shared by every command.
#[derive(Clone, Debug, Default, Args)]
pub struct CommonArgs {
    /// Flat dotted-key TOML config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Overrides the top-level `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Persistent temporal embedding cache.
    #[arg(long)]
    pub bank_cache: Option<PathBuf>,
    /// `--section.key value` pairs, extracted before clap sees the arguments.
    #[arg(skip)]
    pub overrides: Vec<(String, String)>,
}

impl CommonArgs {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self {
            out: out.into(),
            ..Default::default()
        }
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(("seed".into(), s.to_string()));
        }
        RunConfig::load(self.config.as_deref(), &overrides)
    }

    fn bank_source(&self) -> Result<BankSource> {
        let cache = match &self.bank_cache {
            Some(p) => BankCache::open(p)?,
            None => BankCache::in_memory(),
        };
        Ok(BankSource::new(cache))
    }
}

#[derive(Debug, Parser)]
#[command(name = "tpc", version, about = "Temporal-prior conditioned forecasting on a frozen decoder")]
pub struct Cli {
    /// Log level: -v info, -vv debug (prompts are logged at debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the configured synthetic series as CSV.
    GenerateData(CommonArgs),
    /// Train the configured model; writes a checkpoint, loss curve and metrics.
    Train(CommonArgs),
    /// Roll a checkpoint forward from the end of its dataset.
    Forecast {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to `data.horizon`.
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Train and score every configured variant for every configured seed.
    Ablate(CommonArgs),
    /// Parameter counts per group, from a checkpoint or a freshly built model.
    ReportParams {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

impl Command {
    fn common_mut(&mut self) -> &mut CommonArgs {
        match self {
            Command::GenerateData(c) | Command::Train(c) | Command::Ablate(c) => c,
            Command::Forecast { common, .. } | Command::ReportParams { common, .. } => common,
        }
    }
}

/// Splits `--a.b value` and `--a.b=value` overrides (any flag whose name
/// contains a dot) out of `argv`.
pub fn extract_overrides(argv: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = argv.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--").filter(|f| f.contains('.')) else {
            rest.push(arg);
            continue;
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Config(format!("override --{flag} needs a value")))?;
                (flag.to_string(), v)
            }
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

fn comment_header(cfg: &RunConfig) -> String {
    cfg.to_flat_toml()
        .lines()
        .map(|l| format!("# {l}\n"))
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.into()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Writes the configured synthetic series to `<out>/<data.name>.csv`.
pub fn cmd_generate_data(args: &CommonArgs) -> Result<PathBuf> {
    let cfg = args.resolve()?;
    let series = crate::series::generate_synthetic(&cfg.data.synthetic)?;
    let path = ensure_dir(&args.out)?.join(format!("{}.csv", cfg.data.name));
    let mut buf = Vec::new();
    series.write_csv(&mut buf, Some(&cfg.to_flat_toml()))?;
    fs::write(&path, buf)?;
    log::info!("wrote {} rows to {}", series.len(), path.display());
    Ok(path)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainMetrics {
    pub config: String,
    pub dataset: String,
    pub data_fingerprint: String,
    pub checkpoint_fingerprint: String,
    pub train_samples: usize,
    pub val_samples: usize,
    pub test_windows: usize,
    pub steps: usize,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub lr: f64,
    pub test: Metrics,
    pub persistence: Metrics,
    pub epochs: Vec<EpochLosses>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub metrics: TrainMetrics,
    pub checkpoint: PathBuf,
    pub metrics_file: PathBuf,
    pub loss_curve: PathBuf,
}

/// Trains, evaluates on the test split and writes the artifacts.
pub fn cmd_train(args: &CommonArgs) -> Result<TrainOutcome> {
    let cfg = args.resolve()?;
    let echo = cfg.to_flat_toml();
    let out = ensure_dir(&args.out)?;
    let dataset = cfg.data.load(cfg.model.lookback)?;
    let mut source = args.bank_source()?;
    let mut model = ForecastModel::new(&cfg.model, cfg.seed)?;
    let tr = dataset.samples(&model, Split::Train, cfg.data.train_stride, &mut source)?;
    let va = dataset.samples(&model, Split::Val, cfg.data.train_stride, &mut source)?;
    log::info!("{} training and {} validation samples", tr.len(), va.len());
    let report = train(&mut model, &tr, &va, &cfg.train)?;
    let test = dataset.windows(Split::Test, cfg.model.lookback, cfg.data.horizon, cfg.data.eval_stride)?;
    let test_metrics = evaluate_forecasts(&model, &test, &mut source)?;

    let ck = model.checkpoint(echo.clone());
    let checkpoint = out.join(CHECKPOINT_FILE);
    ck.save(&checkpoint)?;

    let loss_curve = out.join(LOSS_CURVE_FILE);
    let mut text = comment_header(&cfg);
    text.push_str("epoch,train_loss,val_loss\n");
    for e in &report.epochs {
        let val = e.val.map_or(String::new(), |v| format!("{v}"));
        text.push_str(&format!("{},{},{}\n", e.epoch, e.train, val));
    }
    fs::write(&loss_curve, text)?;

    let metrics = TrainMetrics {
        config: echo,
        dataset: dataset.name.clone(),
        data_fingerprint: dataset.fingerprint(),
        checkpoint_fingerprint: ck.fingerprint(),
        train_samples: tr.len(),
        val_samples: va.len(),
        test_windows: test.len(),
        steps: report.steps,
        best_epoch: report.best_epoch,
        stopped_early: report.stopped_early,
        lr: report.lr,
        test: test_metrics,
        persistence: persistence_metrics(&test)?,
        epochs: report.epochs.clone(),
    };
    let metrics_file = out.join(METRICS_FILE);
    write_json(&metrics_file, &metrics)?;
    Ok(TrainOutcome {
        report,
        metrics,
        checkpoint,
        metrics_file,
        loss_curve,
    })
}

/// Rebuilds the model a checkpoint was trained as. Overrides may change
/// data settings but not the model.
pub fn load_checkpoint(path: &Path, overrides: &[(String, String)]) -> Result<(RunConfig, ForecastModel)> {
    let ck = Checkpoint::load(path)?;
    let saved = RunConfig::from_toml_with_overrides(&ck.meta, &[])?;
    let cfg = RunConfig::from_toml_with_overrides(&ck.meta, overrides)?;
    if cfg.model != saved.model {
        return Err(Error::Config(
            "model settings cannot be overridden when loading a checkpoint".into(),
        ));
    }
    let mut model = ForecastModel::new(&cfg.model, cfg.seed)?;
    if ck.entries.len() != model.store.len() {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            detail: format!(
                "{} parameters stored, model has {}",
                ck.entries.len(),
                model.store.len()
            ),
        });
    }
    ck.restore_into(&mut model.store)?;
    Ok((cfg, model))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForecastRow {
    pub timestamp: String,
    pub variable: String,
    pub value: f64,
}

/// Forecasts `horizon` steps past the end of the checkpoint's dataset, for
/// every variable, in the original scale.
pub fn cmd_forecast(args: &CommonArgs, checkpoint: &Path, horizon: Option<usize>) -> Result<(PathBuf, Vec<ForecastRow>)> {
    let (cfg, model) = load_checkpoint(checkpoint, &args.overrides)?;
    let horizon = horizon.unwrap_or(cfg.data.horizon);
    let dataset = cfg.data.load(cfg.model.lookback)?;
    let series = &dataset.series;
    let t = cfg.model.lookback;
    let n = series.len();
    if n < t {
        return Err(Error::Ingestion(format!("series of {n} steps is shorter than the lookback {t}")));
    }
    let span = WindowSpan::new(series.timestamp(n - t), series.granularity, t);
    let mut source = args.bank_source()?;
    let mut rows = Vec::new();
    for (v, name) in series.names.iter().enumerate() {
        let pred = model.forecast(&series.values[v][n - t..], span, horizon, &mut source)?;
        for (k, y) in dataset.scaler.inverse(v, &pred).into_iter().enumerate() {
            rows.push(ForecastRow {
                timestamp: format_timestamp(series.timestamp(n + k)),
                variable: name.clone(),
                value: y,
            });
        }
    }
    let path = ensure_dir(&args.out)?.join(FORECAST_FILE);
    let mut text = comment_header(&cfg);
    text.push_str("timestamp,variable,value\n");
    for r in &rows {
        text.push_str(&format!("{},{},{}\n", r.timestamp, r.variable, r.value));
    }
    fs::write(&path, text)?;
    Ok((path, rows))
}

/// Runs the configured ablation and writes CSV, text and JSON tables.
pub fn cmd_ablate(args: &CommonArgs) -> Result<AblationResult> {
    let cfg = args.resolve()?;
    let variants = cfg
        .ablation
        .variants
        .iter()
        .map(|v| VariantSpec::parse(v))
        .collect::<Result<Vec<_>>>()?;
    let out = ensure_dir(&args.out)?;
    let dataset = cfg.data.load(cfg.model.lookback)?;
    let mut source = args.bank_source()?;
    let result = run_ablation(&cfg, &dataset, &variants, &cfg.ablation.seeds, &mut source, |r| {
        log::info!("{} seed {}: mse {:.4} mae {:.4}", r.variant, r.seed, r.mse, r.mae);
    })?;
    let header = comment_header(&cfg);
    fs::write(out.join(ABLATION_CSV), format!("{header}{}", result.to_csv()?))?;
    fs::write(out.join(ABLATION_TABLE), format!("{header}{}", result.to_table()))?;
    #[derive(Serialize)]
    struct Doc<'r> {
        config: String,
        #[serde(flatten)]
        result: &'r AblationResult,
    }
    write_json(
        &out.join(ABLATION_JSON),
        &Doc {
            config: cfg.to_flat_toml(),
            result: &result,
        },
    )?;
    Ok(result)
}

/// Parameter report of a checkpoint, or of the configured model when none
/// is given.
pub fn cmd_report_params(args: &CommonArgs, checkpoint: Option<&Path>) -> Result<ParamReport> {
    let (cfg, model) = match checkpoint {
        Some(p) => load_checkpoint(p, &args.overrides)?,
        None => {
            let cfg = args.resolve()?;
            let model = ForecastModel::new(&cfg.model, cfg.seed)?;
            (cfg, model)
        }
    };
    let report = param_report(&model.store);
    let out = ensure_dir(&args.out)?;
    fs::write(out.join(PARAMS_TEXT), format!("{}{}", comment_header(&cfg), report.to_text()))?;
    #[derive(Serialize)]
    struct Doc<'r> {
        config: String,
        #[serde(flatten)]
        report: &'r ParamReport,
    }
    write_json(
        &out.join(PARAMS_JSON),
        &Doc {
            config: cfg.to_flat_toml(),
            report: &report,
        },
    )?;
    Ok(report)
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run(argv: Vec<String>) -> i32 {
    let (rest, overrides) = match extract_overrides(argv) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let mut cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    cli.command.common_mut().overrides = overrides;
    let result = match &cli.command {
        Command::GenerateData(c) => cmd_generate_data(c).map(|p| println!("{}", p.display())),
        Command::Train(c) => cmd_train(c).map(|o| {
            println!(
                "test mse {:.6} mae {:.6} (persistence mse {:.6}) after {} steps",
                o.metrics.test.mse, o.metrics.test.mae, o.metrics.persistence.mse, o.metrics.steps
            );
            println!("{}", o.checkpoint.display());
        }),
        Command::Forecast {
            common,
            checkpoint,
            horizon,
        } => cmd_forecast(common, checkpoint, *horizon).map(|(p, _)| println!("{}", p.display())),
        Command::Ablate(c) => cmd_ablate(c).map(|r| print!("{}", r.to_table())),
        Command::ReportParams { common, checkpoint } => {
            cmd_report_params(common, checkpoint.as_deref()).map(|r| print!("{}", r.to_text()))
        }
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn overrides_are_extracted() {
        let (rest, ov) =
            extract_overrides(argv("tpc train --out x --model.lookback 48 --train.lr=0.01 --seed 3")).unwrap();
        assert_eq!(rest, argv("tpc train --out x --seed 3"));
        assert_eq!(
            ov,
            vec![
                ("model.lookback".to_string(), "48".to_string()),
                ("train.lr".to_string(), "0.01".to_string())
            ]
        );
        assert!(extract_overrides(argv("tpc train --model.lookback")).is_err());
    }

    #[test]
    fn exit_codes() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        assert_eq!(run(argv(&format!("tpc train --out {out} --model.lookbak 3"))), 1);
        assert_eq!(
            run(argv(&format!("tpc train --out {out} --data.source csv --data.path {out}/missing.csv"))),
            2
        );
        assert_eq!(run(argv("tpc frobnicate")), 1);
    }
}
