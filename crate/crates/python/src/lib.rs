//! Python bindings: configuration, data utilities, models, training and
//! ablation runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use tpc_core::cli::{cmd_ablate, cmd_train, load_checkpoint, CommonArgs};
use tpc_core::config::RunConfig;
use tpc_core::forecaster::{param_report, BankSource, ForecastModel};
use tpc_core::numerics::Tensor;
use tpc_core::prompts::{render_prompt as render, BankCache, TemporalSpan};
use tpc_core::series::{self, format_timestamp, parse_timestamp, Granularity, SyntheticSpec, WindowSpan};
use tpc_core::Error;

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Config(_) | Error::Length { .. } | Error::Tokenization { .. } | Error::EmptyBank => {
            PyValueError::new_err(msg)
        }
        Error::Ingestion(_) | Error::Parse { .. } | Error::Io(_) | Error::Checkpoint { .. } => {
            PyOSError::new_err(msg)
        }
        Error::Divergence { .. } | Error::NonFinite { .. } => PyArithmeticError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

fn to_pairs(map: Option<BTreeMap<String, String>>) -> Vec<(String, String)> {
    map.unwrap_or_default().into_iter().collect()
}

fn json<'py>(py: Python<'py>, text: String) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("serialisable")
}

/// Resolves config text plus overrides into flat dotted-key TOML.
#[pyfunction]
#[pyo3(signature = (config = "", overrides = None))]
fn resolve_config(config: &str, overrides: Option<BTreeMap<String, String>>) -> PyResult<String> {
    let cfg = RunConfig::from_toml_with_overrides(config, &to_pairs(overrides)).map_err(py_err)?;
    Ok(cfg.to_flat_toml())
}

/// Calendar-coupled synthetic series: `(timestamps, values)`.
#[pyfunction]
#[pyo3(signature = (length = 10_000, seed = 0, coupling = 1.0, noise = 0.1, phase_block = 336, start = "2017-01-01 00:00:00", granularity = "hourly"))]
fn generate_synthetic(
    length: usize,
    seed: u64,
    coupling: f64,
    noise: f64,
    phase_block: usize,
    start: &str,
    granularity: &str,
) -> PyResult<(Vec<String>, Vec<f64>)> {
    let spec = SyntheticSpec {
        seed,
        length,
        start: start.to_string(),
        granularity: Granularity::parse(granularity).map_err(py_err)?,
        coupling,
        noise,
        phase_block,
        variables: 1,
    };
    let s = series::generate_synthetic(&spec).map_err(py_err)?;
    let stamps = s.timestamps().into_iter().map(format_timestamp).collect();
    Ok((stamps, s.values.into_iter().next().unwrap_or_default()))
}

#[pyfunction]
fn patch_count(t: usize, patch_len: usize, stride: usize) -> PyResult<usize> {
    series::patch_count(t, patch_len, stride).map_err(py_err)
}

/// Patches of a (normalised) window, padded with its last `stride` values.
#[pyfunction]
fn patchify(window: Vec<f64>, patch_len: usize, stride: usize) -> PyResult<Vec<Vec<f64>>> {
    let seq = series::patchify(&window, patch_len, stride).map_err(py_err)?;
    Ok(rows(&seq.patches))
}

/// `(normalised, mean, std)` of one window.
#[pyfunction]
fn revin_normalize(window: Vec<f64>) -> PyResult<(Vec<f64>, f64, f64)> {
    let (mut out, stats) = series::revin_normalize(&[window]).map_err(py_err)?;
    Ok((out.remove(0), stats.mean[0], stats.std[0]))
}

#[pyfunction]
fn revin_denormalize(values: Vec<f64>, mean: f64, std: f64) -> Vec<f64> {
    values.iter().map(|v| v * std + mean).collect()
}

#[pyfunction]
#[pyo3(signature = (start, end, granularity = "hourly"))]
fn render_prompt(start: &str, end: &str, granularity: &str) -> PyResult<String> {
    let g = Granularity::parse(granularity).map_err(py_err)?;
    let start = parse_timestamp(start).map_err(PyValueError::new_err)?;
    let end = parse_timestamp(end).map_err(PyValueError::new_err)?;
    Ok(render(&TemporalSpan::new(start, end, g).map_err(py_err)?))
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn common(
    out: &str,
    config: Option<PathBuf>,
    overrides: Option<BTreeMap<String, String>>,
    seed: Option<u64>,
    bank_cache: Option<PathBuf>,
) -> CommonArgs {
    CommonArgs {
        config,
        seed,
        bank_cache,
        overrides: to_pairs(overrides),
        ..CommonArgs::new(out)
    }
}

/// Trains the configured model and writes its artifacts under `out`.
/// Returns the metrics document.
#[pyfunction]
#[pyo3(signature = (out, config = None, overrides = None, seed = None, bank_cache = None))]
fn train<'py>(
    py: Python<'py>,
    out: &str,
    config: Option<PathBuf>,
    overrides: Option<BTreeMap<String, String>>,
    seed: Option<u64>,
    bank_cache: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let args = common(out, config, overrides, seed, bank_cache);
    let outcome = py.detach(|| cmd_train(&args)).map_err(py_err)?;
    json(py, to_json(&outcome.metrics))
}

/// Runs the configured ablation, writing its tables under `out`. Returns
/// the result document.
#[pyfunction]
#[pyo3(signature = (out, config = None, overrides = None, seed = None, bank_cache = None))]
fn ablate<'py>(
    py: Python<'py>,
    out: &str,
    config: Option<PathBuf>,
    overrides: Option<BTreeMap<String, String>>,
    seed: Option<u64>,
    bank_cache: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let args = common(out, config, overrides, seed, bank_cache);
    let result = py.detach(|| cmd_ablate(&args)).map_err(py_err)?;
    json(py, to_json(&result))
}

/// A forecasting model with its parameters and prompt encoder.
#[pyclass(name = "Model")]
struct PyModel {
    inner: ForecastModel,
    config: RunConfig,
    source: BankSource,
}

#[pymethods]
impl PyModel {
    /// Freshly initialised model of the resolved config; `seed` overrides
    /// the config's seed.
    #[new]
    #[pyo3(signature = (config = "", overrides = None, seed = None))]
    fn new(config: &str, overrides: Option<BTreeMap<String, String>>, seed: Option<u64>) -> PyResult<Self> {
        let mut ov = to_pairs(overrides);
        if let Some(s) = seed {
            ov.push(("seed".into(), s.to_string()));
        }
        let cfg = RunConfig::from_toml_with_overrides(config, &ov).map_err(py_err)?;
        let inner = ForecastModel::new(&cfg.model, cfg.seed).map_err(py_err)?;
        Ok(Self {
            inner,
            config: cfg,
            source: BankSource::new(BankCache::in_memory()),
        })
    }

    /// Rebuilds a model from a checkpoint written by `train`.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (config, inner) = load_checkpoint(&path, &[]).map_err(py_err)?;
        Ok(Self {
            inner,
            config,
            source: BankSource::new(BankCache::in_memory()),
        })
    }

    /// The resolved config as flat dotted-key TOML.
    fn config(&self) -> String {
        self.config.to_flat_toml()
    }

    #[getter]
    fn n_patches(&self) -> usize {
        self.inner.net.n_patches()
    }

    fn param_report<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json(py, to_json(&param_report(&self.inner.store)))
    }

    /// Temporal bank of the window starting at `start`, one row per span.
    #[pyo3(signature = (start, granularity = "hourly"))]
    fn bank(&mut self, start: &str, granularity: &str) -> PyResult<Vec<Vec<f64>>> {
        let span = self.span(start, granularity)?;
        let bank = self.inner.bank_for(&span, &mut self.source).map_err(py_err)?;
        Ok(rows(&bank))
    }

    /// Next-patch predictions (`P × L_p`, normalised) for given patches and bank.
    fn predict(&self, patches: Vec<Vec<f64>>, bank: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let p = Tensor::from_rows(&patches).map_err(py_err)?;
        let width = self.inner.config().backbone.width;
        let b = if bank.is_empty() {
            Tensor::zeros(&[0, width])
        } else {
            Tensor::from_rows(&bank).map_err(py_err)?
        };
        Ok(rows(&self.inner.predict(&p, &b).map_err(py_err)?))
    }

    /// Autoregressive forecast of `horizon` values after `lookback`, whose
    /// first value is observed at `start`.
    #[pyo3(signature = (lookback, start, horizon, granularity = "hourly"))]
    fn forecast(&mut self, lookback: Vec<f64>, start: &str, horizon: usize, granularity: &str) -> PyResult<Vec<f64>> {
        let span = self.span(start, granularity)?;
        self.inner
            .forecast(&lookback, span, horizon, &mut self.source)
            .map_err(py_err)
    }

    /// Writes a checkpoint with the config echoed into its metadata.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner
            .checkpoint(self.config.to_flat_toml())
            .save(Path::new(&path))
            .map_err(py_err)
    }

    /// SHA-256 of the parameters.
    fn fingerprint(&self) -> String {
        self.inner.checkpoint("").fingerprint()
    }
}

impl PyModel {
    fn span(&self, start: &str, granularity: &str) -> PyResult<WindowSpan> {
        let g = Granularity::parse(granularity).map_err(py_err)?;
        let start = parse_timestamp(start).map_err(PyValueError::new_err)?;
        Ok(WindowSpan::new(start, g, self.inner.config().lookback))
    }
}

#[pymodule]
fn tpc(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(resolve_config, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(patch_count, m)?)?;
    m.add_function(wrap_pyfunction!(patchify, m)?)?;
    m.add_function(wrap_pyfunction!(revin_normalize, m)?)?;
    m.add_function(wrap_pyfunction!(revin_denormalize, m)?)?;
    m.add_function(wrap_pyfunction!(render_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(ablate, m)?)?;
    Ok(())
}
