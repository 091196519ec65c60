//! Python bindings: configs travel as TOML text, results as plain dicts.

use std::path::{Path, PathBuf};

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use w2sg_core::bounds::{c1_for, scatter_fit};
use w2sg_core::calibration::calibration_gap_bound as gap_bound;
use w2sg_core::cli::{self, OUTPUT_DIR_ENV};
use w2sg_core::divergence::{self, DivergenceValue, ProbVector};
use w2sg_core::pipeline::{ExperimentConfig, Setting};
use w2sg_core::selftest;

const DEFAULT_GAMMA: f64 = 0.01;

fn value_error(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn config(text: &str) -> PyResult<ExperimentConfig> {
    cli::parse_config(text, Path::new("<python>")).map_err(value_error)
}

fn probs(v: Vec<f64>, floor: f64) -> PyResult<ProbVector> {
    ProbVector::new(v, floor).map_err(value_error)
}

/// Parse and validate a TOML config; returns the resolved config as TOML.
#[pyfunction]
fn validate_config(text: &str) -> PyResult<String> {
    cli::config_to_toml(&config(text)?.resolved()).map_err(value_error)
}

/// Default config at desk scale, as TOML.
#[pyfunction]
fn desk_scale_config() -> PyResult<String> {
    cli::config_to_toml(&ExperimentConfig::desk_scale()).map_err(value_error)
}

/// Run an experiment and write its outputs. Without `out_dir` the
/// environment variable is used, then `w2sg-output/python`.
#[pyfunction]
#[pyo3(signature = (text, out_dir=None))]
fn run<'py>(py: Python<'py>, text: &str, out_dir: Option<PathBuf>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config(text)?;
    let dir = out_dir
        .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("w2sg-output/python"));
    let outcome = py.detach(|| cli::run(&cfg, &dir)).map_err(value_error)?;

    let out = PyDict::new(py);
    out.set_item("output_dir", dir)?;
    out.set_item("tasks", outcome.report.results.len())?;
    out.set_item("failed_tasks", outcome.report.failures.len())?;
    out.set_item("asserted_failures", outcome.asserted_failures().len())?;
    if let Some(fit) = scatter_fit(&outcome.report.results) {
        out.set_item("slope", fit.slope)?;
        out.set_item("pearson", fit.pearson)?;
    }
    out.set_item("misfit", outcome.report.results.iter().map(|r| r.misfit()).collect::<Vec<_>>())?;
    out.set_item("gain", outcome.report.results.iter().map(|r| r.gain).collect::<Vec<_>>())?;
    out.set_item("summary", outcome.summary)?;
    Ok(out)
}

/// KL(p‖q) between two discrete distributions whose entries are all ≥ `floor`.
#[pyfunction]
#[pyo3(signature = (p, q, floor=DEFAULT_GAMMA))]
fn kl(p: Vec<f64>, q: Vec<f64>, floor: f64) -> PyResult<f64> {
    Ok(divergence::kl_discrete(&probs(p, floor)?, &probs(q, floor)?).map_err(value_error)?.value)
}

#[pyfunction]
#[pyo3(signature = (p, q, floor=DEFAULT_GAMMA))]
fn tv(p: Vec<f64>, q: Vec<f64>, floor: f64) -> PyResult<f64> {
    Ok(divergence::tv_distance(&probs(p, floor)?, &probs(q, floor)?).map_err(value_error)?.value)
}

#[pyfunction]
#[pyo3(signature = (raw, floor=DEFAULT_GAMMA))]
fn normalize_outputs(raw: Vec<f64>, floor: f64) -> PyResult<Vec<f64>> {
    Ok(divergence::normalize_outputs(&raw, floor).map_err(value_error)?.entries().to_vec())
}

/// Largest MCE gap permitted between two models at divergence `d`.
#[pyfunction]
fn calibration_gap_bound(d: f64) -> f64 {
    gap_bound(DivergenceValue::kl(d))
}

#[pyfunction]
#[pyo3(signature = (setting, gamma=DEFAULT_GAMMA))]
fn c1(setting: &str, gamma: f64) -> PyResult<f64> {
    let setting = match setting {
        "classification-kl" => Setting::ClassificationKl,
        "output-distribution" => Setting::OutputDistribution,
        other => return Err(value_error(format!("unknown setting {other:?}"))),
    };
    Ok(c1_for(setting, gamma))
}

/// Property suites; one `(name, passed, detail)` per suite.
#[pyfunction]
#[pyo3(signature = (seed=0))]
fn run_selftest(py: Python<'_>, seed: u64) -> Vec<(String, bool, String)> {
    py.detach(|| selftest::run_all(seed)).into_iter().map(|s| (s.name.clone(), s.passed(), s.to_string())).collect()
}

#[pymodule]
fn w2sg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(validate_config, m)?)?;
    m.add_function(wrap_pyfunction!(desk_scale_config, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(kl, m)?)?;
    m.add_function(wrap_pyfunction!(tv, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_outputs, m)?)?;
    m.add_function(wrap_pyfunction!(calibration_gap_bound, m)?)?;
    m.add_function(wrap_pyfunction!(c1, m)?)?;
    m.add_function(wrap_pyfunction!(run_selftest, m)?)?;
    Ok(())
}
