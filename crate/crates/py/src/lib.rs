//! Python bindings. Configs travel as JSON strings so the Python side can
//! use plain dicts without a schema mirror.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use vmask::audit::{audit_config, check_conv as conv_rule, check_fc as fc_rule, ConvAuditInput, FcAuditInput};
use vmask::config::RunConfig;
use vmask::run::{prepare_data, run_with_data, write_outputs};

fn to_py(e: vmask::Error) -> PyErr {
    match e {
        vmask::Error::InvalidConfig(msg) => PyValueError::new_err(msg),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn parse(config_json: Option<&str>) -> PyResult<RunConfig> {
    match config_json {
        Some(s) => RunConfig::from_json(s).map_err(to_py),
        None => Ok(RunConfig::default()),
    }
}

/// Default run configuration as a JSON string.
#[pyfunction]
fn default_config() -> String {
    RunConfig::default().to_json()
}

/// `True` when a fully connected layer with `input_dim` inputs cannot be
/// solved for from one batch of `batch_size` rows.
#[pyfunction]
fn check_fc(batch_size: usize, input_dim: usize) -> bool {
    fc_rule(FcAuditInput { batch_size, input_dim }).is_secure()
}

#[pyfunction]
#[pyo3(signature = (input_size, kernel_size, padding=0, stride=1))]
fn check_conv(input_size: usize, kernel_size: usize, padding: usize, stride: usize) -> bool {
    conv_rule(ConvAuditInput {
        input_size,
        kernel_size,
        padding,
        stride,
    })
    .is_secure()
}

/// Security report for a config, as printed by the CLI.
#[pyfunction]
#[pyo3(signature = (config_json=None))]
fn audit(config_json: Option<&str>) -> PyResult<String> {
    let cfg = parse(config_json)?;
    let data = prepare_data(&cfg).map_err(to_py)?;
    Ok(audit_config(&cfg, data.feature_dim()).map_err(to_py)?.to_string())
}

/// Runs one training configuration and returns a summary dict. With
/// `out_dir`, also writes the usual CSV files and checkpoints there.
#[pyfunction]
#[pyo3(signature = (config_json=None, out_dir=None))]
fn train<'py>(py: Python<'py>, config_json: Option<&str>, out_dir: Option<&str>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = parse(config_json)?;
    let (outcome, data) = py
        .detach(|| {
            let data = prepare_data(&cfg)?;
            let outcome = run_with_data(&cfg, &data)?;
            Ok::<_, vmask::Error>((outcome, data))
        })
        .map_err(to_py)?;
    if let Some(dir) = out_dir {
        write_outputs(&outcome, &data, std::path::Path::new(dir)).map_err(to_py)?;
    }

    let d = PyDict::new(py);
    d.set_item("mode", cfg.mode.to_string())?;
    d.set_item("best_epoch", outcome.best_epoch)?;
    d.set_item("best_test_accuracy", outcome.best_test_accuracy)?;
    d.set_item("final_test_accuracy", outcome.final_test_accuracy)?;
    d.set_item("mask_ratio", outcome.mask_ratio)?;
    d.set_item("losses", outcome.epochs.iter().map(|e| e.loss).collect::<Vec<_>>())?;
    d.set_item(
        "masked",
        outcome
            .epochs
            .iter()
            .map(|e| {
                e.masked
                    .iter()
                    .map(|u| u.iter().copied().collect::<Vec<_>>())
                    .collect::<Vec<_>>()
            })
            .collect::<Vec<_>>(),
    )?;
    let attacks = PyDict::new(py);
    for a in &outcome.attacks {
        attacks.set_item(format!("{}/party{}", a.target, a.party), a.best)?;
    }
    d.set_item("attacks", attacks)?;
    Ok(d)
}

#[pymodule]
fn vmask_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(check_fc, m)?)?;
    m.add_function(wrap_pyfunction!(check_conv, m)?)?;
    m.add_function(wrap_pyfunction!(audit, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
