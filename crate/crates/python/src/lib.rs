//! Python module `cvgl`: synthetic data, training, evaluation and the
//! retrieval metrics of the core library.

use std::collections::BTreeMap;
use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use cvgl::checkpoint::Checkpoint;
use cvgl::config::{Config, Precision};
use cvgl::data::{generate_synthetic, load_dataset, save_dataset, SplitRole, SyntheticSpec};
use cvgl::evaluation::{complexity_report, extract_all_descriptors, recall_at_k, KSpec, STANDARD_KS};
use cvgl::training::{fit_with, FitOptions};
use cvgl::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::NonFinite { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn recall_dict(report: &cvgl::evaluation::RecallReport) -> BTreeMap<String, f64> {
    report.r_at.iter().map(|e| (e.k.clone(), e.percent)).collect()
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("descriptor rows differ in length"));
    }
    Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

/// TOML text of a named preset.
#[pyfunction]
fn preset_toml(name: &str) -> PyResult<String> {
    Ok(Config::preset(name).map_err(py_err)?.to_toml())
}

/// Writes `count` seeded synthetic pairs under `out`; returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out, count = 32, seed = 0))]
fn synthesize(out: PathBuf, count: usize, seed: u64) -> PyResult<String> {
    let spec = SyntheticSpec { count, seed, ..SyntheticSpec::default() };
    let split = generate_synthetic(&spec).map_err(py_err)?;
    let manifest = save_dataset(&out, &split, Some(&spec)).map_err(py_err)?;
    Ok(manifest.display().to_string())
}

/// Trains on the dataset at `data`, writing checkpoints to `out`. Returns
/// the mean loss of every epoch.
#[pyfunction]
#[pyo3(signature = (data, out, preset = "toy", epochs = None, seed = None, double_precision = false))]
fn train(
    data: PathBuf,
    out: PathBuf,
    preset: &str,
    epochs: Option<usize>,
    seed: Option<u64>,
    double_precision: bool,
) -> PyResult<Vec<f64>> {
    let mut config = Config::preset(preset).map_err(py_err)?;
    if let Some(e) = epochs {
        config.train.epochs = e;
    }
    if let Some(s) = seed {
        config.train.seed = s;
    }
    if double_precision {
        config.train.precision = Precision::F64;
    }
    let split = load_dataset(&data, SplitRole::Train).map_err(py_err)?;
    std::fs::create_dir_all(&out).map_err(|e| py_err(Error::io(&out, e)))?;
    let opts = FitOptions { checkpoint_dir: Some(&out), ..Default::default() };
    let report = fit_with(&split, &config, opts).map_err(py_err)?;
    Ok(report.epochs.iter().map(|e| e.mean_loss).collect())
}

/// Recall percentages (`r@1`, `r@5`, `r@10`, `r@1%`) and the parameter count
/// of a checkpoint scored on the dataset at `data`.
#[pyfunction]
fn evaluate(checkpoint: PathBuf, data: PathBuf) -> PyResult<(BTreeMap<String, f64>, usize)> {
    let ck = Checkpoint::load(&Checkpoint::resolve(&checkpoint).map_err(py_err)?).map_err(py_err)?;
    let split = load_dataset(&data, SplitRole::Test).map_err(py_err)?;
    let (g, a) = extract_all_descriptors(&split, &ck.model).map_err(py_err)?;
    let report = recall_at_k(&g, &a, &STANDARD_KS).map_err(py_err)?;
    Ok((recall_dict(&report), complexity_report(&ck.model).total_params))
}

/// Recall at each integer cut-off in `ks` (plus `r@1%`) for row-aligned
/// ground and aerial descriptors.
#[pyfunction]
#[pyo3(signature = (ground, aerial, ks = vec![1, 5, 10]))]
fn recall(ground: Vec<Vec<f64>>, aerial: Vec<Vec<f64>>, ks: Vec<usize>) -> PyResult<BTreeMap<String, f64>> {
    let mut specs: Vec<KSpec> = ks.into_iter().map(KSpec::Top).collect();
    specs.push(KSpec::OnePercent);
    let report = recall_at_k(&matrix(ground)?, &matrix(aerial)?, &specs).map_err(py_err)?;
    Ok(recall_dict(&report))
}

#[pyfunction]
fn triplet_loss(d_pos: f64, d_neg: f64, gamma: f64) -> f64 {
    cvgl::objectives::triplet_loss(d_pos, d_neg, gamma)
}

#[pymodule]
#[pyo3(name = "cvgl")]
fn cvgl_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(preset_toml, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(recall, m)?)?;
    m.add_function(wrap_pyfunction!(triplet_loss, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_rejects_ragged_rows() {
        assert!(matrix(vec![vec![1.0, 2.0], vec![3.0]]).is_err());
        assert_eq!(matrix(vec![vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap().dim(), (2, 2));
    }

    #[test]
    fn error_kinds_map_to_python_types() {
        Python::initialize();
        Python::attach(|py| {
            let e = py_err(Error::NonFinite { tensor: "x".into() });
            assert!(e.is_instance_of::<PyRuntimeError>(py));
            let e = py_err(Error::Data("bad".into()));
            assert!(e.is_instance_of::<PyValueError>(py));
        });
    }
}
