//! Python bindings over the core library: dataset generation, training,
//! evaluation, gradient checking, and the loss/similarity kernels, exposed
//! with plain Python types (lists and dicts).

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use std::path::PathBuf;

use cromekit_core::config::RunConfig;
use cromekit_core::data;
use cromekit_core::encoders::Modality;
use cromekit_core::error::CromeError;
use cromekit_core::metric::{MetricBatch, MetricConfig};
use cromekit_core::numerics::matrix::{self, Matrix};
use cromekit_core::numerics::tape::Tape;
use cromekit_core::training;

fn to_py_err(e: CromeError) -> PyErr {
    match e {
        CromeError::Config(_)
        | CromeError::Schema(_)
        | CromeError::Parse { .. }
        | CromeError::Data(_)
        | CromeError::Shape { .. }
        | CromeError::DegenerateVector(_)
        | CromeError::DegenerateBatch(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn matrix_from_rows(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("matrix needs at least one row"));
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged rows"));
    }
    Ok(Matrix::from_rows(&rows))
}

fn matrix_to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows).map(|r| m.row(r).to_vec()).collect()
}

fn config_from_toml(config_toml: Option<&str>, seed: Option<u64>) -> PyResult<RunConfig> {
    let mut cfg = match config_toml {
        Some(text) => RunConfig::from_toml_str(text).map_err(to_py_err)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
        cfg.gen.seed = seed;
    }
    cfg.validate().map_err(to_py_err)?;
    Ok(cfg)
}

fn report_to_dict<'py>(
    py: Python<'py>,
    r: &training::MetricsReport,
) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("accuracy", r.accuracy)?;
    d.set_item("precision_fake", r.precision_fake)?;
    d.set_item("recall_fake", r.recall_fake)?;
    d.set_item("f1_fake", r.f1_fake)?;
    d.set_item("precision_real", r.precision_real)?;
    d.set_item("recall_real", r.recall_real)?;
    d.set_item("f1_real", r.f1_real)?;
    d.set_item("confusion", r.confusion.to_vec())?;
    d.set_item("zero_division", r.zero_division)?;
    Ok(d)
}

/// Matrix product of two row-major nested lists.
#[pyfunction]
fn matmul(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let a = matrix_from_rows(a)?;
    let b = matrix_from_rows(b)?;
    let c = matrix::matmul(&a, &b).map_err(to_py_err)?;
    Ok(matrix_to_rows(&c))
}

/// Row-wise stabilized softmax.
#[pyfunction]
fn softmax_rows(m: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let m = matrix_from_rows(m)?;
    Ok(matrix_to_rows(&matrix::softmax_rows(&m)))
}

/// Cosine similarity of two vectors; raises ValueError on zero norm.
#[pyfunction]
fn cosine_sim(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    matrix::cosine_sim(&a, &b).map_err(to_py_err)
}

/// Proxy anchor loss over pooled embeddings (one row per point).
#[pyfunction]
#[pyo3(signature = (embeddings, labels, proxies, proxy_classes, alpha=16.0, delta=0.1))]
fn proxy_anchor_loss(
    embeddings: Vec<Vec<f64>>,
    labels: Vec<usize>,
    proxies: Vec<Vec<f64>>,
    proxy_classes: Vec<usize>,
    alpha: f64,
    delta: f64,
) -> PyResult<f64> {
    let mut tape = Tape::new();
    let e = tape.leaf(matrix_from_rows(embeddings)?);
    let p = tape.leaf(matrix_from_rows(proxies)?);
    let cfg = MetricConfig {
        alpha,
        delta,
        ..MetricConfig::default()
    };
    let batch = MetricBatch {
        embeddings: e,
        labels,
        proxies: p,
        proxy_classes,
    };
    let loss = cromekit_core::metric::proxy_anchor_loss(&mut tape, &batch, &cfg)
        .map_err(to_py_err)?;
    Ok(tape.value(loss).item())
}

/// The modality tag active at a given epoch under the default schedule.
#[pyfunction]
#[pyo3(signature = (epoch, epochs_per_modality=5))]
fn modality_schedule(epoch: usize, epochs_per_modality: usize) -> PyResult<String> {
    let cfg = MetricConfig {
        epochs_per_modality,
        ..MetricConfig::default()
    };
    Ok(cromekit_core::metric::modality_schedule(epoch, &cfg)
        .tag()
        .to_string())
}

/// Generate a synthetic dataset file; returns the sample count.
#[pyfunction]
#[pyo3(signature = (path, config_toml=None, seed=None))]
fn gen_dataset(path: PathBuf, config_toml: Option<&str>, seed: Option<u64>) -> PyResult<usize> {
    let cfg = config_from_toml(config_toml, seed)?;
    let ds = data::generate(&cfg.gen).map_err(to_py_err)?;
    data::save(&ds, &path).map_err(to_py_err)?;
    Ok(ds.len())
}

/// Load a dataset file and return a summary dict.
#[pyfunction]
fn dataset_info(py: Python<'_>, path: PathBuf) -> PyResult<Py<PyDict>> {
    let ds = data::load(&path).map_err(to_py_err)?;
    let d = PyDict::new(py);
    d.set_item("n_samples", ds.len())?;
    d.set_item("d_raw", ds.header.d_raw)?;
    d.set_item("k_img", ds.header.k_img)?;
    d.set_item("k_txt", ds.header.k_txt)?;
    d.set_item(
        "n_fake",
        ds.samples.iter().filter(|s| s.label == 1).count(),
    )?;
    d.set_item("version", ds.header.version)?;
    Ok(d.into())
}

/// Train on a dataset file; returns the final metrics report as a dict.
/// When out_dir is given, writes logs, checkpoint, and metrics there.
#[pyfunction]
#[pyo3(signature = (data_path, config_toml=None, seed=None, out_dir=None))]
fn train(
    py: Python<'_>,
    data_path: PathBuf,
    config_toml: Option<&str>,
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
) -> PyResult<Py<PyDict>> {
    let cfg = config_from_toml(config_toml, seed)?;
    let ds = data::load(&data_path).map_err(to_py_err)?;
    let out = training::train(&cfg, &ds, out_dir.as_deref(), |_| {}).map_err(to_py_err)?;
    let d = report_to_dict(py, &out.final_report)?;
    d.set_item("epochs", out.epoch_logs.len())?;
    Ok(d.into())
}

/// Evaluate a checkpoint on a dataset file.
#[pyfunction]
fn evaluate(py: Python<'_>, checkpoint: PathBuf, data_path: PathBuf) -> PyResult<Py<PyDict>> {
    let mut trainer = training::load_checkpoint(&checkpoint).map_err(to_py_err)?;
    let ds = data::load(&data_path).map_err(to_py_err)?;
    let (report, _) =
        training::evaluate_model(&trainer.model, &mut trainer.state, &ds).map_err(to_py_err)?;
    Ok(report_to_dict(py, &report)?.into())
}

/// Train one modality with the metric loss alone; returns
/// (separation_before, separation_after).
#[pyfunction]
#[pyo3(signature = (data_path, modality="z_i1", steps=200, config_toml=None, seed=None))]
fn metric_only_training(
    data_path: PathBuf,
    modality: &str,
    steps: usize,
    config_toml: Option<&str>,
    seed: Option<u64>,
) -> PyResult<(f64, f64)> {
    let cfg = config_from_toml(config_toml, seed)?;
    let ds = data::load(&data_path).map_err(to_py_err)?;
    let m = Modality::from_tag(modality).map_err(to_py_err)?;
    training::metric_only_training(&cfg, &ds, m, steps).map_err(to_py_err)
}

/// Finite-difference gradient check over random tiny model configurations;
/// returns the max relative error observed.
#[pyfunction]
#[pyo3(signature = (seed=13, samples=25))]
fn grad_check(seed: u64, samples: usize) -> PyResult<f64> {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.dims.d_raw = 6;
    cfg.dims.d_hidden = 5;
    cfg.dims.d_emb = 4;
    cfg.dims.k_img = 2;
    cfg.dims.k_txt = 2;
    cfg.fusion.d_c = 8;
    cfg.fusion.heads = 2;
    cfg.detector.hidden = 6;
    cfg.gen.n_samples = 8;
    cfg.gen.n_topics = 3;
    cfg.gen.d_raw = 6;
    cfg.gen.k_img = 2;
    cfg.gen.k_txt = 2;
    cfg.gen.seed = seed;
    let report = cromekit_core::model_gradcheck(&cfg, samples, 1e-6).map_err(to_py_err)?;
    Ok(report.max_rel_err)
}

/// The eight ablation variants as a list of (name, flags-dict) pairs.
#[pyfunction]
fn ablation_variants(py: Python<'_>) -> PyResult<Py<PyList>> {
    let list = PyList::empty(py);
    for (name, flags) in cromekit_core::detector::ablation_manifest() {
        let d = PyDict::new(py);
        d.set_item("name", name)?;
        d.set_item("no_image", flags.no_image)?;
        d.set_item("no_text", flags.no_text)?;
        d.set_item("no_blip", flags.no_blip)?;
        d.set_item("no_blip_joint", flags.no_blip_joint)?;
        d.set_item("no_cm", flags.no_cm)?;
        d.set_item("no_mt", flags.no_mt)?;
        d.set_item("no_tt", flags.no_tt)?;
        list.append(d)?;
    }
    Ok(list.into())
}

/// The default configuration as a TOML string.
#[pyfunction]
fn default_config() -> String {
    RunConfig::default().to_toml_string()
}

#[pyfunction]
fn version() -> &'static str {
    env!("CARGO_PKG_VERSION")
}

#[pymodule]
fn cromekit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(matmul, m)?)?;
    m.add_function(wrap_pyfunction!(softmax_rows, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_sim, m)?)?;
    m.add_function(wrap_pyfunction!(proxy_anchor_loss, m)?)?;
    m.add_function(wrap_pyfunction!(modality_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(gen_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(dataset_info, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(metric_only_training, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(ablation_variants, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(version, m)?)?;
    Ok(())
}
