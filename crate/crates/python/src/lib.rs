//! Python bindings: datasets, models, training, prediction, and metrics.
//!
//! Features are passed as lists of float rows and labels as 0/1 integers, so nothing beyond
//! the standard library is needed on the Python side.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use covid_da::datasets::{self, DomainDataset, PoolCounts, SyntheticConfig};
use covid_da::experiment::{self, ExperimentConfig};
use covid_da::inference;
use covid_da::losses::{DiversityMeasure, DomainMeasure};
use covid_da::metrics::{self, ConfusionCounts, MetricsReport};
use covid_da::networks::{ArchSpec, ModelBundle};
use covid_da::trainer::{self, Method, TrainConfig, TrainLog};
use covid_da::Error;

fn to_py(e: Error) -> PyErr {
    let msg = format!("[{}] {e}", e.kind());
    match e.kind() {
        "io" => PyIOError::new_err(msg),
        "non_finite_loss" | "plot" => PyRuntimeError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

fn parse<T: serde::de::DeserializeOwned>(what: &str, s: &str) -> PyResult<T> {
    toml::from_str(&format!("v = {s:?}"))
        .ok()
        .and_then(|t: toml::Table| t.get("v").cloned())
        .and_then(|v| v.try_into().ok())
        .ok_or_else(|| PyValueError::new_err(format!("unknown {what}: {s}")))
}

/// A source pool, labeled and unlabeled target pools, and a labeled target test pool.
#[pyclass(name = "Dataset", module = "covid_da_py", frozen)]
struct PyDataset {
    inner: DomainDataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset {
            inner: datasets::load_manifest(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        datasets::save_manifest(&self.inner, path).map_err(to_py)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim
    }

    #[getter]
    fn n_source(&self) -> usize {
        self.inner.n_source()
    }

    #[getter]
    fn n_target_labeled(&self) -> usize {
        self.inner.n_target_labeled()
    }

    #[getter]
    fn n_target_unlabeled(&self) -> usize {
        self.inner.n_target_unlabeled()
    }

    #[getter]
    fn n_test(&self) -> usize {
        self.inner.target_test.len()
    }

    fn test_features(&self) -> Vec<Vec<f64>> {
        self.inner.target_test.iter().map(|e| e.features.clone()).collect()
    }

    fn test_labels(&self) -> Vec<u8> {
        trainer::label_vector(&self.inner.target_test)
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(dim={}, source={}, target_labeled={}, target_unlabeled={}, test={})",
            self.inner.dim,
            self.n_source(),
            self.n_target_labeled(),
            self.n_target_unlabeled(),
            self.n_test()
        )
    }
}

/// Draws the synthetic benchmark. `config_toml` overrides every other argument.
#[pyfunction]
#[pyo3(signature = (seed=0, scale=0.1, labeled_fraction=0.3, config_toml=None))]
fn generate_synthetic(seed: u64, scale: f64, labeled_fraction: f64, config_toml: Option<&str>) -> PyResult<PyDataset> {
    let cfg = match config_toml {
        Some(text) => toml::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => SyntheticConfig {
            seed,
            labeled_fraction,
            counts: PoolCounts::REFERENCE.scaled(scale),
            ..SyntheticConfig::default()
        },
    };
    Ok(PyDataset {
        inner: datasets::generate_synthetic(&cfg).map_err(to_py)?,
    })
}

/// Feature extractor, shared and domain-specific heads, and both discriminators.
#[pyclass(name = "Model", module = "covid_da_py", frozen)]
struct PyModel {
    inner: ModelBundle,
    log: TrainLog,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (input_dim=2, widths=vec![64, 64], discriminator_hidden=64, seed=0))]
    fn new(input_dim: usize, widths: Vec<usize>, discriminator_hidden: usize, seed: u64) -> PyResult<Self> {
        let arch = ArchSpec {
            input_dim,
            extractor_widths: widths,
            discriminator_hidden,
            ..ArchSpec::default()
        };
        Ok(PyModel {
            inner: ModelBundle::new(arch, seed).map_err(to_py)?,
            log: TrainLog::default(),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, log) = trainer::load_checkpoint(path).map_err(to_py)?;
        Ok(PyModel { inner, log })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        trainer::save_checkpoint(&self.inner, &self.log, path).map_err(to_py)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    /// Per-step composite objective of the training run that produced this model.
    #[getter]
    fn step_losses(&self) -> Vec<f64> {
        self.log.steps.iter().map(|s| s.losses.total).collect()
    }

    #[getter]
    fn epoch_losses(&self) -> Vec<f64> {
        self.log.epoch_mean_losses()
    }

    /// Positive-class scores for target-domain inputs.
    fn predict(&self, features: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let preds = inference::predict_target_batch(&self.inner, features.iter().map(Vec::as_slice)).map_err(to_py)?;
        Ok(preds.iter().map(|p| p.positive_score).collect())
    }

    /// Hard 0/1 labels for target-domain inputs.
    fn predict_labels(&self, features: Vec<Vec<f64>>) -> PyResult<Vec<u8>> {
        let preds = inference::predict_target_batch(&self.inner, features.iter().map(Vec::as_slice)).map_err(to_py)?;
        Ok(preds.iter().map(|p| p.hard_label.index() as u8).collect())
    }

    /// Balanced accuracy of the feature discriminator on the source pool vs the test pool.
    fn domain_accuracy(&self, dataset: &PyDataset) -> PyResult<f64> {
        let ds = &dataset.inner;
        trainer::feature_discriminator_accuracy(&self.inner, &ds.source_train, &ds.target_test).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(input_dim={}, widths={:?}, parameters={}, steps_trained={})",
            self.inner.input_dim(),
            self.inner.arch.extractor_widths,
            self.inner.num_parameters(),
            self.log.steps.len()
        )
    }
}

/// Trains a copy of `model` with one of the five methods and returns the trained model.
#[pyfunction]
#[pyo3(signature = (
    method, dataset, model, epochs=30, learning_rate=0.001, batch_size=16, seed=0,
    alpha=None, beta=None, gamma=None, domain_measure=None, diversity_measure=None,
))]
#[allow(clippy::too_many_arguments)]
fn train(
    method: &str,
    dataset: &PyDataset,
    model: &PyModel,
    epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    seed: u64,
    alpha: Option<f64>,
    beta: Option<f64>,
    gamma: Option<f64>,
    domain_measure: Option<&str>,
    diversity_measure: Option<&str>,
) -> PyResult<PyModel> {
    let method: Method = parse("method", method)?;
    let mut cfg = TrainConfig {
        epochs,
        learning_rate,
        batch_size,
        seed,
        eval_each_epoch: false,
        ..TrainConfig::default()
    };
    if let Some(a) = alpha {
        cfg.loss.alpha = a;
    }
    if let Some(b) = beta {
        cfg.loss.beta = b;
    }
    if let Some(g) = gamma {
        cfg.loss.gamma = g;
    }
    if let Some(m) = domain_measure {
        cfg.loss.domain_measure = parse::<DomainMeasure>("domain measure", m)?;
    }
    if let Some(m) = diversity_measure {
        cfg.loss.diversity_measure = parse::<DiversityMeasure>("diversity measure", m)?;
    }
    let (inner, log) = trainer::run_method(method, &dataset.inner, model.inner.clone(), &cfg).map_err(to_py)?;
    Ok(PyModel { inner, log })
}

fn report_dict<'py>(py: Python<'py>, r: &MetricsReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("f1", r.f1)?;
    d.set_item("recall", r.recall)?;
    d.set_item("precision", r.precision)?;
    d.set_item("auc", r.auc)?;
    d.set_item("sum", r.sum)?;
    d.set_item("cost", r.cost)?;
    d.set_item("specificity", r.specificity)?;
    d.set_item("true_pos", r.counts.true_pos)?;
    d.set_item("false_pos", r.counts.false_pos)?;
    d.set_item("true_neg", r.counts.true_neg)?;
    d.set_item("false_neg", r.counts.false_neg)?;
    Ok(d)
}

/// Scores `model` on the dataset's labeled target test pool.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, model: &PyModel, dataset: &PyDataset) -> PyResult<Bound<'py, PyDict>> {
    let r = metrics::evaluate(&model.inner, &dataset.inner.target_test).map_err(to_py)?;
    report_dict(py, &r)
}

#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    metrics::auc(&scores, &labels).map_err(to_py)
}

/// `(true_pos, false_pos, true_neg, false_neg)` for 0/1 predictions.
#[pyfunction]
fn confusion(predicted: Vec<u8>, labels: Vec<u8>) -> PyResult<(u64, u64, u64, u64)> {
    let c = metrics::confusion(&predicted, &labels).map_err(to_py)?;
    Ok((c.true_pos, c.false_pos, c.true_neg, c.false_neg))
}

/// All metrics for given scores and labels, thresholding at 0.5.
#[pyfunction]
fn score<'py>(py: Python<'py>, scores: Vec<f64>, labels: Vec<u8>) -> PyResult<Bound<'py, PyDict>> {
    let predicted: Vec<u8> = scores.iter().map(|&s| u8::from(s > 0.5)).collect();
    let counts: ConfusionCounts = metrics::confusion(&predicted, &labels).map_err(to_py)?;
    let a = metrics::auc(&scores, &labels).map_err(to_py)?;
    report_dict(py, &MetricsReport::from_counts(counts, a))
}

/// Recomputes Sum and Cost for the embedded reference rows; one dict per row.
#[pyfunction]
fn verify_tables<'py>(py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
    experiment::verify_reference_tables()
        .checks
        .iter()
        .map(|c| {
            let d = PyDict::new(py);
            d.set_item("method", c.method)?;
            d.set_item("sum", c.sum)?;
            d.set_item("cost", c.cost)?;
            d.set_item("sum_residual", c.sum_residual)?;
            d.set_item("cost_residual", c.cost_residual)?;
            d.set_item("passed", c.passed)?;
            Ok(d)
        })
        .collect()
}

/// Runs an experiment config file and returns the rendered results table.
#[pyfunction]
#[pyo3(signature = (config_path, out=None, seeds=None))]
fn run_experiment(config_path: PathBuf, out: Option<PathBuf>, seeds: Option<Vec<u64>>) -> PyResult<String> {
    let mut cfg = ExperimentConfig::load(&config_path).map_err(to_py)?;
    if let Some(s) = seeds {
        cfg.seeds = s;
    }
    let table = experiment::run_experiment_in(&cfg, out.as_deref()).map_err(to_py)?;
    Ok(table.render())
}

#[pymodule]
fn covid_da_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(confusion, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(verify_tables, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add("METHODS", Method::ALL.map(Method::name).to_vec())?;
    Ok(())
}
