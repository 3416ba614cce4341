//! Python bindings: configuration, synthetic data, training, evaluation and
//! a few of the loss and clustering primitives.
//!
//! Model state holds reference-counted tensors, so [`Model`] is unsendable and
//! must stay on the thread that created it.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use rumor_adapt::checkpoint;
use rumor_adapt::config::RunConfig;
use rumor_adapt::contrastive::{supcon_in_domain, ContrastiveConfig};
use rumor_adapt::data::{load_dataset, write_dataset, Domain, PropagationTree};
use rumor_adapt::experiment::{ablation_variants, synthetic_data};
use rumor_adapt::gradcheck::model_suite;
use rumor_adapt::pseudo::{kmeans_assign, KMeansConfig};
use rumor_adapt::synth::{generate, manifest, self_test};
use rumor_adapt::trainer::{embedding_table, evaluate, prepare_samples, train, EvalReport, Sample, TrainState};
use rumor_adapt::{Error, Tensor};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Config(_) | Error::Parse { .. } | Error::Format { .. } | Error::Validation { .. } | Error::Contract(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Run configuration. Keys are the same as in config files and `--set`.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (**overrides))]
    fn new(overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut inner = RunConfig::default();
        if let Some(kw) = overrides {
            for (k, v) in kw.iter() {
                let key: String = k.extract()?;
                inner.set(&key, &v.str()?.to_string().to_lowercase()).map_err(to_py)?;
            }
        }
        inner.validate().map_err(to_py)?;
        Ok(PyConfig { inner })
    }

    /// Parses `key = value` text, as written by `to_text`.
    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        Ok(PyConfig {
            inner: RunConfig::parse_str(text).map_err(to_py)?,
        })
    }

    /// Sets one key, then re-checks every constraint.
    fn set(&mut self, key: &str, value: &Bound<'_, PyAny>) -> PyResult<()> {
        let mut next = self.inner.clone();
        next.set(key, &value.str()?.to_string().to_lowercase()).map_err(to_py)?;
        next.validate().map_err(to_py)?;
        self.inner = next;
        Ok(())
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner
            .entries()
            .into_iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v)
            .ok_or_else(|| PyValueError::new_err(format!("unknown config key {key:?}")))
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        for (k, v) in self.inner.entries() {
            d.set_item(k, v)?;
        }
        Ok(d)
    }

    fn __repr__(&self) -> String {
        let t = &self.inner.train;
        format!(
            "Config(dim={}, heads={}, epochs={}, seed={}, gamma=({}, {}, {}))",
            t.model.dim, t.model.heads, t.epochs, t.seed, t.weights.ce, t.weights.contrastive, t.weights.consistency
        )
    }
}

fn report_dict<'py>(py: Python<'py>, report: &EvalReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("accuracy", report.accuracy)?;
    d.set_item("f1", report.f1.clone())?;
    d.set_item("labeled", report.labeled)?;
    let preds: Vec<(String, usize, Vec<f64>)> = report
        .predictions
        .iter()
        .map(|p| (p.id.clone(), p.label, p.probs.clone()))
        .collect();
    d.set_item("predictions", preds)?;
    Ok(d)
}

fn load_samples(cfg: &RunConfig, paths: &[(&PathBuf, Domain)]) -> PyResult<Vec<Vec<Sample>>> {
    let trees: Vec<Vec<PropagationTree>> = paths
        .iter()
        .map(|(p, d)| load_dataset(p, *d))
        .collect::<Result<_, _>>()
        .map_err(to_py)?;
    let all: Vec<&PropagationTree> = trees.iter().flatten().collect();
    let table = embedding_table(cfg, &all).map_err(to_py)?;
    trees
        .iter()
        .map(|t| prepare_samples(t, &table, cfg.train.max_paths).map_err(to_py))
        .collect()
}

/// A trained (or freshly initialized) model with its optimizer state and
/// per-step loss history.
#[pyclass(unsendable)]
struct Model {
    config: RunConfig,
    state: TrainState,
}

#[pymethods]
impl Model {
    #[new]
    fn new(config: &PyConfig) -> PyResult<Self> {
        Ok(Model {
            config: config.inner.clone(),
            state: TrainState::new(&config.inner.train).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (config, state) = checkpoint::load(&path).map_err(to_py)?;
        Ok(Model { config, state })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&path, &self.config, &self.state).map_err(to_py)
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig {
            inner: self.config.clone(),
        }
    }

    #[getter]
    fn step(&self) -> u64 {
        self.state.step
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.state.epoch
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.state.params.parameter_count()
    }

    /// `(pseudo_label_calls, cam_calls)`.
    #[getter]
    fn counters(&self) -> (u64, u64) {
        (self.state.counters.pseudo_label_calls, self.state.counters.cam_calls)
    }

    /// One dict per optimizer step with every loss component.
    fn history<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.state
            .history
            .iter()
            .map(|r| {
                let d = PyDict::new(py);
                for (k, v) in [
                    ("ce", r.ce),
                    ("source_scl", r.source_scl),
                    ("target_scl", r.target_scl),
                    ("in_domain", r.in_domain),
                    ("target_to_source", r.target_to_source),
                    ("source_to_target", r.source_to_target),
                    ("prototype", r.prototype),
                    ("cross_domain", r.cross_domain),
                    ("contrastive", r.contrastive),
                    ("consistency", r.consistency),
                    ("total", r.total),
                    ("grad_norm", r.grad_norm),
                ] {
                    d.set_item(k, v)?;
                }
                d.set_item("step", r.step)?;
                d.set_item("epoch", r.epoch)?;
                d.set_item("pairs", r.pairs)?;
                d.set_item("pseudo_acc", r.pseudo_acc)?;
                Ok(d)
            })
            .collect()
    }

    /// Trains up to the configured epoch count on two dataset files.
    fn fit(&mut self, source: PathBuf, target: PathBuf) -> PyResult<()> {
        let mut sets = load_samples(&self.config, &[(&source, Domain::Source), (&target, Domain::Target)])?;
        let tgt = sets.pop().unwrap();
        let src = sets.pop().unwrap();
        self.run(&src, &tgt)
    }

    /// Trains on the configuration's synthetic domain pair and returns the
    /// target evaluation.
    fn fit_synthetic<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let data = synthetic_data(&self.config).map_err(to_py)?;
        self.run(&data.source, &data.target)?;
        report_dict(py, &evaluate(&self.state.params, &data.target).map_err(to_py)?)
    }

    fn evaluate<'py>(&self, py: Python<'py>, target: PathBuf) -> PyResult<Bound<'py, PyDict>> {
        let samples = load_samples(&self.config, &[(&target, Domain::Target)])?.pop().unwrap();
        report_dict(py, &evaluate(&self.state.params, &samples).map_err(to_py)?)
    }

    /// Rumor embeddings for every tree of a dataset file.
    fn embed(&self, path: PathBuf) -> PyResult<Vec<Vec<f64>>> {
        let samples = load_samples(&self.config, &[(&path, Domain::Target)])?.pop().unwrap();
        let sets: Vec<_> = samples.iter().map(|s| &s.pathset).collect();
        self.state.params.embed(&sets).map_err(to_py)
    }
}

impl Model {
    fn run(&mut self, source: &[Sample], target: &[Sample]) -> PyResult<()> {
        let state = std::mem::replace(&mut self.state, TrainState::new(&self.config.train).map_err(to_py)?);
        self.state = train(source, target, &self.config.train, state, &mut ()).map_err(to_py)?;
        Ok(())
    }
}

/// Writes `source.jsonl`, `target.jsonl` and `manifest.txt` and returns the
/// generator's nearest-centroid self-test.
#[pyfunction]
fn synth<'py>(py: Python<'py>, config: &PyConfig, out: PathBuf) -> PyResult<Bound<'py, PyDict>> {
    let cfg = &config.inner.synth;
    let (source, target) = generate(cfg).map_err(to_py)?;
    std::fs::create_dir_all(&out).map_err(|e| PyIOError::new_err(format!("{}: {e}", out.display())))?;
    write_dataset(&out.join("source.jsonl"), &source).map_err(to_py)?;
    write_dataset(&out.join("target.jsonl"), &target).map_err(to_py)?;
    std::fs::write(out.join("manifest.txt"), manifest(cfg, &source, &target))
        .map_err(|e| PyIOError::new_err(e.to_string()))?;
    let st = self_test(cfg, &source, &target);
    let d = PyDict::new(py);
    d.set_item("source", source.len())?;
    d.set_item("target", target.len())?;
    d.set_item("stance_source", st.stance_source)?;
    d.set_item("stance_target", st.stance_target)?;
    d.set_item("full_target", st.full_target)?;
    Ok(d)
}

/// The three ablation configurations: `ce`, `ce+cl` and `full`.
#[pyfunction]
fn ablation(config: &PyConfig) -> Vec<(String, PyConfig)> {
    ablation_variants(&config.inner)
        .into_iter()
        .map(|(n, c)| (n.to_string(), PyConfig { inner: c }))
        .collect()
}

/// `(loss, group, max_rel_error, checked, tolerance, passed)` per row.
#[pyfunction]
#[pyo3(signature = (config=None))]
fn gradcheck(config: Option<&PyConfig>) -> PyResult<Vec<(String, String, f64, usize, f64, bool)>> {
    let base = config.map(|c| c.inner.clone()).unwrap_or_default();
    let entries = model_suite(&base).map_err(to_py)?;
    Ok(entries
        .into_iter()
        .map(|e| {
            let passed = e.passed();
            (e.loss.to_string(), e.group, e.max_rel_error, e.checked, e.tolerance, passed)
        })
        .collect())
}

/// In-domain supervised contrastive loss of a labeled feature batch.
#[pyfunction]
#[pyo3(signature = (features, labels, tau=0.1, include_self=false))]
fn supcon_loss(features: Vec<Vec<f64>>, labels: Vec<usize>, tau: f64, include_self: bool) -> PyResult<f64> {
    let cfg = ContrastiveConfig {
        tau,
        include_self,
        ..ContrastiveConfig::default()
    };
    cfg.validate().map_err(to_py)?;
    let f = Tensor::from_rows(&features).map_err(to_py)?;
    Ok(supcon_in_domain(&f, &labels, &cfg).map_err(to_py)?.item())
}

/// Lloyd k-means from the given centers (`None` marks a class that is never
/// assigned). Returns `(labels, iterations, converged)`.
#[pyfunction]
#[pyo3(signature = (features, centers, tol=1e-4, max_iter=100))]
fn kmeans(
    features: Vec<Vec<f64>>,
    centers: Vec<Option<Vec<f64>>>,
    tol: f64,
    max_iter: usize,
) -> PyResult<(Vec<usize>, usize, bool)> {
    let cfg = KMeansConfig {
        tol,
        max_iter,
        ..KMeansConfig::default()
    };
    let out = kmeans_assign(&features, &centers, &cfg).map_err(to_py)?;
    Ok((out.labels, out.iterations, out.converged))
}

#[pymodule]
#[pyo3(name = "rumor_adapt")]
fn rumor_adapt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(ablation, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(supcon_loss, m)?)?;
    m.add_function(wrap_pyfunction!(kmeans, m)?)?;
    Ok(())
}
