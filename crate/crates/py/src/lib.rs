//! Python bindings: datasets, the structure learner, training entry points
//! and the pivot operators.

use std::path::PathBuf;

use pivotgsl::autodiff::suites::run_suites;
use pivotgsl::data::{generate_synthetic, load_dataset, save_dataset, DatasetBundle, SplitSpec, SynthSpec};
use pivotgsl::experiment::{run_model, Model};
use pivotgsl::gnn::two_step_mp as two_step_mp_impl;
use pivotgsl::graph::{add_random_edges, delete_edges, homophily_ratio};
use pivotgsl::learner::{compute_gamma as compute_gamma_impl, LearnerParams};
use pivotgsl::train::{train_joint, train_sources as train_sources_impl, EpochTrace, TargetOutcome, TrainConfig};
use pivotgsl::Tensor;
use pyo3::exceptions::{PyTypeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

fn py_err(e: pivotgsl::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(py_err)
}

fn nested(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// Default config overridden by keyword arguments named like the config
/// fields (`pivots=64`, `encoder="mlp-layer"`, ...).
fn config(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<TrainConfig> {
    let mut value = serde_json::to_value(TrainConfig::default()).map_err(|e| PyValueError::new_err(e.to_string()))?;
    if let Some(kw) = kwargs {
        let map = value.as_object_mut().expect("config serializes to an object");
        for (k, v) in kw.iter() {
            let key: String = k.extract()?;
            if !map.contains_key(&key) {
                return Err(PyValueError::new_err(format!("unknown config key {key:?}")));
            }
            let json = if v.is_none() {
                serde_json::Value::Null
            } else if let Ok(b) = v.extract::<bool>() {
                b.into()
            } else if let Ok(i) = v.extract::<i64>() {
                i.into()
            } else if let Ok(f) = v.extract::<f64>() {
                f.into()
            } else if let Ok(s) = v.extract::<String>() {
                s.into()
            } else {
                return Err(PyTypeError::new_err(format!("unsupported value for {key}")));
            };
            map.insert(key, json);
        }
    }
    let cfg: TrainConfig = serde_json::from_value(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    cfg.validate().map_err(py_err)?;
    Ok(cfg)
}

/// A node-classification dataset with masks.
#[pyclass(name = "Dataset", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: DatasetBundle,
}

#[pymethods]
impl PyDataset {
    /// Reads a dataset directory (edges.tsv, features.tsv, labels.tsv, ...).
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset {
            inner: load_dataset(&path).map_err(py_err)?,
        })
    }

    /// Stochastic block model with Gaussian class-mean features.
    #[staticmethod]
    #[pyo3(signature = (n_nodes, n_classes, p_in, p_out, feature_dim, snr = 1.0, seed = 0))]
    fn synthetic(
        n_nodes: usize,
        n_classes: usize,
        p_in: f64,
        p_out: f64,
        feature_dim: usize,
        snr: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let spec = SynthSpec {
            n_nodes,
            n_classes,
            p_in,
            p_out,
            feature_dim,
            snr,
            seed,
        };
        Ok(PyDataset {
            inner: generate_synthetic(&spec).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_dataset(&self.inner, &path).map_err(py_err)
    }

    /// New dataset with masks drawn from `split` (`planetoid`, `ratio:a,b,c`,
    /// `per-class:k,valid,test`).
    #[pyo3(signature = (split, seed = 0))]
    fn with_splits(&self, split: &str, seed: u64) -> PyResult<Self> {
        let spec: SplitSpec = split.parse().map_err(py_err)?;
        Ok(PyDataset {
            inner: self.inner.clone().with_splits(spec, seed).map_err(py_err)?,
        })
    }

    /// Copy with `fraction` extra random edges.
    #[pyo3(signature = (fraction, seed = 0))]
    fn with_noise_edges(&self, fraction: f64, seed: u64) -> PyResult<Self> {
        let mut inner = self.inner.clone();
        inner.graph = add_random_edges(&inner.graph, fraction, seed).map_err(py_err)?;
        Ok(PyDataset { inner })
    }

    /// Copy with `fraction` of the edges removed.
    #[pyo3(signature = (fraction, seed = 0))]
    fn without_edges(&self, fraction: f64, seed: u64) -> PyResult<Self> {
        let mut inner = self.inner.clone();
        inner.graph = delete_edges(&inner.graph, fraction, seed).map_err(py_err)?;
        Ok(PyDataset { inner })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn n_nodes(&self) -> usize {
        self.inner.graph.n_nodes()
    }

    #[getter]
    fn n_edges(&self) -> usize {
        self.inner.graph.n_edges()
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.inner.graph.n_classes()
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.inner.graph.feature_dim()
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.graph.labels().to_vec()
    }

    #[getter]
    fn features(&self) -> Vec<Vec<f64>> {
        nested(self.inner.graph.features())
    }

    fn edges(&self) -> Vec<(usize, usize)> {
        self.inner.graph.edges()
    }

    fn content_hash(&self) -> String {
        self.inner.content_hash()
    }

    /// Class-adjusted homophily of the observed graph.
    fn homophily(&self) -> PyResult<f64> {
        homophily_ratio(&self.inner.graph, None).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset({:?}, nodes={}, edges={}, classes={})",
            self.inner.name,
            self.inner.graph.n_nodes(),
            self.inner.graph.n_edges(),
            self.inner.graph.n_classes()
        )
    }
}

/// Trained structure learner parameters.
#[pyclass(name = "Learner", skip_from_py_object)]
#[derive(Clone)]
struct PyLearner {
    inner: LearnerParams,
}

#[pymethods]
impl PyLearner {
    /// Fresh learner for a config given as keyword arguments.
    #[staticmethod]
    #[pyo3(signature = (**config))]
    fn init(config: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let cfg = self::config(config)?;
        Ok(PyLearner {
            inner: cfg.init_learner().map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: LearnerParams = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        inner.validate().map_err(py_err)?;
        Ok(PyLearner { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[getter]
    fn heads(&self) -> usize {
        self.inner.heads()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn threshold(&self) -> f64 {
        self.inner.threshold
    }

    #[getter]
    fn w1(&self) -> Vec<Vec<f64>> {
        nested(&self.inner.w1)
    }

    #[getter]
    fn w2(&self) -> Vec<Vec<f64>> {
        nested(&self.inner.w2)
    }

    fn __repr__(&self) -> String {
        format!("Learner(heads={}, dim={})", self.inner.heads(), self.inner.dim())
    }
}

fn trace_rows<'py>(py: Python<'py>, trace: &EpochTrace) -> PyResult<Bound<'py, PyList>> {
    let list = PyList::empty(py);
    for r in &trace.rows {
        let d = PyDict::new(py);
        d.set_item("epoch", r.epoch)?;
        d.set_item("iter", r.iter)?;
        d.set_item("L_s", r.l_s)?;
        d.set_item("L_r", r.l_r)?;
        d.set_item("L_e", r.l_e)?;
        d.set_item("val_acc", r.val_acc)?;
        d.set_item("homophily", r.homophily)?;
        d.set_item("gamma_delta", r.gamma_delta)?;
        list.append(d)?;
    }
    Ok(list)
}

fn outcome_dict<'py>(py: Python<'py>, out: &TargetOutcome, trace: &EpochTrace) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("test_acc", out.test_acc)?;
    d.set_item("best_val_acc", out.best_val_acc)?;
    d.set_item("best_epoch", out.best_epoch)?;
    d.set_item("epochs_run", out.epochs_run)?;
    d.set_item("wall_clock_s", out.wall_clock_s)?;
    d.set_item("trace", trace_rows(py, trace)?)?;
    Ok(d)
}

/// Trains the learner on the source datasets; returns `(learner, trace)`.
#[pyfunction]
#[pyo3(signature = (sources, **config))]
fn train_sources<'py>(
    py: Python<'py>,
    sources: Vec<PyRef<'py, PyDataset>>,
    config: Option<&Bound<'py, PyDict>>,
) -> PyResult<(PyLearner, Bound<'py, PyList>)> {
    let cfg = self::config(config)?;
    let graphs: Vec<_> = sources.iter().map(|s| &s.inner.graph).collect();
    let mut trace = EpochTrace::default();
    let out = train_sources_impl(&graphs, &cfg, &mut trace).map_err(py_err)?;
    Ok((PyLearner { inner: out.learner }, trace_rows(py, &trace)?))
}

/// Trains a GNN on `target` with the frozen learner; returns metrics.
#[pyfunction]
#[pyo3(signature = (target, learner, **config))]
fn transfer<'py>(
    py: Python<'py>,
    target: &PyDataset,
    learner: &PyLearner,
    config: Option<&Bound<'py, PyDict>>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = self::config(config)?;
    let mut trace = EpochTrace::default();
    let out = run_model(&target.inner.graph, Model::Transfer, Some(&learner.inner), &cfg, &mut trace).map_err(py_err)?;
    outcome_dict(py, &out, &trace)
}

/// Plain GCN on the observed graph; returns metrics.
#[pyfunction]
#[pyo3(signature = (target, **config))]
fn baseline<'py>(py: Python<'py>, target: &PyDataset, config: Option<&Bound<'py, PyDict>>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = self::config(config)?;
    let mut trace = EpochTrace::default();
    let out = run_model(&target.inner.graph, Model::Gcn, None, &cfg, &mut trace).map_err(py_err)?;
    outcome_dict(py, &out, &trace)
}

/// Learner and GNN trained together on one graph; returns `(learner, metrics)`.
#[pyfunction]
#[pyo3(signature = (dataset, **config))]
fn train_single<'py>(
    py: Python<'py>,
    dataset: &PyDataset,
    config: Option<&Bound<'py, PyDict>>,
) -> PyResult<(PyLearner, Bound<'py, PyDict>)> {
    let cfg = self::config(config)?;
    let mut trace = EpochTrace::default();
    let (learner, out) = train_joint(&dataset.inner.graph, &cfg, &mut trace).map_err(py_err)?;
    Ok((PyLearner { inner: learner }, outcome_dict(py, &out, &trace)?))
}

/// Node-pivot affinities `Γ` (`N x P`) for embeddings `z`.
#[pyfunction]
fn compute_gamma(z: Vec<Vec<f64>>, pivots: Vec<usize>, learner: &PyLearner) -> PyResult<Vec<Vec<f64>>> {
    let g = compute_gamma_impl(&tensor(z)?, &pivots, &learner.inner).map_err(py_err)?;
    Ok(nested(&g))
}

/// Node-to-pivot-to-node averaging of `z` over `gamma`.
#[pyfunction]
fn two_step_mp(z: Vec<Vec<f64>>, gamma: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let out = two_step_mp_impl(&tensor(z)?, &tensor(gamma)?).map_err(py_err)?;
    Ok(nested(&out))
}

/// Finite-difference checks of every differentiable op; maps suite name to
/// `(passed, max relative error)`.
#[pyfunction]
#[pyo3(signature = (fixtures = 20, seed = 0))]
fn gradcheck<'py>(py: Python<'py>, fixtures: usize, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for r in run_suites(fixtures, seed).map_err(py_err)? {
        d.set_item(r.name, (r.passed(), r.report.max_rel_error))?;
    }
    Ok(d)
}

#[pymodule]
#[pyo3(name = "pivotgsl")]
fn pivotgsl_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyLearner>()?;
    m.add_function(wrap_pyfunction!(train_sources, m)?)?;
    m.add_function(wrap_pyfunction!(transfer, m)?)?;
    m.add_function(wrap_pyfunction!(baseline, m)?)?;
    m.add_function(wrap_pyfunction!(train_single, m)?)?;
    m.add_function(wrap_pyfunction!(compute_gamma, m)?)?;
    m.add_function(wrap_pyfunction!(two_step_mp, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
