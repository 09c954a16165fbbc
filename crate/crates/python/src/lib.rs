use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict};
use serde_json::{Map, Value};

use ctxlink_core::cluster::{cluster_links, sweep_threshold, LinkageSet};
use ctxlink_core::data::{generate as generate_store, load_features, save_features, SyntheticSpec};
use ctxlink_core::graph::{build_knn as knn, FeatureStore, NeighborGraph};
use ctxlink_core::metrics::{evaluate as evaluate_partition, MetricsReport};
use ctxlink_core::model::{predict_all, LinkRow, ModelParameters, Variant};
use ctxlink_core::pipeline::{load_model, save_model};
use ctxlink_core::train::{train as train_model, TrainConfig};
use ctxlink_core::LinkError;

fn py_err(e: LinkError) -> PyErr {
    match e.exit_code() {
        1 => PyValueError::new_err(e.to_string()),
        2 => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Options given as keyword arguments, as a JSON object.
fn options_object(options: Option<&Bound<'_, PyDict>>) -> PyResult<Map<String, Value>> {
    let mut out = Map::new();
    let Some(options) = options else {
        return Ok(out);
    };
    for (key, value) in options.iter() {
        let key: String = key.extract()?;
        let json = if value.is_none() {
            Value::Null
        } else if value.is_instance_of::<PyBool>() {
            Value::Bool(value.extract()?)
        } else if let Ok(v) = value.extract::<u64>() {
            Value::from(v)
        } else if let Ok(v) = value.extract::<f64>() {
            Value::from(v)
        } else {
            Value::String(value.extract()?)
        };
        out.insert(key, json);
    }
    Ok(out)
}

fn from_options<T: serde::de::DeserializeOwned>(base: Value, options: Option<&Bound<'_, PyDict>>) -> PyResult<T> {
    let Value::Object(mut fields) = base else {
        unreachable!("configs serialize to objects")
    };
    fields.extend(options_object(options)?);
    serde_json::from_value(Value::Object(fields)).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn report_dict<'py>(py: Python<'py>, report: &MetricsReport) -> PyResult<Bound<'py, PyDict>> {
    let dict = PyDict::new(py);
    let Ok(Value::Object(fields)) = serde_json::to_value(report) else {
        unreachable!("reports serialize to objects")
    };
    for (k, v) in fields {
        match v.as_u64() {
            Some(n) => dict.set_item(k, n)?,
            None => dict.set_item(k, v.as_f64())?,
        }
    }
    Ok(dict)
}

fn linkage_set(links: Vec<(usize, usize, f32)>) -> PyResult<LinkageSet> {
    let rows = links
        .into_iter()
        .map(|(query, candidate, prob)| LinkRow { query, candidate, prob })
        .collect();
    LinkageSet::new(rows, 0.5).map_err(py_err)
}

/// Feature vectors, one row per sample, with optional identity labels.
#[pyclass(name = "FeatureStore", module = "ctxlink", frozen)]
struct PyFeatureStore(FeatureStore);

#[pymethods]
impl PyFeatureStore {
    /// Rows are L2-normalized on the way in.
    #[new]
    #[pyo3(signature = (rows, labels=None))]
    fn new(rows: Vec<Vec<f32>>, labels: Option<Vec<i64>>) -> PyResult<Self> {
        FeatureStore::from_rows(&rows, labels).map(Self).map_err(py_err)
    }

    #[staticmethod]
    #[pyo3(signature = (path, labels=None))]
    fn load(path: PathBuf, labels: Option<PathBuf>) -> PyResult<Self> {
        load_features(&path, labels.as_deref()).map(Self).map_err(py_err)
    }

    #[pyo3(signature = (path, labels=None))]
    fn save(&self, path: PathBuf, labels: Option<PathBuf>) -> PyResult<()> {
        save_features(&self.0, &path, labels.as_deref()).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    #[getter]
    fn labels(&self) -> Option<Vec<i64>> {
        self.0.labels().map(<[i64]>::to_vec)
    }

    fn row(&self, i: usize) -> PyResult<Vec<f32>> {
        if i >= self.0.len() {
            return Err(PyValueError::new_err(format!("row {i} out of range")));
        }
        Ok(self.0.row(i).to_vec())
    }
}

/// Nearest-neighbor lists: hop1 candidates and the hop2 context prefix.
#[pyclass(name = "NeighborGraph", module = "ctxlink", frozen)]
struct PyNeighborGraph(NeighborGraph);

#[pymethods]
impl PyNeighborGraph {
    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn hop1(&self) -> usize {
        self.0.hop1_size()
    }

    #[getter]
    fn hop2(&self) -> usize {
        self.0.hop2_size()
    }

    fn candidates(&self, node: usize) -> PyResult<Vec<usize>> {
        self.0.candidates_of(node).map_err(py_err)
    }

    fn context(&self, node: usize) -> PyResult<Vec<usize>> {
        self.0.context_of(node).map_err(py_err)
    }
}

/// A trained (or parameter-free naive) linkage model.
#[pyclass(name = "Model", module = "ctxlink", frozen)]
struct PyModel {
    model: ModelParameters,
    losses: Vec<f64>,
}

#[pymethods]
impl PyModel {
    /// The naive cosine baseline needs no training.
    #[staticmethod]
    fn naive(dim: usize) -> PyResult<Self> {
        let model = ModelParameters::from_store(Variant::Naive, Default::default(), dim).map_err(py_err)?;
        Ok(Self {
            model,
            losses: Vec::new(),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf, dim: usize) -> PyResult<Self> {
        let model = load_model(&path, dim).map_err(py_err)?;
        Ok(Self {
            model,
            losses: Vec::new(),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_model(&self.model, &path).map_err(py_err)
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.model.variant.name()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.model.config.dim
    }

    /// Mean training loss of every epoch.
    #[getter]
    fn losses(&self) -> Vec<f64> {
        self.losses.clone()
    }

    /// `(query, candidate, probability)` for every node and each of its
    /// hop1 candidates.
    fn predict(
        &self,
        py: Python<'_>,
        store: &PyFeatureStore,
        graph: &PyNeighborGraph,
    ) -> PyResult<Vec<(usize, usize, f32)>> {
        let rows = py
            .detach(|| predict_all(&self.model, &store.0, &graph.0))
            .map_err(py_err)?;
        Ok(rows.into_iter().map(|r| (r.query, r.candidate, r.prob)).collect())
    }
}

/// Draw labeled synthetic identity clusters. Keyword arguments override
/// the generator defaults (identities, samples_min, samples_max, dim,
/// sigma_clean, hard_fraction, sigma_hard, seed).
#[pyfunction]
#[pyo3(signature = (**options))]
fn generate(options: Option<&Bound<'_, PyDict>>) -> PyResult<PyFeatureStore> {
    let base = serde_json::to_value(SyntheticSpec::default()).expect("spec serializes");
    let spec: SyntheticSpec = from_options(base, options)?;
    generate_store(&spec).map(PyFeatureStore).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (store, hop1=20, hop2=5))]
fn build_knn(py: Python<'_>, store: &PyFeatureStore, hop1: usize, hop2: usize) -> PyResult<PyNeighborGraph> {
    py.detach(|| knn(&store.0, hop1, hop2))
        .map(PyNeighborGraph)
        .map_err(py_err)
}

/// Train a variant on a labeled store. Keyword arguments set training
/// options by name (epochs, batch_size, base_lr, dropout, ...).
#[pyfunction]
#[pyo3(signature = (store, graph, variant="full", **options))]
fn train(
    py: Python<'_>,
    store: &PyFeatureStore,
    graph: &PyNeighborGraph,
    variant: &str,
    options: Option<&Bound<'_, PyDict>>,
) -> PyResult<PyModel> {
    let variant: Variant = variant.parse().map_err(py_err)?;
    let base = serde_json::to_value(TrainConfig::default()).expect("config serializes");
    let cfg: TrainConfig = from_options(base, options)?;
    let outcome = py
        .detach(|| train_model(&store.0, &graph.0, &cfg, variant))
        .map_err(py_err)?;
    Ok(PyModel {
        model: outcome.model,
        losses: outcome.trace.iter().map(|e| e.mean_loss).collect(),
    })
}

/// Cluster id of each of `n` nodes after keeping links with p > tau.
#[pyfunction]
fn cluster(links: Vec<(usize, usize, f32)>, n: usize, tau: f64) -> PyResult<Vec<usize>> {
    let links = linkage_set(links)?;
    let partition = cluster_links(n, &links, tau).map_err(py_err)?;
    Ok(partition.assignment().to_vec())
}

/// Pairwise, BCubed and NMI scores of a cluster assignment. Instances with
/// a negative label are left out.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, assignment: Vec<usize>, labels: Vec<i64>) -> PyResult<Bound<'py, PyDict>> {
    let partition = ctxlink_core::cluster::ClusterPartition::from_labels(&assignment);
    let report = evaluate_partition(&partition, &labels).map_err(py_err)?;
    report_dict(py, &report)
}

/// `(tau, scores)` for each threshold in `grid`.
#[pyfunction]
fn sweep<'py>(
    py: Python<'py>,
    links: Vec<(usize, usize, f32)>,
    labels: Vec<i64>,
    grid: Vec<f64>,
) -> PyResult<Vec<(f64, Bound<'py, PyDict>)>> {
    let links = linkage_set(links)?;
    let result = sweep_threshold(&links, &labels, &grid).map_err(py_err)?;
    result
        .rows
        .iter()
        .map(|r| Ok((r.threshold, report_dict(py, &r.report)?)))
        .collect()
}

#[pymodule]
fn ctxlink(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFeatureStore>()?;
    m.add_class::<PyNeighborGraph>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(build_knn, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(cluster, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    Ok(())
}
