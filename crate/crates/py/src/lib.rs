//! Python bindings: `import glassgnn_py`.
//!
//! Structured results (provenance, trace steps, descriptors) cross the
//! boundary as plain dicts and lists decoded from their JSON form.

use std::path::PathBuf;

use glassgnn::dataset::{self, Selector};
use glassgnn::model::{self, PredictOptions};
use glassgnn::trace::Symbol;
use glassgnn::{Labels, Target, Task};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyModule;

create_exception!(glassgnn_py, GlassGnnError, PyException, "Engine error; `args` is `(name, detail)`.");

fn err(e: glassgnn::Error) -> PyErr {
    GlassGnnError::new_err((e.name(), e.to_string()))
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).expect("serializable");
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: serde::de::DeserializeOwned>(py: Python<'_>, value: &Bound<'_, PyAny>, what: &str) -> PyResult<T> {
    let text: String = py.import("json")?.call_method1("dumps", (value,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| GlassGnnError::new_err(("SchemaError", format!("{what}: {e}"))))
}

/// An undirected graph with a dense node feature matrix.
#[pyclass(name = "Graph", module = "glassgnn_py", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyGraph {
    inner: glassgnn::Graph,
}

#[pymethods]
impl PyGraph {
    #[new]
    #[pyo3(signature = (features, edges, node_labels=None, graph_label=None))]
    fn new(
        features: Vec<Vec<f32>>,
        edges: Vec<(usize, usize)>,
        node_labels: Option<Vec<usize>>,
        graph_label: Option<usize>,
    ) -> PyResult<Self> {
        let labels = Labels {
            node: node_labels,
            graph: graph_label,
        };
        let inner = glassgnn::Graph::build(features, &edges, labels).map_err(err)?;
        Ok(Self { inner })
    }

    /// Parses the graph upload JSON format.
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = dataset::parse_graph_json(text.as_bytes()).map_err(err)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> String {
        String::from_utf8(dataset::graph_to_json(&self.inner)).expect("utf-8 JSON")
    }

    #[getter]
    fn node_count(&self) -> usize {
        self.inner.node_count()
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.inner.feature_dim()
    }

    #[getter]
    fn edges(&self) -> Vec<(usize, usize)> {
        self.inner.edges().to_vec()
    }

    #[getter]
    fn node_ids(&self) -> Vec<String> {
        self.inner.node_ids().to_vec()
    }

    #[getter]
    fn features(&self) -> Vec<Vec<f32>> {
        self.inner.features().to_rows()
    }

    fn neighbors(&self, node: usize) -> PyResult<Vec<usize>> {
        self.inner.neighbors(node).map(<[usize]>::to_vec).map_err(err)
    }

    fn gcn_coefficient(&self, i: usize, j: usize) -> PyResult<f64> {
        self.inner.gcn_coefficient(i, j).map_err(err)
    }

    /// Returns the induced subgraph and, for each of its nodes, the original index.
    fn k_hop_subgraph(&self, seeds: Vec<usize>, k: usize) -> PyResult<(PyGraph, Vec<usize>)> {
        let (g, map) = self.inner.k_hop_subgraph(&seeds, k).map_err(err)?;
        Ok((PyGraph { inner: g }, map.new_to_old))
    }

    fn __repr__(&self) -> String {
        format!(
            "Graph(nodes={}, edges={}, feature_dim={})",
            self.inner.node_count(),
            self.inner.edges().len(),
            self.inner.feature_dim()
        )
    }
}

/// A bundled dataset: one graph or a collection of graphs.
#[pyclass(name = "Dataset", module = "glassgnn_py", frozen)]
pub struct PyDataset {
    inner: dataset::Dataset,
}

#[pymethods]
impl PyDataset {
    #[getter]
    fn id(&self) -> &str {
        self.inner.id()
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.inner.descriptor.class_names.clone()
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.inner.descriptor.feature_dim
    }

    fn descriptor<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.descriptor)
    }

    fn graph(&self, index: usize) -> PyResult<PyGraph> {
        self.inner
            .graphs
            .get(index)
            .map(|g| PyGraph { inner: g.clone() })
            .ok_or_else(|| err(glassgnn::Error::InvalidSelector(format!("graph index {index} out of range"))))
    }

    fn __len__(&self) -> usize {
        self.inner.graphs.len()
    }
}

/// A weight-bound model ready for inference.
#[pyclass(name = "Model", module = "glassgnn_py", frozen)]
pub struct PyModel {
    inner: model::Model,
}

fn parse_target(task: Task, node: Option<usize>, edge: Option<(usize, usize)>) -> PyResult<Target> {
    match (task, node, edge) {
        (Task::GraphClassification, None, None) => Ok(Target::Graph),
        (Task::NodeClassification, Some(node), None) => Ok(Target::Node { node }),
        (Task::LinkPrediction, None, Some((a, b))) => Ok(Target::Link { pair: [a, b] }),
        (task, ..) => Err(err(glassgnn::Error::InvalidTarget(format!(
            "{task} takes {}",
            match task {
                Task::GraphClassification => "neither node nor edge",
                Task::NodeClassification => "node=",
                Task::LinkPrediction => "edge=(a, b)",
            }
        )))),
    }
}

#[pymethods]
impl PyModel {
    /// Loads and validates a weight bundle JSON file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let bundle = model::load_weight_bundle_file(&path).map_err(err)?;
        Ok(Self {
            inner: model::Model::from_bundle(&bundle).map_err(err)?,
        })
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.spec().variant.to_string()
    }

    #[getter]
    fn task(&self) -> String {
        self.inner.spec().task.to_string()
    }

    #[getter]
    fn dataset_id(&self) -> &str {
        self.inner.dataset_id()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.spec().input_dim()
    }

    #[getter]
    fn layer_count(&self) -> usize {
        self.inner.layer_count()
    }

    /// Runs one traced prediction. Pass `node=` for node tasks and
    /// `edge=(a, b)` for link tasks.
    #[pyo3(signature = (graph, node=None, edge=None, seed=0))]
    fn predict(
        &self,
        py: Python<'_>,
        graph: &PyGraph,
        node: Option<usize>,
        edge: Option<(usize, usize)>,
        seed: u64,
    ) -> PyResult<(PyPrediction, PyTrace)> {
        let target = parse_target(self.inner.spec().task, node, edge)?;
        let (p, t) = py
            .detach(|| model::predict(&self.inner, &graph.inner, &target, &PredictOptions::with_seed(seed)))
            .map_err(err)?;
        Ok((PyPrediction { inner: p }, PyTrace { inner: t }))
    }

    fn __repr__(&self) -> String {
        let s = self.inner.spec();
        format!("Model({} {} on {})", s.variant, s.task, self.inner.dataset_id())
    }
}

#[pyclass(name = "Prediction", module = "glassgnn_py", frozen)]
pub struct PyPrediction {
    inner: model::Prediction,
}

#[pymethods]
impl PyPrediction {
    #[getter]
    fn task(&self) -> String {
        self.inner.task.to_string()
    }

    #[getter]
    fn target<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.target)
    }

    #[getter]
    fn logits(&self) -> Vec<f32> {
        self.inner.logits.clone()
    }

    #[getter]
    fn probabilities(&self) -> Vec<f64> {
        self.inner.probabilities.clone()
    }

    #[getter]
    fn predicted_class(&self) -> usize {
        self.inner.predicted_class
    }

    #[getter]
    fn trace_id(&self) -> &str {
        &self.inner.trace_id
    }

    #[getter]
    fn processed_node_count(&self) -> usize {
        self.inner.processed_node_count
    }

    fn __repr__(&self) -> String {
        format!(
            "Prediction(class={}, probabilities={:?}, trace_id={})",
            self.inner.predicted_class, self.inner.probabilities, self.inner.trace_id
        )
    }
}

/// The recorded computation of one prediction.
#[pyclass(name = "Trace", module = "glassgnn_py", frozen)]
pub struct PyTrace {
    inner: glassgnn::Trace,
}

fn parse_symbol(name: &str) -> PyResult<Symbol> {
    serde_json::from_value(serde_json::Value::String(name.to_string()))
        .map_err(|_| GlassGnnError::new_err(("UnknownSymbol", format!("no formula symbol {name:?}"))))
}

#[pymethods]
impl PyTrace {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: glassgnn::Trace::from_json(text.as_bytes()).map_err(err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        let bytes = self.inner.to_json().map_err(err)?;
        Ok(String::from_utf8(bytes).expect("utf-8 JSON"))
    }

    #[getter]
    fn trace_id(&self) -> &str {
        &self.inner.trace_id
    }

    #[getter]
    fn step_count(&self) -> usize {
        self.inner.step_count()
    }

    #[getter]
    fn node_count(&self) -> usize {
        self.inner.node_count()
    }

    #[getter]
    fn layer_names(&self) -> Vec<String> {
        self.inner.layers.iter().map(|l| l.name.clone()).collect()
    }

    fn final_logits(&self) -> PyResult<Vec<f32>> {
        self.inner.final_logits().map(<[f32]>::to_vec).map_err(err)
    }

    fn step<'py>(&self, py: Python<'py>, step_id: u32) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, self.inner.step(step_id).map_err(err)?)
    }

    /// Step ids in `layer` tagged with a formula symbol such as `"alpha"`.
    fn symbol_lookup(&self, layer: usize, symbol: &str) -> PyResult<Vec<u32>> {
        self.inner.symbol_lookup(layer, parse_symbol(symbol)?).map_err(err)
    }

    /// Neighborhood members of `node` in `layer` and their coefficients.
    fn neighborhood_highlight(&self, layer: usize, node: usize) -> PyResult<(Vec<usize>, Vec<f32>)> {
        self.inner.neighborhood_highlight(layer, node).map_err(err)
    }

    fn cell_provenance<'py>(&self, py: Python<'py>, step_id: u32, cell: usize) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.cell_provenance(step_id, cell).map_err(err)?)
    }

    /// Recomputes a cell from its provenance terms.
    fn recompute_cell(&self, step_id: u32, cell: usize) -> PyResult<f64> {
        let p = self.inner.cell_provenance(step_id, cell).map_err(err)?;
        p.recompute(&self.inner).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Trace({}, {} steps)", self.inner.trace_id, self.inner.step_count())
    }
}

#[pyfunction]
fn load_dataset(dir: PathBuf, id: &str) -> PyResult<PyDataset> {
    Ok(PyDataset {
        inner: dataset::load_dataset(&dir, id).map_err(err)?,
    })
}

/// Shipped weight bundles as `{variant, task, dataset, bundle_path}` dicts.
#[pyfunction]
fn list_models<'py>(py: Python<'py>, dir: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &model::list_models(&dir).map_err(err)?)
}

/// Resolves a selector such as `{"graph_index": 0}`, `{"node": 5}` or
/// `{"edge": [a, b]}` and runs `model` on it.
#[pyfunction]
#[pyo3(signature = (model, dataset, selector, seed=0))]
fn predict(
    py: Python<'_>,
    model: &PyModel,
    dataset: &PyDataset,
    selector: &Bound<'_, PyAny>,
    seed: u64,
) -> PyResult<(PyPrediction, PyTrace)> {
    let selector: Selector = from_py(py, selector, "selector")?;
    let task = model.inner.spec().task;
    let (g, target) = dataset::select_inference_target(&dataset.inner, task, selector).map_err(err)?;
    let (p, t) = py
        .detach(|| model::predict(&model.inner, g, &target, &PredictOptions::with_seed(seed)))
        .map_err(err)?;
    Ok((PyPrediction { inner: p }, PyTrace { inner: t }))
}

#[pymodule]
fn glassgnn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("GlassGnnError", m.py().get_type::<GlassGnnError>())?;
    m.add_class::<PyGraph>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyPrediction>()?;
    m.add_class::<PyTrace>()?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(list_models, m)?)?;
    m.add_function(wrap_pyfunction!(predict, m)?)?;
    Ok(())
}
