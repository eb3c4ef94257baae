//! Catalog, cached models and datasets, and the prediction routine shared by
//! the command line and the HTTP service.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use glassgnn::dataset::{
    self, parse_graph_json, select_inference_target, Dataset, DatasetDescriptor, DatasetKind, Selector,
};
use glassgnn::model::{self, list_models, load_weight_bundle_file, CatalogEntry, Model, PredictOptions};
use glassgnn::{Prediction, Task, Trace, Variant};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const DATA_DIR_ENV: &str = "GNN101_DATA_DIR";

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Core(#[from] glassgnn::Error),
    #[error("no bundled {variant} model for {task}{}", on_dataset(.dataset))]
    ModelNotFound {
        variant: Variant,
        task: Task,
        dataset: Option<String>,
    },
    #[error("trace {0} has been evicted from the cache")]
    TraceEvicted(String),
    #[error("no trace with id {0}")]
    UnknownTrace(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Startup(String),
}

fn on_dataset(d: &Option<String>) -> String {
    d.as_ref().map(|d| format!(" on {d}")).unwrap_or_default()
}

impl EngineError {
    pub fn name(&self) -> &'static str {
        match self {
            EngineError::Core(e) => e.name(),
            EngineError::ModelNotFound { .. } => "ModelNotFound",
            EngineError::TraceEvicted(_) => "TraceEvicted",
            EngineError::UnknownTrace(_) => "UnknownTrace",
            EngineError::BadRequest(_) => "BadRequest",
            EngineError::Startup(_) => "Startup",
        }
    }

    pub fn is_client_error(&self) -> bool {
        match self {
            EngineError::Core(e) => e.is_client_error(),
            EngineError::Startup(_) => false,
            _ => true,
        }
    }
}

pub type EngineResult<T> = Result<T, EngineError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EngineConfig {
    pub bundle_dir: PathBuf,
    pub dataset_dir: PathBuf,
    pub max_trace_nodes: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            bundle_dir: PathBuf::from("data/bundles"),
            dataset_dir: PathBuf::from("data/datasets"),
            max_trace_nodes: model::DEFAULT_MAX_TRACE_NODES,
        }
    }
}

/// One prediction request, as sent to the service or assembled from flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictRequest {
    pub model: Variant,
    #[serde(deserialize_with = "task_name")]
    pub task: Task,
    #[serde(default)]
    pub dataset: Option<String>,
    /// Uploaded graph, either inline JSON or a string holding it.
    #[serde(default)]
    pub graph_json: Option<Value>,
    #[serde(default)]
    pub target: Option<Selector>,
    #[serde(default)]
    pub seed: u64,
}

fn task_name<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Task, D::Error> {
    let s = String::deserialize(d)?;
    s.parse().map_err(serde::de::Error::custom)
}

pub struct PredictOutcome {
    pub prediction: Prediction,
    pub trace: Trace,
    /// Serialized trace; identical for identical requests.
    pub trace_json: Vec<u8>,
    pub class_names: Vec<String>,
}

/// Shared, immutable-after-load engine state.
pub struct Engine {
    config: EngineConfig,
    catalog: Vec<CatalogEntry>,
    models: Mutex<HashMap<PathBuf, Arc<Model>>>,
    datasets: Mutex<HashMap<String, Arc<Dataset>>>,
}

impl Engine {
    /// Checks the directories and reads the model catalog.
    pub fn open(config: EngineConfig) -> EngineResult<Self> {
        for (what, dir) in [("bundle_dir", &config.bundle_dir), ("dataset_dir", &config.dataset_dir)] {
            if !dir.is_dir() {
                return Err(EngineError::Startup(format!("{what} {} does not exist", dir.display())));
            }
        }
        let catalog = list_models(&config.bundle_dir)?;
        log::info!("{} models in {}", catalog.len(), config.bundle_dir.display());
        Ok(Self {
            config,
            catalog,
            models: Mutex::new(HashMap::new()),
            datasets: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn catalog(&self) -> &[CatalogEntry] {
        &self.catalog
    }

    pub fn dataset_descriptors(&self) -> EngineResult<Vec<DatasetDescriptor>> {
        dataset::DATASET_IDS
            .iter()
            .map(|id| Ok(self.dataset(id)?.descriptor.clone()))
            .collect()
    }

    pub fn dataset(&self, id: &str) -> EngineResult<Arc<Dataset>> {
        if let Some(ds) = self.datasets.lock().unwrap().get(id) {
            return Ok(ds.clone());
        }
        let ds = Arc::new(dataset::load_dataset(&self.config.dataset_dir, id)?);
        self.datasets.lock().unwrap().insert(id.to_string(), ds.clone());
        Ok(ds)
    }

    fn load_model(&self, entry: &CatalogEntry) -> EngineResult<Arc<Model>> {
        if let Some(m) = self.models.lock().unwrap().get(&entry.bundle_path) {
            return Ok(m.clone());
        }
        let m = Arc::new(Model::from_bundle(&load_weight_bundle_file(&entry.bundle_path)?)?);
        self.models.lock().unwrap().insert(entry.bundle_path.clone(), m.clone());
        Ok(m)
    }

    /// The shipped model for `(variant, task, dataset)`.
    pub fn model(&self, variant: Variant, task: Task, dataset: &str) -> EngineResult<Arc<Model>> {
        let entry = self
            .catalog
            .iter()
            .find(|e| e.variant == variant && e.task == task && e.dataset == dataset)
            .ok_or_else(|| EngineError::ModelNotFound {
                variant,
                task,
                dataset: Some(dataset.to_string()),
            })?;
        self.load_model(entry)
    }

    /// First shipped `(variant, task)` model whose input width is `dim`.
    fn model_for_dim(&self, variant: Variant, task: Task, dim: usize) -> EngineResult<Arc<Model>> {
        for entry in self.catalog.iter().filter(|e| e.variant == variant && e.task == task) {
            let m = self.load_model(entry)?;
            if m.spec().input_dim() == dim {
                return Ok(m);
            }
        }
        Err(EngineError::ModelNotFound {
            variant,
            task,
            dataset: None,
        })
    }

    pub fn predict(&self, req: &PredictRequest) -> EngineResult<PredictOutcome> {
        let uploaded = match &req.graph_json {
            None => None,
            Some(Value::String(text)) => Some(parse_graph_json(text.as_bytes())?),
            Some(doc) => Some(parse_graph_json(&serde_json::to_vec(doc).expect("re-serializing JSON"))?),
        };
        let (model, ds) = match (&req.dataset, uploaded) {
            (Some(id), None) => (self.model(req.model, req.task, id)?, self.dataset(id)?),
            (dataset, Some(g)) => {
                let model = match dataset {
                    Some(id) => self.model(req.model, req.task, id)?,
                    None => self.model_for_dim(req.model, req.task, g.feature_dim())?,
                };
                let class_names = self
                    .dataset(model.dataset_id())
                    .map(|d| d.descriptor.class_names.clone())
                    .unwrap_or_default();
                let kind = if req.task == Task::GraphClassification {
                    DatasetKind::GraphCollection
                } else {
                    DatasetKind::SingleGraph
                };
                let descriptor = DatasetDescriptor {
                    id: "upload".into(),
                    kind,
                    graph_count: 1,
                    feature_dim: g.feature_dim(),
                    class_names,
                };
                (model, Arc::new(Dataset { descriptor, graphs: vec![g] }))
            }
            (None, None) => {
                return Err(EngineError::BadRequest("either dataset or graph_json is required".into()))
            }
        };
        let selector = match (req.target, req.task) {
            (Some(s), _) => s,
            (None, Task::GraphClassification) if ds.descriptor.id == "upload" => Selector::GraphIndex(0),
            (None, task) => {
                return Err(glassgnn::Error::InvalidSelector(format!("a target is required for {task}")).into())
            }
        };
        let (graph, target) = select_inference_target(&ds, req.task, selector)?;
        let opts = PredictOptions {
            seed: req.seed,
            max_trace_nodes: self.config.max_trace_nodes,
            ..PredictOptions::default()
        };
        let (prediction, trace) = model::predict(&model, graph, &target, &opts)?;
        let trace_json = trace.to_json()?;
        Ok(PredictOutcome {
            prediction,
            trace,
            trace_json,
            class_names: ds.descriptor.class_names.clone(),
        })
    }
}
