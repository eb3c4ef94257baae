//! Model specs, weight bundles, assembly and end-to-end prediction.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::kernels::{
    self, Activations, DenseParams, GatParams, MlpParams, NeighborSampler, SageParams,
    DEFAULT_LEAKY_SLOPE, DEFAULT_SAMPLE_SIZE,
};
use crate::tensor::Matrix;
use crate::trace::{GraphSummary, ModelDescriptor, Recorder, StepId, Trace, TraceRecorder};

pub const BUNDLE_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_SUBGRAPH_THRESHOLD: usize = 500;
pub const DEFAULT_MAX_TRACE_NODES: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Gcn,
    Gat,
    Sage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    NodeClassification,
    GraphClassification,
    LinkPrediction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    PerNodeMlp,
    PoolThenMlp,
    DotProduct,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Gcn, Variant::Gat, Variant::Sage];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Gcn => "gcn",
            Variant::Gat => "gat",
            Variant::Sage => "sage",
        }
    }
}

impl Task {
    pub const ALL: [Task; 3] = [Task::NodeClassification, Task::GraphClassification, Task::LinkPrediction];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::NodeClassification => "node_classification",
            Task::GraphClassification => "graph_classification",
            Task::LinkPrediction => "link_prediction",
        }
    }

    /// Short form used on the command line.
    pub fn short(self) -> &'static str {
        match self {
            Task::NodeClassification => "node",
            Task::GraphClassification => "graph",
            Task::LinkPrediction => "link",
        }
    }

    pub fn head(self) -> Head {
        match self {
            Task::NodeClassification => Head::PerNodeMlp,
            Task::GraphClassification => Head::PoolThenMlp,
            Task::LinkPrediction => Head::DotProduct,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::ParseError(format!("unknown variant {s:?}")))
    }
}

impl FromStr for Task {
    /// Accepts both the long and the short name.
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.as_str() == s || t.short() == s)
            .ok_or_else(|| Error::ParseError(format!("unknown task {s:?}")))
    }
}

/// What a prediction is about, in node indices of the graph it refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Target {
    Graph,
    Node { node: usize },
    Link { pair: [usize; 2] },
}

impl Target {
    fn seeds(&self) -> Vec<usize> {
        match *self {
            Target::Graph => Vec::new(),
            Target::Node { node } => vec![node],
            Target::Link { pair } => pair.to_vec(),
        }
    }

    fn map(&self, f: impl Fn(usize) -> usize) -> Target {
        match *self {
            Target::Graph => Target::Graph,
            Target::Node { node } => Target::Node { node: f(node) },
            Target::Link { pair } => Target::Link {
                pair: [f(pair[0]), f(pair[1])],
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    pub task: Task,
    /// `[in, out]` per message-passing layer.
    pub gnn_layers: Vec<[usize; 2]>,
    pub head: Head,
    /// `[in, out]` per dense head layer; empty for the dot-product head.
    #[serde(default)]
    pub mlp_layers: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub leaky_slope: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_size: Option<usize>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.task.head() != self.head {
            return Err(Error::SpecMismatch(format!(
                "task {} requires head {:?}, found {:?}",
                self.task,
                self.task.head(),
                self.head
            )));
        }
        if self.gnn_layers.is_empty() {
            return Err(Error::SpecMismatch("at least one message-passing layer is required".into()));
        }
        let dims: Vec<[usize; 2]> = self.gnn_layers.iter().chain(&self.mlp_layers).copied().collect();
        if dims.iter().any(|d| d[0] == 0 || d[1] == 0) {
            return Err(Error::SpecMismatch("layer dimensions must be positive".into()));
        }
        for (t, pair) in dims.windows(2).enumerate() {
            if pair[0][1] != pair[1][0] {
                return Err(Error::SpecMismatch(format!(
                    "layer {} outputs {} but layer {} expects {}",
                    t,
                    pair[0][1],
                    t + 1,
                    pair[1][0]
                )));
            }
        }
        match self.head {
            Head::DotProduct if !self.mlp_layers.is_empty() => {
                Err(Error::SpecMismatch("dot-product head takes no dense layers".into()))
            }
            Head::PerNodeMlp | Head::PoolThenMlp if self.mlp_layers.is_empty() => {
                Err(Error::SpecMismatch("classification heads need at least one dense layer".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.gnn_layers[0][0]
    }

    /// Layers of the assembled model: message passing, pooling, dense, dot.
    pub fn layer_count(&self) -> usize {
        let head = match self.head {
            Head::PerNodeMlp => self.mlp_layers.len(),
            Head::PoolThenMlp => 1 + self.mlp_layers.len(),
            Head::DotProduct => 1,
        };
        self.gnn_layers.len() + head
    }

    /// Tensor names and shapes a bundle for this spec must contain, in order.
    pub fn expected_parameters(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (l, &[i, o]) in self.gnn_layers.iter().enumerate() {
            match self.variant {
                Variant::Gcn => {
                    out.push((format!("gnn.{l}.W"), vec![o, i]));
                    out.push((format!("gnn.{l}.b"), vec![o]));
                }
                Variant::Gat => {
                    out.push((format!("gnn.{l}.W"), vec![o, i]));
                    out.push((format!("gnn.{l}.a"), vec![2 * o]));
                }
                Variant::Sage => {
                    out.push((format!("gnn.{l}.W_self"), vec![o, i]));
                    out.push((format!("gnn.{l}.W_neigh"), vec![o, i]));
                    out.push((format!("gnn.{l}.b"), vec![o]));
                }
            }
        }
        for (k, &[i, o]) in self.mlp_layers.iter().enumerate() {
            out.push((format!("mlp.{k}.W"), vec![o, i]));
            out.push((format!("mlp.{k}.b"), vec![o]));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightBundle {
    pub format_version: u32,
    pub spec: ModelSpec,
    pub dataset_id: String,
    pub parameters: Vec<NamedTensor>,
    #[serde(default)]
    pub training_metadata: BTreeMap<String, String>,
}

impl WeightBundle {
    pub fn parameter_count(&self) -> usize {
        self.parameters.iter().map(|p| p.values.len()).sum()
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.parameters.iter().find(|p| p.name == name)
    }

    fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let expected = self.spec.expected_parameters();
        let mut have: HashMap<&str, &NamedTensor> = HashMap::new();
        for p in &self.parameters {
            if have.insert(p.name.as_str(), p).is_some() {
                return Err(Error::shape(format!("tensor {} appears twice", p.name)));
            }
            if !expected.iter().any(|(n, _)| *n == p.name) {
                return Err(Error::shape(format!("unexpected tensor {}", p.name)));
            }
        }
        for (name, shape) in &expected {
            let p = have
                .get(name.as_str())
                .ok_or_else(|| Error::shape(format!("missing tensor {name}")))?;
            if &p.shape != shape {
                return Err(Error::shape(format!(
                    "tensor {name} declared with shape {:?}, expected {shape:?}",
                    p.shape
                )));
            }
            let count: usize = shape.iter().product();
            if p.values.len() != count {
                return Err(Error::shape(format!(
                    "tensor {name} has {} values for shape {shape:?}",
                    p.values.len()
                )));
            }
            if p.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteWeight(name.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

/// Parses and validates a bundle document.
pub fn load_weight_bundle(bytes: &[u8]) -> Result<WeightBundle> {
    let probe: VersionProbe = serde_json::from_slice(bytes).map_err(|e| Error::ParseError(e.to_string()))?;
    if probe.format_version != BUNDLE_FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(probe.format_version));
    }
    let bundle: WeightBundle = serde_json::from_slice(bytes).map_err(|e| Error::ParseError(e.to_string()))?;
    bundle.validate()?;
    Ok(bundle)
}

pub fn load_weight_bundle_file(path: &Path) -> Result<WeightBundle> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    load_weight_bundle(&bytes)
}

#[derive(Debug, Clone, PartialEq)]
pub enum GnnLayer {
    Gcn(DenseParams),
    Gat(GatParams),
    Sage(SageParams),
}

/// An executable model with immutable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    dataset_id: String,
    gnn: Vec<GnnLayer>,
    mlp: MlpParams,
}

fn take_matrix(tensors: &HashMap<&str, &NamedTensor>, name: &str) -> Result<Matrix> {
    let t = tensors
        .get(name)
        .ok_or_else(|| Error::shape(format!("missing tensor {name}")))?;
    Matrix::from_vec(t.shape[0], t.shape[1], t.values.clone())
}

fn take_vector(tensors: &HashMap<&str, &NamedTensor>, name: &str) -> Result<Vec<f32>> {
    Ok(tensors
        .get(name)
        .ok_or_else(|| Error::shape(format!("missing tensor {name}")))?
        .values
        .clone())
}

/// Builds a model; the bundle must have been produced for `spec`.
pub fn assemble(spec: &ModelSpec, bundle: &WeightBundle) -> Result<Model> {
    if &bundle.spec != spec {
        return Err(Error::SpecMismatch(format!(
            "bundle is a {} {} model, requested {} {}",
            bundle.spec.variant, bundle.spec.task, spec.variant, spec.task
        )));
    }
    bundle.validate()?;
    let tensors: HashMap<&str, &NamedTensor> =
        bundle.parameters.iter().map(|p| (p.name.as_str(), p)).collect();
    let mut gnn = Vec::with_capacity(spec.gnn_layers.len());
    for l in 0..spec.gnn_layers.len() {
        gnn.push(match spec.variant {
            Variant::Gcn => GnnLayer::Gcn(DenseParams::new(
                take_matrix(&tensors, &format!("gnn.{l}.W"))?,
                take_vector(&tensors, &format!("gnn.{l}.b"))?,
            )?),
            Variant::Gat => GnnLayer::Gat(GatParams::new(
                take_matrix(&tensors, &format!("gnn.{l}.W"))?,
                take_vector(&tensors, &format!("gnn.{l}.a"))?,
                spec.leaky_slope.unwrap_or(DEFAULT_LEAKY_SLOPE),
            )?),
            Variant::Sage => GnnLayer::Sage(SageParams::new(
                take_matrix(&tensors, &format!("gnn.{l}.W_self"))?,
                take_matrix(&tensors, &format!("gnn.{l}.W_neigh"))?,
                take_vector(&tensors, &format!("gnn.{l}.b"))?,
                spec.sample_size.unwrap_or(DEFAULT_SAMPLE_SIZE),
            )?),
        });
    }
    let mut dense = Vec::with_capacity(spec.mlp_layers.len());
    for k in 0..spec.mlp_layers.len() {
        dense.push(DenseParams::new(
            take_matrix(&tensors, &format!("mlp.{k}.W"))?,
            take_vector(&tensors, &format!("mlp.{k}.b"))?,
        )?);
    }
    Ok(Model {
        spec: spec.clone(),
        dataset_id: bundle.dataset_id.clone(),
        gnn,
        mlp: MlpParams::new(dense)?,
    })
}

impl Model {
    pub fn from_bundle(bundle: &WeightBundle) -> Result<Model> {
        assemble(&bundle.spec, bundle)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn dataset_id(&self) -> &str {
        &self.dataset_id
    }

    pub fn gnn_layers(&self) -> &[GnnLayer] {
        &self.gnn
    }

    pub fn mlp(&self) -> &MlpParams {
        &self.mlp
    }

    pub fn layer_count(&self) -> usize {
        self.spec.layer_count()
    }
}

/// Neighbor lists keyed by external node id, one map per SAGE layer.
pub type SampleOverride = Vec<BTreeMap<String, Vec<String>>>;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictOptions {
    pub seed: u64,
    pub subgraph_threshold: usize,
    pub max_trace_nodes: usize,
    /// Replays recorded SAGE samples instead of drawing them.
    pub sample_override: Option<SampleOverride>,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            subgraph_threshold: DEFAULT_SUBGRAPH_THRESHOLD,
            max_trace_nodes: DEFAULT_MAX_TRACE_NODES,
            sample_override: None,
        }
    }
}

impl PredictOptions {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub task: Task,
    /// Target in the node indices of the graph passed to [`predict`].
    pub target: Target,
    pub logits: Vec<f32>,
    pub probabilities: Vec<f64>,
    pub predicted_class: usize,
    pub trace_id: String,
    /// Nodes actually run through the model after any extraction.
    pub processed_node_count: usize,
}

fn check_target(task: Task, g: &Graph, target: &Target) -> Result<()> {
    let n = g.node_count();
    let exists = |v: usize| {
        if v < n {
            Ok(())
        } else {
            Err(Error::InvalidTarget(format!("node {v} does not exist in a graph of {n} nodes")))
        }
    };
    match (task, target) {
        (Task::GraphClassification, Target::Graph) => Ok(()),
        (Task::NodeClassification, Target::Node { node }) => exists(*node),
        (Task::LinkPrediction, Target::Link { pair }) => {
            exists(pair[0])?;
            exists(pair[1])?;
            if pair[0] == pair[1] {
                return Err(Error::InvalidTarget(format!("self-link ({0}, {0})", pair[0])));
            }
            Ok(())
        }
        (task, target) => Err(Error::InvalidTarget(format!("{target:?} is not a {task} target"))),
    }
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f32]) -> Result<Vec<f64>> {
    let wide: Vec<f64> = logits.iter().map(|&v| f64::from(v)).collect();
    kernels::softmax_over_neighborhood(&wide)
}

fn resolve_override(g: &Graph, layer: &BTreeMap<String, Vec<String>>) -> Result<NeighborSampler> {
    let mut lists = BTreeMap::new();
    for (node, nbrs) in layer {
        // entries outside the processed graph are irrelevant
        let Some(i) = g.index_of(node) else { continue };
        let mut list = Vec::with_capacity(nbrs.len());
        for id in nbrs {
            list.push(g.index_of(id).ok_or_else(|| {
                Error::InvalidTarget(format!("sampled neighbor {id:?} of node {node:?} is not in the graph"))
            })?);
        }
        lists.insert(i, list);
    }
    Ok(NeighborSampler::Fixed(lists))
}

struct Forward {
    logits: Vec<f32>,
    prediction_step: StepId,
    link_probability: Option<f64>,
}

fn forward(model: &Model, g: &Graph, target: &Target, opts: &PredictOptions, rec: &mut dyn Recorder) -> Result<Forward> {
    let mut x = Activations::input(g.features().clone());
    for (l, layer) in model.gnn.iter().enumerate() {
        x = match layer {
            GnnLayer::Gcn(p) => kernels::gcn_layer_forward(g, &x, p, rec)?,
            GnnLayer::Gat(p) => kernels::gat_layer_forward(g, &x, p, rec)?,
            GnnLayer::Sage(p) => {
                let sampler = match &opts.sample_override {
                    Some(layers) => resolve_override(g, layers.get(l).unwrap_or(&BTreeMap::new()))?,
                    None => NeighborSampler::Seeded(kernels::layer_seed(opts.seed, l)),
                };
                kernels::sage_layer_forward(g, &x, p, &sampler, rec)?
            }
        };
    }
    match (model.spec.head, target) {
        (Head::PoolThenMlp, _) => {
            let pooled = kernels::global_mean_pool(&x, rec)?;
            let out = kernels::mlp_forward(&pooled, &model.mlp, rec)?;
            Ok(Forward {
                logits: out.values.row(0).to_vec(),
                prediction_step: out.steps[0],
                link_probability: None,
            })
        }
        (Head::PerNodeMlp, Target::Node { node }) => {
            let out = kernels::mlp_forward(&x, &model.mlp, rec)?;
            Ok(Forward {
                logits: out.values.row(*node).to_vec(),
                prediction_step: out.steps[*node],
                link_probability: None,
            })
        }
        (Head::DotProduct, Target::Link { pair }) => {
            let s = kernels::dot_product_score(&x, pair[0], pair[1], rec)?;
            Ok(Forward {
                logits: vec![s.raw, 0.0],
                prediction_step: s.logits_step,
                link_probability: Some(s.probability),
            })
        }
        (_, target) => Err(Error::InvalidTarget(format!("{target:?} does not fit the model head"))),
    }
}

/// Runs the model on `g` and records the full trace.
///
/// Graphs above `opts.subgraph_threshold` nodes are reduced to the k-hop
/// neighborhood of the target (k = number of message-passing layers) unless
/// the task is graph classification.
pub fn predict(model: &Model, g: &Graph, target: &Target, opts: &PredictOptions) -> Result<(Prediction, Trace)> {
    let spec = &model.spec;
    if g.node_count() == 0 {
        return Err(Error::EmptyGraph);
    }
    if g.feature_dim() != spec.input_dim() {
        return Err(Error::shape(format!(
            "graph has {}-dimensional features, model expects {}",
            g.feature_dim(),
            spec.input_dim()
        )));
    }
    check_target(spec.task, g, target)?;

    let extracted;
    let (work, local_target) = if spec.task != Task::GraphClassification && g.node_count() > opts.subgraph_threshold {
        let (sub, map) = g.k_hop_subgraph(&target.seeds(), spec.gnn_layers.len())?;
        let local = target.map(|v| map.old_to_new[&v]);
        extracted = sub;
        (&extracted, local)
    } else {
        (g, *target)
    };
    if work.node_count() > opts.max_trace_nodes {
        return Err(Error::TooLargeToTrace {
            nodes: work.node_count(),
            limit: opts.max_trace_nodes,
        });
    }

    let mut rec = TraceRecorder::new();
    let out = forward(model, work, &local_target, opts, &mut rec)?;
    let trace = rec.finish(
        ModelDescriptor {
            variant: spec.variant,
            task: spec.task,
            dataset_id: model.dataset_id.clone(),
        },
        GraphSummary {
            node_ids: work.node_ids().to_vec(),
            edges: work.edges().iter().map(|&(a, b)| [a, b]).collect(),
        },
        local_target,
        out.prediction_step,
    )?;
    let probabilities = match out.link_probability {
        Some(p) => vec![p, 1.0 - p],
        None => softmax(&out.logits)?,
    };
    let prediction = Prediction {
        task: spec.task,
        target: *target,
        predicted_class: argmax(&out.logits),
        logits: out.logits,
        probabilities,
        trace_id: trace.trace_id.clone(),
        processed_node_count: work.node_count(),
    };
    Ok((prediction, trace))
}

/// One shipped model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub variant: Variant,
    pub task: Task,
    pub dataset: String,
    pub bundle_path: PathBuf,
}

#[derive(Deserialize)]
struct CatalogProbe {
    spec: CatalogSpecProbe,
    dataset_id: String,
}

#[derive(Deserialize)]
struct CatalogSpecProbe {
    variant: Variant,
    task: Task,
}

/// Every bundle in `dir`, ordered by variant, task, dataset.
pub fn list_models(dir: &Path) -> Result<Vec<CatalogEntry>> {
    let io = |source| Error::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let bytes = std::fs::read(&path).map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?;
        let probe: CatalogProbe = serde_json::from_slice(&bytes)
            .map_err(|e| Error::ParseError(format!("{}: {e}", path.display())))?;
        out.push(CatalogEntry {
            variant: probe.spec.variant,
            task: probe.spec.task,
            dataset: probe.dataset_id,
            bundle_path: path,
        });
    }
    out.sort_by(|a, b| {
        (a.variant, a.task, &a.dataset, &a.bundle_path).cmp(&(b.variant, b.task, &b.dataset, &b.bundle_path))
    });
    Ok(out)
}
