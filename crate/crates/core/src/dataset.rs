//! Bundled dataset fixtures, user graph JSON and inference-target selection.
//!
//! Fixture layout under a dataset directory:
//!
//! ```text
//! MANIFEST              "<sha256>  <id>/<file>" per line
//! mutag/A.txt           "u, v" per directed edge, 1-based global node ids
//! mutag/graph_indicator.txt   graph number (1-based) of each node
//! mutag/node_labels.txt       atom type 0..6 of each node
//! mutag/graph_labels.txt      0/1 per graph
//! karate/nodes.txt      "id community"
//! karate/edges.txt      "u v"
//! twitch/edges.csv      "from,to" header
//! twitch/features.csv   "id,f0,..." header
//! twitch/target.csv     "id,mature" header
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Graph, Labels};
use crate::model::{Target, Task};
use crate::tensor::Matrix;

pub const DATASET_IDS: [&str; 3] = ["mutag", "karate", "twitch"];

const ATOM_TYPES: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    GraphCollection,
    SingleGraph,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub id: String,
    pub kind: DatasetKind,
    pub graph_count: usize,
    pub feature_dim: usize,
    pub class_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub descriptor: DatasetDescriptor,
    pub graphs: Vec<Graph>,
}

impl Dataset {
    pub fn id(&self) -> &str {
        &self.descriptor.id
    }
}

fn corrupt(path: &Path, line: Option<usize>, detail: impl Into<String>) -> Error {
    Error::CorruptDataFile {
        path: path.to_path_buf(),
        line,
        detail: detail.into(),
    }
}

struct Fixtures {
    root: PathBuf,
    checksums: BTreeMap<String, String>,
}

impl Fixtures {
    fn open(root: &Path) -> Result<Self> {
        let manifest = root.join("MANIFEST");
        let text = std::fs::read_to_string(&manifest).map_err(|source| Error::Io {
            path: manifest.clone(),
            source,
        })?;
        let mut checksums = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            match (parts.next(), parts.next(), parts.next()) {
                (Some(sum), Some(name), None) if sum.len() == 64 => {
                    checksums.insert(name.to_string(), sum.to_ascii_lowercase());
                }
                _ => return Err(corrupt(&manifest, Some(n + 1), "expected \"<sha256>  <file>\"")),
            }
        }
        Ok(Self {
            root: root.to_path_buf(),
            checksums,
        })
    }

    /// Reads a fixture file and checks it against the manifest.
    fn read(&self, name: &str) -> Result<(PathBuf, String)> {
        let path = self.root.join(name);
        let bytes = std::fs::read(&path).map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?;
        let expected = self
            .checksums
            .get(name)
            .ok_or_else(|| corrupt(&path, None, "file is not listed in MANIFEST"))?;
        let actual: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
        if &actual != expected {
            return Err(corrupt(&path, None, format!("checksum {actual} does not match MANIFEST")));
        }
        let text = String::from_utf8(bytes).map_err(|_| corrupt(&path, None, "not valid UTF-8"))?;
        Ok((path, text))
    }
}

/// Non-empty lines with their 1-based line numbers.
fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(n, l)| (n + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: usize, field: &str) -> Result<T> {
    field
        .trim()
        .parse()
        .map_err(|_| corrupt(path, Some(line), format!("cannot parse {field:?}")))
}

fn fields<'a>(path: &Path, line: usize, text: &'a str, sep: char, count: usize) -> Result<Vec<&'a str>> {
    let parts: Vec<&str> = text.split(sep).map(str::trim).collect();
    if parts.len() != count {
        return Err(corrupt(
            path,
            Some(line),
            format!("expected {count} fields, found {}", parts.len()),
        ));
    }
    Ok(parts)
}

fn check_header(path: &Path, text: &str, header: &str) -> Result<()> {
    match text.lines().next() {
        Some(h) if h.trim() == header => Ok(()),
        _ => Err(corrupt(path, Some(1), format!("expected header {header:?}"))),
    }
}

/// Unordered edge set without self-loops.
fn dedup_edges(edges: impl IntoIterator<Item = (usize, usize)>) -> Vec<(usize, usize)> {
    edges
        .into_iter()
        .filter(|(a, b)| a != b)
        .map(|(a, b)| (a.min(b), a.max(b)))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

fn one_hot(index: usize, dim: usize) -> Vec<f32> {
    let mut v = vec![0.0; dim];
    v[index] = 1.0;
    v
}

fn load_mutag(fx: &Fixtures) -> Result<Dataset> {
    let (ind_path, ind) = fx.read("mutag/graph_indicator.txt")?;
    let mut graph_of = Vec::new();
    for (n, l) in lines(&ind) {
        let g: usize = parse_field(&ind_path, n, l)?;
        if g == 0 {
            return Err(corrupt(&ind_path, Some(n), "graph numbers start at 1"));
        }
        if let Some(&prev) = graph_of.last() {
            if g != prev && g != prev + 1 {
                return Err(corrupt(&ind_path, Some(n), "graph numbers must be contiguous"));
            }
        } else if g != 1 {
            return Err(corrupt(&ind_path, Some(n), "first graph must be 1"));
        }
        graph_of.push(g);
    }
    let graph_count = *graph_of.last().ok_or_else(|| corrupt(&ind_path, None, "no nodes"))?;

    let (lab_path, lab) = fx.read("mutag/node_labels.txt")?;
    let mut atoms = Vec::with_capacity(graph_of.len());
    for (n, l) in lines(&lab) {
        let a: usize = parse_field(&lab_path, n, l)?;
        if a >= ATOM_TYPES {
            return Err(corrupt(&lab_path, Some(n), format!("atom type {a} out of range")));
        }
        atoms.push(a);
    }
    if atoms.len() != graph_of.len() {
        return Err(corrupt(
            &lab_path,
            None,
            format!("{} labels for {} nodes", atoms.len(), graph_of.len()),
        ));
    }

    let (gl_path, gl) = fx.read("mutag/graph_labels.txt")?;
    let mut graph_labels = Vec::with_capacity(graph_count);
    for (n, l) in lines(&gl) {
        let y: usize = parse_field(&gl_path, n, l)?;
        if y > 1 {
            return Err(corrupt(&gl_path, Some(n), format!("graph label {y} is not binary")));
        }
        graph_labels.push(y);
    }
    if graph_labels.len() != graph_count {
        return Err(corrupt(
            &gl_path,
            None,
            format!("{} labels for {graph_count} graphs", graph_labels.len()),
        ));
    }

    // first global node of each graph
    let mut offsets = vec![0usize; graph_count + 1];
    for &g in &graph_of {
        offsets[g] += 1;
    }
    for g in 1..=graph_count {
        offsets[g] += offsets[g - 1];
    }

    let (a_path, a) = fx.read("mutag/A.txt")?;
    let mut per_graph: Vec<Vec<(usize, usize)>> = vec![Vec::new(); graph_count];
    for (n, l) in lines(&a) {
        let f = fields(&a_path, n, l, ',', 2)?;
        let u: usize = parse_field(&a_path, n, f[0])?;
        let v: usize = parse_field(&a_path, n, f[1])?;
        if u == 0 || v == 0 || u > graph_of.len() || v > graph_of.len() {
            return Err(corrupt(&a_path, Some(n), "node id out of range"));
        }
        let (gu, gv) = (graph_of[u - 1], graph_of[v - 1]);
        if gu != gv {
            return Err(corrupt(&a_path, Some(n), "edge joins two different graphs"));
        }
        let base = offsets[gu - 1];
        per_graph[gu - 1].push((u - 1 - base, v - 1 - base));
    }

    let mut graphs = Vec::with_capacity(graph_count);
    for g in 0..graph_count {
        let range = offsets[g]..offsets[g + 1];
        let features: Vec<Vec<f32>> = atoms[range.clone()].iter().map(|&t| one_hot(t, ATOM_TYPES)).collect();
        let edges = dedup_edges(per_graph[g].iter().copied());
        graphs.push(Graph::build(
            features,
            &edges,
            Labels {
                node: Some(atoms[range].to_vec()),
                graph: Some(graph_labels[g]),
            },
        )?);
    }
    Ok(Dataset {
        descriptor: DatasetDescriptor {
            id: "mutag".into(),
            kind: DatasetKind::GraphCollection,
            graph_count,
            feature_dim: ATOM_TYPES,
            class_names: vec!["non-mutagenic".into(), "mutagenic".into()],
        },
        graphs,
    })
}

fn load_karate(fx: &Fixtures) -> Result<Dataset> {
    let (nodes_path, nodes) = fx.read("karate/nodes.txt")?;
    let mut labels = Vec::new();
    for (n, l) in lines(&nodes) {
        let f = fields(&nodes_path, n, l, ' ', 2)?;
        let id: usize = parse_field(&nodes_path, n, f[0])?;
        if id != labels.len() {
            return Err(corrupt(&nodes_path, Some(n), format!("expected node {}", labels.len())));
        }
        labels.push(parse_field::<usize>(&nodes_path, n, f[1])?);
    }
    let count = labels.len();
    let (edges_path, edges_text) = fx.read("karate/edges.txt")?;
    let mut edges = Vec::new();
    for (n, l) in lines(&edges_text) {
        let f = fields(&edges_path, n, l, ' ', 2)?;
        let u: usize = parse_field(&edges_path, n, f[0])?;
        let v: usize = parse_field(&edges_path, n, f[1])?;
        if u >= count || v >= count {
            return Err(corrupt(&edges_path, Some(n), "node id out of range"));
        }
        edges.push((u, v));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let features = (0..count).map(|i| one_hot(i, count)).collect();
    let graph = Graph::build(
        features,
        &dedup_edges(edges),
        Labels {
            node: Some(labels),
            graph: None,
        },
    )?;
    Ok(Dataset {
        descriptor: DatasetDescriptor {
            id: "karate".into(),
            kind: DatasetKind::SingleGraph,
            graph_count: 1,
            feature_dim: count,
            class_names: (0..classes).map(|c| format!("community {c}")).collect(),
        },
        graphs: vec![graph],
    })
}

fn load_twitch(fx: &Fixtures) -> Result<Dataset> {
    let (feat_path, feat) = fx.read("twitch/features.csv")?;
    let header = feat.lines().next().unwrap_or("");
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    if columns.first() != Some(&"id") || columns.len() < 2 {
        return Err(corrupt(&feat_path, Some(1), "expected header \"id,f0,...\""));
    }
    let dim = columns.len() - 1;
    let mut ids = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut rows = Vec::new();
    for (n, l) in lines(&feat).skip(1) {
        let f = fields(&feat_path, n, l, ',', dim + 1)?;
        if index.insert(f[0].to_string(), ids.len()).is_some() {
            return Err(corrupt(&feat_path, Some(n), format!("duplicate id {}", f[0])));
        }
        ids.push(f[0].to_string());
        let mut row = Vec::with_capacity(dim);
        for v in &f[1..] {
            let x: f32 = parse_field(&feat_path, n, v)?;
            if !x.is_finite() {
                return Err(corrupt(&feat_path, Some(n), "non-finite feature"));
            }
            row.push(x);
        }
        rows.push(row);
    }
    let lookup = |path: &Path, n: usize, id: &str| {
        index
            .get(id)
            .copied()
            .ok_or_else(|| corrupt(path, Some(n), format!("unknown node id {id:?}")))
    };

    let (target_path, target) = fx.read("twitch/target.csv")?;
    check_header(&target_path, &target, "id,mature")?;
    let mut labels = vec![None; ids.len()];
    for (n, l) in lines(&target).skip(1) {
        let f = fields(&target_path, n, l, ',', 2)?;
        let i = lookup(&target_path, n, f[0])?;
        let y: usize = parse_field(&target_path, n, f[1])?;
        if y > 1 {
            return Err(corrupt(&target_path, Some(n), "label must be 0 or 1"));
        }
        labels[i] = Some(y);
    }
    let labels: Vec<usize> = labels
        .into_iter()
        .enumerate()
        .map(|(i, y)| y.ok_or_else(|| corrupt(&target_path, None, format!("no label for node {}", ids[i]))))
        .collect::<Result<_>>()?;

    let (edges_path, edges_text) = fx.read("twitch/edges.csv")?;
    check_header(&edges_path, &edges_text, "from,to")?;
    let mut edges = Vec::new();
    for (n, l) in lines(&edges_text).skip(1) {
        let f = fields(&edges_path, n, l, ',', 2)?;
        edges.push((lookup(&edges_path, n, f[0])?, lookup(&edges_path, n, f[1])?));
    }
    let graph = Graph::build(
        rows,
        &dedup_edges(edges),
        Labels {
            node: Some(labels),
            graph: None,
        },
    )?
    .with_node_ids(ids)?;
    Ok(Dataset {
        descriptor: DatasetDescriptor {
            id: "twitch".into(),
            kind: DatasetKind::SingleGraph,
            graph_count: 1,
            feature_dim: dim,
            class_names: vec!["not mature".into(), "mature".into()],
        },
        graphs: vec![graph],
    })
}

/// Loads a bundled dataset from `dir` after verifying its checksums.
pub fn load_dataset(dir: &Path, id: &str) -> Result<Dataset> {
    if !DATASET_IDS.contains(&id) {
        return Err(Error::UnknownDataset(id.to_string()));
    }
    let fx = Fixtures::open(dir)?;
    let ds = match id {
        "mutag" => load_mutag(&fx)?,
        "karate" => load_karate(&fx)?,
        _ => load_twitch(&fx)?,
    };
    log::debug!("loaded dataset {id}: {} graphs", ds.graphs.len());
    Ok(ds)
}

/// Descriptors of every bundled dataset.
pub fn list_datasets(dir: &Path) -> Result<Vec<DatasetDescriptor>> {
    DATASET_IDS
        .iter()
        .map(|id| load_dataset(dir, id).map(|d| d.descriptor))
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParseOptions {
    /// Reject unknown fields instead of ignoring them.
    pub strict: bool,
}

/// A parsed user graph plus any non-fatal notes.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedGraph {
    pub graph: Graph,
    pub warnings: Vec<String>,
}

/// Parses user graph JSON with default (lenient) options.
pub fn parse_graph_json(bytes: &[u8]) -> Result<Graph> {
    parse_graph_json_with(bytes, ParseOptions::default()).map(|p| p.graph)
}

fn reject_unknown(obj: &Map<String, Value>, allowed: &[&str], at: &str, strict: bool) -> Result<()> {
    if strict {
        if let Some(k) = obj.keys().find(|k| !allowed.contains(&k.as_str())) {
            let path = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
            return Err(Error::SchemaError(path));
        }
    }
    Ok(())
}

fn label_of(v: &Value, at: String) -> Result<usize> {
    v.as_u64().map(|x| x as usize).ok_or(Error::SchemaError(at))
}

pub fn parse_graph_json_with(bytes: &[u8], opts: ParseOptions) -> Result<ParsedGraph> {
    let root: Value = serde_json::from_slice(bytes).map_err(|e| Error::ParseError(e.to_string()))?;
    let root = root.as_object().ok_or_else(|| Error::SchemaError("$".into()))?;
    reject_unknown(root, &["nodes", "edges", "graph_label"], "", opts.strict)?;
    let nodes = root
        .get("nodes")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::SchemaError("nodes".into()))?;
    let edges = match root.get("edges") {
        None => &[][..],
        Some(v) => v.as_array().ok_or_else(|| Error::SchemaError("edges".into()))?.as_slice(),
    };

    let mut ids = Vec::with_capacity(nodes.len());
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut features = Vec::with_capacity(nodes.len());
    let mut labels = Vec::new();
    for (i, node) in nodes.iter().enumerate() {
        let at = format!("nodes[{i}]");
        let obj = node.as_object().ok_or_else(|| Error::SchemaError(at.clone()))?;
        reject_unknown(obj, &["id", "features", "label"], &at, opts.strict)?;
        let id = obj
            .get("id")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::SchemaError(format!("{at}.id")))?;
        if index.insert(id, i).is_some() {
            return Err(Error::SchemaError(format!("{at}.id")));
        }
        ids.push(id.to_string());
        let feats = obj
            .get("features")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::SchemaError(format!("{at}.features")))?;
        let mut row = Vec::with_capacity(feats.len());
        for (d, v) in feats.iter().enumerate() {
            let x = v
                .as_f64()
                .map(|x| x as f32)
                .filter(|x| x.is_finite())
                .ok_or_else(|| Error::SchemaError(format!("{at}.features[{d}]")))?;
            row.push(x);
        }
        features.push(row);
        if let Some(l) = obj.get("label") {
            labels.push((i, label_of(l, format!("{at}.label"))?));
        }
    }
    let node_labels = match labels.len() {
        0 => None,
        n if n == nodes.len() => Some(labels.into_iter().map(|(_, l)| l).collect()),
        _ => {
            let missing = (0..nodes.len()).find(|i| !labels.iter().any(|(j, _)| j == i)).unwrap_or(0);
            return Err(Error::SchemaError(format!("nodes[{missing}].label")));
        }
    };
    let graph_label = match root.get("graph_label") {
        None | Some(Value::Null) => None,
        Some(v) => Some(label_of(v, "graph_label".into())?),
    };

    let mut warnings = Vec::new();
    let mut pairs = Vec::with_capacity(edges.len());
    for (k, e) in edges.iter().enumerate() {
        let endpoint = |v: Option<&Value>| v.and_then(Value::as_str).and_then(|s| index.get(s).copied());
        let pair = e.as_array().filter(|a| a.len() == 2);
        let (a, b) = match pair {
            Some(p) => match (endpoint(p.first()), endpoint(p.get(1))) {
                (Some(a), Some(b)) => (a, b),
                _ => return Err(Error::SchemaError(format!("edges[{k}]"))),
            },
            None => return Err(Error::SchemaError(format!("edges[{k}]"))),
        };
        if a == b {
            let msg = format!("edges[{k}]: self-loop on {:?} dropped", ids[a]);
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        pairs.push((a, b));
    }
    let dim = features.first().map_or(0, Vec::len);
    let matrix = if features.is_empty() {
        Matrix::zeros(0, 0)
    } else {
        Matrix::from_rows(&features)?
    };
    debug_assert!(matrix.cols() == dim);
    let graph = Graph::from_matrix(
        matrix,
        &dedup_edges(pairs),
        Labels {
            node: node_labels,
            graph: graph_label,
        },
    )?
    .with_node_ids(ids)?;
    Ok(ParsedGraph { graph, warnings })
}

/// Serializes a graph in the same JSON shape [`parse_graph_json`] accepts.
pub fn graph_to_json(g: &Graph) -> Vec<u8> {
    let ids = g.node_ids();
    let nodes: Vec<Value> = (0..g.node_count())
        .map(|i| {
            let mut obj = Map::new();
            obj.insert("id".into(), Value::from(ids[i].clone()));
            obj.insert("features".into(), serde_json::json!(g.features().row(i)));
            if let Some(l) = g.node_labels() {
                obj.insert("label".into(), Value::from(l[i]));
            }
            Value::Object(obj)
        })
        .collect();
    let edges: Vec<Value> = g
        .edges()
        .iter()
        .map(|&(a, b)| serde_json::json!([ids[a], ids[b]]))
        .collect();
    let mut root = Map::new();
    root.insert("nodes".into(), Value::Array(nodes));
    root.insert("edges".into(), Value::Array(edges));
    if let Some(l) = g.graph_label() {
        root.insert("graph_label".into(), Value::from(l));
    }
    serde_json::to_vec(&Value::Object(root)).expect("graph serialization is infallible")
}

/// Which part of a dataset a prediction is about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    GraphIndex(usize),
    Node(usize),
    Edge(usize, usize),
}

/// Resolves a selector to a graph and a prediction target.
pub fn select_inference_target(ds: &Dataset, task: Task, selector: Selector) -> Result<(&Graph, Target)> {
    let invalid = |msg: String| Error::InvalidSelector(msg);
    match (ds.descriptor.kind, task, selector) {
        (DatasetKind::GraphCollection, Task::GraphClassification, Selector::GraphIndex(k)) => {
            let g = ds.graphs.get(k).ok_or_else(|| {
                invalid(format!("graph index {k} out of range for {} graphs", ds.graphs.len()))
            })?;
            Ok((g, Target::Graph))
        }
        (DatasetKind::SingleGraph, Task::NodeClassification, Selector::Node(i)) => {
            let g = &ds.graphs[0];
            if i >= g.node_count() {
                return Err(invalid(format!("node {i} out of range for {} nodes", g.node_count())));
            }
            Ok((g, Target::Node { node: i }))
        }
        (DatasetKind::SingleGraph, Task::LinkPrediction, Selector::Edge(a, b)) => {
            let g = &ds.graphs[0];
            for v in [a, b] {
                if v >= g.node_count() {
                    return Err(invalid(format!("node {v} out of range for {} nodes", g.node_count())));
                }
            }
            Ok((g, Target::Link { pair: [a, b] }))
        }
        (kind, task, selector) => Err(invalid(format!(
            "{selector:?} does not select a {task} target in a {kind:?} dataset"
        ))),
    }
}
