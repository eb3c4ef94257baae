#![allow(dead_code)]

use std::path::PathBuf;

pub mod oracle;

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

pub fn dataset_dir() -> PathBuf {
    data_dir().join("datasets")
}

pub fn bundle_dir() -> PathBuf {
    data_dir().join("bundles")
}

use glassgnn::{Graph, Labels, Matrix};
use rand::rngs::StdRng;
use rand::Rng;

pub fn uniform(rng: &mut StdRng, len: usize) -> Vec<f32> {
    (0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

pub fn random_matrix(rng: &mut StdRng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, uniform(rng, rows * cols)).unwrap()
}

/// Erdős–Rényi style graph with `n` nodes and `dim` random features.
pub fn random_graph(rng: &mut StdRng, n: usize, dim: usize, p: f64) -> Graph {
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if rng.random_bool(p) {
                edges.push((a, b));
            }
        }
    }
    let features = (0..n).map(|_| uniform(rng, dim)).collect();
    Graph::build(features, &edges, Labels::default()).unwrap()
}

/// `|got - want| <= tol * max(1, |want|)`.
pub fn close(got: f64, want: f64, tol: f64) -> bool {
    (got - want).abs() <= tol * want.abs().max(1.0)
}

use glassgnn::dataset::{load_dataset, Dataset};
use glassgnn::model::{list_models, load_weight_bundle_file, CatalogEntry, Model};
use glassgnn::{Target, Task};

pub struct Bundled {
    pub entry: CatalogEntry,
    pub model: Model,
    pub dataset: Dataset,
}

pub fn bundled_models() -> Vec<Bundled> {
    list_models(&bundle_dir())
        .unwrap()
        .into_iter()
        .map(|entry| {
            let model = Model::from_bundle(&load_weight_bundle_file(&entry.bundle_path).unwrap()).unwrap();
            let dataset = load_dataset(&dataset_dir(), &entry.dataset).unwrap();
            Bundled { entry, model, dataset }
        })
        .collect()
}

/// The smallest graph of the dataset with a target suited to the task.
pub fn smallest_case(b: &Bundled) -> (Graph, Target) {
    let g = b
        .dataset
        .graphs
        .iter()
        .min_by_key(|g| g.node_count())
        .unwrap()
        .clone();
    let target = match b.entry.task {
        Task::GraphClassification => Target::Graph,
        Task::NodeClassification => Target::Node { node: 0 },
        Task::LinkPrediction => {
            let (a, c) = g.edges()[0];
            Target::Link { pair: [a, c] }
        }
    };
    (g, target)
}
