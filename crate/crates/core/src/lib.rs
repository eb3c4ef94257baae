//! Glass-box inference for graph neural networks.
//!
//! Runs GCN, GAT and GraphSAGE models on small and medium graphs and records
//! every intermediate tensor in a [`Trace`], so that any cell of any layer can
//! be explained in terms of the cells it was computed from.
//!
//! ```no_run
//! use glassgnn::{dataset, model, Target};
//! use std::path::Path;
//!
//! let ds = dataset::load_dataset(Path::new("data/datasets"), "mutag")?;
//! let bundle = model::load_weight_bundle_file(Path::new("data/bundles/gcn_graph_classification_mutag.json"))?;
//! let m = model::Model::from_bundle(&bundle)?;
//! let (prediction, trace) = model::predict(&m, &ds.graphs[0], &Target::Graph, &Default::default())?;
//! println!("class {} ({} trace steps)", prediction.predicted_class, trace.step_count());
//! # Ok::<(), glassgnn::Error>(())
//! ```

pub mod dataset;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod model;
pub mod tensor;
pub mod trace;

pub use dataset::{Dataset, DatasetDescriptor, Selector};
pub use error::{Error, Result};
pub use graph::{Graph, Labels, NeighborhoodView, SubgraphMap};
pub use model::{Model, ModelSpec, PredictOptions, Prediction, Target, Task, Variant, WeightBundle};
pub use tensor::Matrix;
pub use trace::{Provenance, Symbol, Trace, TraceRecorder};
