//! Command-line front end.
//!
//! Exit codes: 0 on success, 2 for flag errors, 3 for engine errors.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use glassgnn::dataset::Selector;
use glassgnn::{Task, Trace, Variant};

use crate::engine::{Engine, EngineConfig, EngineError, PredictRequest, DATA_DIR_ENV};
use crate::service::{serve, ServiceConfig};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_ENGINE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "glassgnn", version, about = "Glass-box GNN inference: predictions with a full computation trace")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct DataDirs {
    /// Directory holding weight bundles.
    #[arg(long, default_value = "data/bundles")]
    pub bundle_dir: PathBuf,
    /// Directory holding dataset fixtures.
    #[arg(long, env = DATA_DIR_ENV, default_value = "data/datasets")]
    pub dataset_dir: PathBuf,
    /// Refuse to trace graphs with more nodes than this after extraction.
    #[arg(long, default_value_t = glassgnn::model::DEFAULT_MAX_TRACE_NODES)]
    pub max_trace_nodes: usize,
}

impl DataDirs {
    fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            bundle_dir: self.bundle_dir.clone(),
            dataset_dir: self.dataset_dir.clone(),
            max_trace_nodes: self.max_trace_nodes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Gcn,
    Gat,
    Sage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Node,
    Graph,
    Link,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DatasetArg {
    Mutag,
    Karate,
    Twitch,
}

fn parse_edge(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected two node indices as A,B")?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("{v:?} is not a node index"));
    Ok((parse(a)?, parse(b)?))
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("selector").multiple(false))]
pub struct PredictArgs {
    #[arg(long, value_enum)]
    pub model: ModelArg,
    #[arg(long, value_enum)]
    pub task: TaskArg,
    #[arg(long, value_enum)]
    pub dataset: DatasetArg,
    /// Graph of a collection (graph task).
    #[arg(long, group = "selector")]
    pub graph_index: Option<usize>,
    /// Target node (node task).
    #[arg(long, group = "selector")]
    pub node: Option<usize>,
    /// Target node pair `A,B` (link task).
    #[arg(long, group = "selector", value_parser = parse_edge)]
    pub edge: Option<(usize, usize)>,
    /// Graph JSON to run instead of the dataset's own graphs.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Seed for neighbor sampling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Where to write the trace JSON.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub dirs: DataDirs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080, value_parser = clap::value_parser!(u16).range(1..))]
    pub port: u16,
    /// Send permissive CORS headers.
    #[arg(long)]
    pub cors: bool,
    #[command(flatten)]
    pub dirs: DataDirs,
}

#[derive(Debug, Args)]
pub struct ProvenanceArgs {
    /// Trace JSON written by `predict`.
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub step: u32,
    #[arg(long)]
    pub cell: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one prediction and write its trace.
    Predict(PredictArgs),
    /// Start the HTTP service.
    Serve(ServeArgs),
    /// List the shipped models.
    Models {
        #[command(flatten)]
        dirs: DataDirs,
    },
    /// List the bundled datasets.
    Datasets {
        #[command(flatten)]
        dirs: DataDirs,
    },
    /// Explain one cell of a saved trace.
    Provenance(ProvenanceArgs),
}

/// A failure together with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Self {
        Failure {
            code: EXIT_ENGINE,
            message: format!("{}: {e}", e.name()),
        }
    }
}

impl From<glassgnn::Error> for Failure {
    fn from(e: glassgnn::Error) -> Self {
        EngineError::from(e).into()
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

fn io_failure(path: &std::path::Path, e: std::io::Error) -> Failure {
    glassgnn::Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
    .into()
}

impl PredictArgs {
    /// Checks flag combinations clap cannot express and builds the request.
    pub fn to_request(&self) -> Result<PredictRequest, Failure> {
        let task = match self.task {
            TaskArg::Node => Task::NodeClassification,
            TaskArg::Graph => Task::GraphClassification,
            TaskArg::Link => Task::LinkPrediction,
        };
        let target = match (self.task, self.graph_index, self.node, self.edge) {
            (TaskArg::Graph, Some(k), None, None) => Some(Selector::GraphIndex(k)),
            (TaskArg::Graph, None, None, None) if self.input.is_some() => None,
            (TaskArg::Node, None, Some(n), None) => Some(Selector::Node(n)),
            (TaskArg::Link, None, None, Some((a, b))) => Some(Selector::Edge(a, b)),
            (TaskArg::Graph, ..) => return Err(usage("--graph-index is required for --task graph")),
            (TaskArg::Node, ..) => return Err(usage("--node is required for --task node")),
            (TaskArg::Link, ..) => return Err(usage("--edge is required for --task link")),
        };
        let graph_json = match &self.input {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
                Some(serde_json::Value::String(text))
            }
            None => None,
        };
        Ok(PredictRequest {
            model: match self.model {
                ModelArg::Gcn => Variant::Gcn,
                ModelArg::Gat => Variant::Gat,
                ModelArg::Sage => Variant::Sage,
            },
            task,
            dataset: Some(
                match self.dataset {
                    DatasetArg::Mutag => "mutag",
                    DatasetArg::Karate => "karate",
                    DatasetArg::Twitch => "twitch",
                }
                .to_string(),
            ),
            graph_json,
            target,
            seed: self.seed,
        })
    }
}

fn describe_target(t: &glassgnn::Target, selector: Option<Selector>) -> String {
    match (t, selector) {
        (glassgnn::Target::Graph, Some(Selector::GraphIndex(k))) => format!("graph #{k}"),
        (glassgnn::Target::Graph, _) => "whole graph".to_string(),
        (glassgnn::Target::Node { node }, _) => format!("node {node}"),
        (glassgnn::Target::Link { pair }, _) => format!("link ({}, {})", pair[0], pair[1]),
    }
}

fn run_predict(args: &PredictArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let req = args.to_request()?;
    let engine = Engine::open(args.dirs.engine_config())?;
    let outcome = engine.predict(&req)?;
    std::fs::write(&args.out, &outcome.trace_json).map_err(|e| io_failure(&args.out, e))?;
    let p = &outcome.prediction;
    let class = outcome
        .class_names
        .get(p.predicted_class)
        .map(|c| format!(" ({c})"))
        .unwrap_or_default();
    let probs: Vec<String> = p.probabilities.iter().map(|v| format!("{v:.6}")).collect();
    let _ = writeln!(out, "task: {}", p.task);
    let _ = writeln!(out, "target: {}", describe_target(&p.target, req.target));
    let _ = writeln!(out, "predicted class: {}{class}", p.predicted_class);
    let _ = writeln!(out, "probabilities: [{}]", probs.join(", "));
    let _ = writeln!(out, "processed nodes: {}", p.processed_node_count);
    let _ = writeln!(out, "trace: {} -> {}", p.trace_id, args.out.display());
    Ok(())
}

fn print_json(out: &mut dyn Write, value: &impl serde::Serialize) {
    let _ = writeln!(out, "{}", serde_json::to_string_pretty(value).expect("serializable"));
}

/// Runs a parsed command, writing normal output to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), Failure> {
    match cli.command {
        Command::Predict(args) => run_predict(&args, out),
        Command::Models { dirs } => {
            let engine = Engine::open(dirs.engine_config())?;
            for e in engine.catalog() {
                let _ = writeln!(out, "{:<5} {:<21} {:<7} {}", e.variant, e.task, e.dataset, e.bundle_path.display());
            }
            Ok(())
        }
        Command::Datasets { dirs } => {
            let engine = Engine::open(dirs.engine_config())?;
            print_json(out, &engine.dataset_descriptors()?);
            Ok(())
        }
        Command::Provenance(args) => {
            let bytes = std::fs::read(&args.trace).map_err(|e| io_failure(&args.trace, e))?;
            let trace = Trace::from_json(&bytes)?;
            let p = trace.cell_provenance(args.step, args.cell)?;
            print_json(out, &p);
            Ok(())
        }
        Command::Serve(args) => {
            let config = ServiceConfig {
                host: args.host,
                port: args.port,
                bundle_dir: args.dirs.bundle_dir,
                dataset_dir: args.dirs.dataset_dir,
                max_trace_nodes: args.dirs.max_trace_nodes,
                cors_allowed: args.cors,
            };
            let rt = tokio::runtime::Runtime::new().map_err(|e| Failure {
                code: EXIT_ENGINE,
                message: format!("Startup: {e}"),
            })?;
            rt.block_on(serve(config))?;
            Ok(())
        }
    }
}
