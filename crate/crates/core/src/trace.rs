//! Hierarchical computation trace: model → layer → step → cell.
//!
//! Every tensor a forward pass produces is recorded as a [`TraceStep`]
//! tagged with the formula symbol it corresponds to. Each computed step also
//! carries a [`Derivation`] naming the steps it was computed from, which is
//! enough to rebuild the arithmetic behind any single cell on demand
//! ([`Trace::cell_provenance`]) from the serialized trace alone.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Target, Task, Variant};

pub type StepId = u32;

pub const SCHEMA_VERSION: u32 = 1;

macro_rules! string_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $s:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $s)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $s),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($name::$variant),)+
                    other => Err(Error::ParseError(format!(
                        concat!("unknown ", stringify!($name), " {:?}"), other))),
                }
            }
        }
    };
}

string_enum!(
    /// Formula symbol a step is linked to.
    Symbol {
        Xj => "x_j",
        Coeff => "coeff",
        Agg => "agg",
        Wx => "Wx",
        WxSelf => "Wx_self",
        WxNeigh => "Wx_neigh",
        BiasAdd => "bias_add",
        Activation => "activation",
        Alpha => "alpha",
        Eij => "e_ij",
        Sample => "sample",
        Mean => "mean",
        Pool => "pool",
        Dot => "dot",
        Logits => "logits",
        W => "W",
        B => "b",
        A => "a",
    }
);

string_enum!(LayerKind {
    Gcn => "gcn",
    Gat => "gat",
    Sage => "sage",
    Pool => "pool",
    Mlp => "mlp",
    Dot => "dot",
});

string_enum!(
    /// Identifier of a displayed equation; the UI owns the rendered text.
    FormulaId {
        GcnConv => "gcn_conv",
        GatScore1 => "gat_score_1",
        GatScore2 => "gat_score_2",
        GatScore3 => "gat_score_3",
        SageConv => "sage_conv",
        PoolMean => "pool_mean",
        MlpAffine => "mlp_affine",
        LinkDot => "link_dot",
    }
);

string_enum!(IconKind {
    None => "none",
    Matmul => "matmul",
    Sample => "sample",
    Pool => "pool",
    Dot => "dot",
});

string_enum!(OpKind {
    WeightedSum => "weighted_sum",
    MatmulCell => "matmul_cell",
    Add => "add",
    MaxZero => "max_zero",
    Leaky => "leaky",
    SoftmaxCell => "softmax_cell",
    MeanCell => "mean_cell",
    DotCell => "dot_cell",
});

impl LayerKind {
    /// Base of the display name given to layers of this kind.
    pub fn display_base(self) -> &'static str {
        match self {
            LayerKind::Gcn => "GCNConv",
            LayerKind::Gat => "GATConv",
            LayerKind::Sage => "SAGEConv",
            LayerKind::Pool => "GlobalMeanPool",
            LayerKind::Mlp => "Linear",
            LayerKind::Dot => "DotProduct",
        }
    }

    pub fn is_message_passing(self) -> bool {
        matches!(self, LayerKind::Gcn | LayerKind::Gat | LayerKind::Sage)
    }

    /// Position of `symbol` in this layer kind's computation order, or `None`
    /// if the symbol never appears in such a layer.
    pub fn symbol_rank(self, symbol: Symbol) -> Option<u32> {
        use Symbol::*;
        let rank = match (self, symbol) {
            (LayerKind::Gcn, Xj | W | B) => 0,
            (LayerKind::Gcn, Coeff) => 1,
            (LayerKind::Gcn, Agg) => 2,
            (LayerKind::Gcn, Wx) => 3,
            (LayerKind::Gcn, BiasAdd) => 4,
            (LayerKind::Gcn, Activation) => 5,

            (LayerKind::Gat, Xj | W | A) => 0,
            (LayerKind::Gat, Wx) => 1,
            (LayerKind::Gat, Eij) => 2,
            (LayerKind::Gat, Alpha) => 3,
            (LayerKind::Gat, Agg) => 4,
            (LayerKind::Gat, Activation) => 5,

            (LayerKind::Sage, Xj | W | B) => 0,
            (LayerKind::Sage, Sample) => 1,
            (LayerKind::Sage, Mean) => 2,
            (LayerKind::Sage, WxSelf | WxNeigh) => 3,
            (LayerKind::Sage, Agg) => 4,
            (LayerKind::Sage, BiasAdd) => 5,
            (LayerKind::Sage, Activation) => 6,

            (LayerKind::Pool, Xj) => 0,
            (LayerKind::Pool, Pool) => 1,

            (LayerKind::Mlp, Xj | W | B) => 0,
            (LayerKind::Mlp, Wx) => 1,
            (LayerKind::Mlp, BiasAdd | Logits) => 2,
            (LayerKind::Mlp, Activation) => 3,

            (LayerKind::Dot, Xj) => 0,
            (LayerKind::Dot, Dot) => 1,
            (LayerKind::Dot, Logits) => 2,
            _ => return None,
        };
        Some(rank)
    }

    /// Per-node symbols every in-scope node must have in a complete layer.
    pub fn required_node_symbols(self) -> &'static [Symbol] {
        use Symbol::*;
        match self {
            LayerKind::Gcn => &[Coeff, Agg, Wx, BiasAdd, Activation],
            LayerKind::Gat => &[Wx, Eij, Alpha, Agg, Activation],
            LayerKind::Sage => &[Sample, Mean, WxSelf, WxNeigh, Agg, BiasAdd, Activation],
            _ => &[],
        }
    }
}

/// How a step's values were obtained from other steps.
///
/// Stored values are `f32`; every formula below is evaluated in `f64` over
/// the stored `f32` values of its sources, in the listed order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Derivation {
    /// Input features or learned parameters.
    Input,
    /// Graph-structural data (normalization coefficients, sampled index lists).
    Structure,
    /// Cell-wise copy of another step.
    Copy { source: StepId },
    /// `out[d] = Σ_t weights[t] · sources[t][d]`.
    WeightedRows { sources: Vec<StepId>, weights: StepId },
    /// `out[d] = Σ_t (1/|sources|) · sources[t][d]`; zero when empty.
    MeanRows { sources: Vec<StepId> },
    /// Column mean; each column is summed in ascending value order so the
    /// result does not depend on row order.
    ColumnMean { sources: Vec<StepId> },
    /// `out[o] = Σ_k matrix[o, k] · vector[k]`.
    MatVec { matrix: StepId, vector: StepId },
    /// `out[d] = Σ_t sources[t][d]`.
    Sum { sources: Vec<StepId> },
    /// `out[d] = max(0, source[d])`.
    Relu { source: StepId },
    /// `out[t] = leaky(a[..h]·center + a[h..]·neighbors[t])`.
    AttentionScores {
        attention: StepId,
        center: StepId,
        neighbors: Vec<StepId>,
        slope: f32,
    },
    /// Max-shifted softmax over all cells of `source`.
    Softmax { source: StepId },
    /// `out[0] = Σ_d left[d] · right[d]`.
    Dot { left: StepId, right: StepId },
    /// `[score, 0]`: two-class logits from a scalar link score.
    LinkLogits { score: StepId },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step_id: StepId,
    pub layer_index: usize,
    pub node_scope: Option<usize>,
    pub symbol: Symbol,
    pub role: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
    pub stage_order: u32,
    pub derivation: Derivation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeCurve {
    pub source: Option<usize>,
    pub target: Option<usize>,
    pub coefficient: f32,
    pub icon: IconKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLayer {
    pub index: usize,
    pub name: String,
    pub kind: LayerKind,
    pub formula_id: FormulaId,
    pub formula_ids: Vec<FormulaId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_seed: Option<u64>,
    pub edge_curves: Vec<EdgeCurve>,
    pub steps: Vec<TraceStep>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub variant: Variant,
    pub task: Task,
    pub dataset_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphSummary {
    pub node_ids: Vec<String>,
    pub edges: Vec<[usize; 2]>,
}

/// A complete record of one forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub schema_version: u32,
    pub trace_id: String,
    pub model: ModelDescriptor,
    pub graph: GraphSummary,
    /// Prediction target in the traced graph's node indices.
    pub target: Target,
    pub layers: Vec<TraceLayer>,
    pub prediction_step: StepId,
    #[serde(skip)]
    index: Vec<(usize, usize)>,
}

/// One operand of a cell computation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub step_id: StepId,
    pub cell: usize,
    pub coefficient: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRef {
    pub step_id: StepId,
    pub cell: usize,
}

/// The arithmetic that produced one stored cell.
///
/// For `softmax_cell`, `terms` lists every logit of the row and the term at
/// the target's own cell index is the numerator. `leaky` carries its slope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub target: CellRef,
    pub op_kind: OpKind,
    pub terms: Vec<Term>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope: Option<f64>,
    pub value: f32,
}

/// Relative-or-absolute tolerance used when checking provenance.
pub const PROVENANCE_TOLERANCE: f64 = 1e-6;

impl Provenance {
    /// Re-evaluates the cell from its terms using the trace's stored values.
    pub fn recompute(&self, trace: &Trace) -> Result<f64> {
        let mut operands = Vec::with_capacity(self.terms.len());
        for t in &self.terms {
            let step = trace.step(t.step_id)?;
            let v = *step.values.get(t.cell).ok_or(Error::IndexOutOfRange {
                index: t.cell,
                len: step.values.len(),
            })?;
            operands.push((f64::from(v), t.coefficient));
        }
        let linear = || operands.iter().fold(0.0f64, |acc, (v, c)| acc + c * v);
        Ok(match self.op_kind {
            OpKind::WeightedSum
            | OpKind::MatmulCell
            | OpKind::Add
            | OpKind::MeanCell
            | OpKind::DotCell => linear(),
            OpKind::MaxZero => linear().max(0.0),
            OpKind::Leaky => {
                let pre = linear();
                if pre >= 0.0 {
                    pre
                } else {
                    self.slope.unwrap_or(0.0) * pre
                }
            }
            OpKind::SoftmaxCell => {
                let logits: Vec<f64> = operands.iter().map(|(v, c)| c * v).collect();
                let probs = crate::kernels::softmax_over_neighborhood(&logits)?;
                probs[self.target.cell]
            }
        })
    }

    /// Whether the recomputed value matches the stored one.
    pub fn is_sound(&self, trace: &Trace) -> Result<bool> {
        let recomputed = self.recompute(trace)?;
        let stored = f64::from(self.value);
        Ok((recomputed - stored).abs() <= PROVENANCE_TOLERANCE * stored.abs().max(1.0))
    }
}

impl Trace {
    fn rebuild_index(&mut self) {
        let mut index = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            for (si, step) in layer.steps.iter().enumerate() {
                let id = step.step_id as usize;
                if index.len() <= id {
                    index.resize(id + 1, (usize::MAX, usize::MAX));
                }
                index[id] = (li, si);
            }
        }
        self.index = index;
    }

    pub fn step(&self, id: StepId) -> Result<&TraceStep> {
        match self.index.get(id as usize) {
            Some(&(l, s)) if l != usize::MAX => Ok(&self.layers[l].steps[s]),
            _ => Err(Error::UnknownStep(id)),
        }
    }

    pub fn step_count(&self) -> usize {
        self.layers.iter().map(|l| l.steps.len()).sum()
    }

    pub fn steps(&self) -> impl Iterator<Item = &TraceStep> {
        self.layers.iter().flat_map(|l| l.steps.iter())
    }

    pub fn layer(&self, layer_index: usize) -> Result<&TraceLayer> {
        self.layers.get(layer_index).ok_or(Error::UnknownLayer(layer_index))
    }

    pub fn node_count(&self) -> usize {
        self.graph.node_ids.len()
    }

    /// Values of the final logits step.
    pub fn final_logits(&self) -> Result<&[f32]> {
        Ok(&self.step(self.prediction_step)?.values)
    }

    /// All steps of a layer tagged with `symbol`.
    pub fn symbol_lookup(&self, layer_index: usize, symbol: Symbol) -> Result<Vec<StepId>> {
        Ok(self
            .layer(layer_index)?
            .steps
            .iter()
            .filter(|s| s.symbol == symbol)
            .map(|s| s.step_id)
            .collect())
    }

    /// Previous-layer nodes that feed `node` in a message-passing layer,
    /// with the coefficients drawn on their curves.
    pub fn neighborhood_highlight(&self, layer_index: usize, node: usize) -> Result<(Vec<usize>, Vec<f32>)> {
        let layer = self.layer(layer_index)?;
        if !layer.kind.is_message_passing() {
            return Err(Error::UnknownLayer(layer_index));
        }
        if node >= self.node_count() {
            return Err(Error::UnknownNode(node));
        }
        Ok(layer
            .edge_curves
            .iter()
            .filter(|c| c.target == Some(node))
            .filter_map(|c| Some((c.source?, c.coefficient)))
            .unzip())
    }

    /// Arithmetic behind one cell of a computed step.
    pub fn cell_provenance(&self, step_id: StepId, cell: usize) -> Result<Provenance> {
        let step = self.step(step_id)?;
        if cell >= step.values.len() {
            return Err(Error::IndexOutOfRange {
                index: cell,
                len: step.values.len(),
            });
        }
        let term = |step_id: StepId, cell: usize, coefficient: f64| Term {
            step_id,
            cell,
            coefficient,
        };
        let values_of = |id: StepId| -> Result<&[f32]> { Ok(&self.step(id)?.values) };
        let mut slope = None;
        let (op_kind, terms) = match &step.derivation {
            Derivation::Input | Derivation::Structure => {
                return Err(Error::InputStepHasNoProvenance(step_id))
            }
            Derivation::Copy { source } => (OpKind::Add, vec![term(*source, cell, 1.0)]),
            Derivation::WeightedRows { sources, weights } => {
                let w = values_of(*weights)?;
                let terms = sources
                    .iter()
                    .zip(w)
                    .map(|(&s, &c)| term(s, cell, f64::from(c)))
                    .collect();
                (OpKind::WeightedSum, terms)
            }
            Derivation::MeanRows { sources } => {
                let inv = 1.0 / sources.len() as f64;
                (
                    OpKind::MeanCell,
                    sources.iter().map(|&s| term(s, cell, inv)).collect(),
                )
            }
            Derivation::ColumnMean { sources } => {
                let inv = 1.0 / sources.len() as f64;
                let mut column = Vec::with_capacity(sources.len());
                for &s in sources {
                    column.push((values_of(s)?[cell], s));
                }
                column.sort_by(|a, b| a.0.total_cmp(&b.0));
                (
                    OpKind::MeanCell,
                    column.into_iter().map(|(_, s)| term(s, cell, inv)).collect(),
                )
            }
            Derivation::MatVec { matrix, vector } => {
                let m = values_of(*matrix)?;
                let cols = values_of(*vector)?.len();
                let row = &m[cell * cols..(cell + 1) * cols];
                (
                    OpKind::MatmulCell,
                    row.iter()
                        .enumerate()
                        .map(|(k, &w)| term(*vector, k, f64::from(w)))
                        .collect(),
                )
            }
            Derivation::Sum { sources } => (
                OpKind::Add,
                sources.iter().map(|&s| term(s, cell, 1.0)).collect(),
            ),
            Derivation::Relu { source } => (OpKind::MaxZero, vec![term(*source, cell, 1.0)]),
            Derivation::AttentionScores {
                attention,
                center,
                neighbors,
                slope: s,
            } => {
                let a = values_of(*attention)?;
                let half = a.len() / 2;
                let mut terms = Vec::with_capacity(a.len());
                terms.extend((0..half).map(|k| term(*center, k, f64::from(a[k]))));
                terms.extend((0..half).map(|k| term(neighbors[cell], k, f64::from(a[half + k]))));
                slope = Some(f64::from(*s));
                (OpKind::Leaky, terms)
            }
            Derivation::Softmax { source } => {
                let n = values_of(*source)?.len();
                (
                    OpKind::SoftmaxCell,
                    (0..n).map(|t| term(*source, t, 1.0)).collect(),
                )
            }
            Derivation::Dot { left, right } => {
                let l = values_of(*left)?;
                (
                    OpKind::DotCell,
                    l.iter()
                        .enumerate()
                        .map(|(d, &u)| term(*right, d, f64::from(u)))
                        .collect(),
                )
            }
            Derivation::LinkLogits { score } => {
                let terms = if cell == 0 { vec![term(*score, 0, 1.0)] } else { vec![] };
                (OpKind::Add, terms)
            }
        };
        Ok(Provenance {
            target: CellRef { step_id, cell },
            op_kind,
            terms,
            slope,
            value: step.values[cell],
        })
    }

    /// Checks the per-layer step inventory, reveal ordering and curve
    /// consistency.
    pub fn check_completeness(&self) -> Result<()> {
        let n = self.node_count();
        for layer in &self.layers {
            let kind = layer.kind;
            let mut present: BTreeMap<Symbol, BTreeSet<usize>> = BTreeMap::new();
            let mut stages: BTreeMap<Symbol, BTreeSet<u32>> = BTreeMap::new();
            for s in &layer.steps {
                if s.values.len() != s.shape.iter().product::<usize>() {
                    return Err(Error::IncompleteTrace(format!(
                        "step {} has {} values for shape {:?}",
                        s.step_id,
                        s.values.len(),
                        s.shape
                    )));
                }
                if let Some(node) = s.node_scope {
                    present.entry(s.symbol).or_default().insert(node);
                }
                stages.entry(s.symbol).or_default().insert(s.stage_order);
            }
            for &sym in kind.required_node_symbols() {
                let have = present.get(&sym).map_or(0, BTreeSet::len);
                if have != n {
                    return Err(Error::IncompleteTrace(format!(
                        "layer {} ({}) has {sym} steps for {have} of {n} nodes",
                        layer.index, layer.name
                    )));
                }
            }
            // reveal order must follow the computation order of the kind
            let mut ranked: Vec<(u32, u32, Symbol)> = Vec::new();
            for (sym, st) in &stages {
                let rank = kind.symbol_rank(*sym).ok_or_else(|| {
                    Error::IncompleteTrace(format!("symbol {sym} in {kind} layer {}", layer.index))
                })?;
                if st.len() != 1 {
                    return Err(Error::IncompleteTrace(format!(
                        "symbol {sym} uses several stages in layer {}",
                        layer.index
                    )));
                }
                ranked.push((rank, *st.iter().next().unwrap(), *sym));
            }
            ranked.sort();
            for pair in ranked.windows(2) {
                let (r0, s0, a) = pair[0];
                let (r1, s1, b) = pair[1];
                if (r0 < r1 && s0 >= s1) || (r0 == r1 && s0 != s1) {
                    return Err(Error::IncompleteTrace(format!(
                        "stage order of {a} and {b} in layer {} does not follow the computation",
                        layer.index
                    )));
                }
            }
            self.check_curves(layer)?;
        }
        self.step(self.prediction_step)?;
        Ok(())
    }

    fn check_curves(&self, layer: &TraceLayer) -> Result<()> {
        let coef_symbol = match layer.kind {
            LayerKind::Gcn => Symbol::Coeff,
            LayerKind::Gat => Symbol::Alpha,
            _ => return Ok(()),
        };
        for step in layer.steps.iter().filter(|s| s.symbol == coef_symbol) {
            let node = step.node_scope.unwrap_or(usize::MAX);
            let curves: Vec<f32> = layer
                .edge_curves
                .iter()
                .filter(|c| c.target == Some(node))
                .map(|c| c.coefficient)
                .collect();
            if curves != step.values {
                return Err(Error::IncompleteTrace(format!(
                    "edge curves into node {node} disagree with step {}",
                    step.step_id
                )));
            }
        }
        Ok(())
    }

    /// Deterministic compact JSON; fails on an incomplete trace.
    pub fn to_json(&self) -> Result<Vec<u8>> {
        self.check_completeness()?;
        Ok(self.to_json_unchecked())
    }

    fn to_json_unchecked(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("trace serialization is infallible")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Trace> {
        let mut t: Trace = serde_json::from_slice(bytes).map_err(|e| Error::ParseError(e.to_string()))?;
        if t.schema_version != SCHEMA_VERSION {
            return Err(Error::UnsupportedVersion(t.schema_version));
        }
        t.rebuild_index();
        Ok(t)
    }
}

/// Sink for the steps a forward pass emits.
pub trait Recorder {
    /// Opens a new layer; subsequent steps and curves belong to it.
    fn begin_layer(&mut self, header: LayerHeader) -> Result<usize>;
    fn record(&mut self, step: NewStep) -> Result<StepId>;
    fn curve(&mut self, curve: EdgeCurve);
    /// Cheap recorders may return false so kernels skip per-cell bookkeeping.
    fn is_recording(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone)]
pub struct LayerHeader {
    pub name: String,
    pub kind: LayerKind,
    pub formula_ids: Vec<FormulaId>,
    pub sample_seed: Option<u64>,
}

impl LayerHeader {
    /// Header with an automatic name such as `GCNConv2`.
    pub fn new(kind: LayerKind, formula_ids: Vec<FormulaId>) -> Self {
        LayerHeader {
            name: String::new(),
            kind,
            formula_ids,
            sample_seed: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NewStep {
    pub node_scope: Option<usize>,
    pub symbol: Symbol,
    pub role: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
    pub stage_order: u32,
    pub derivation: Derivation,
}

impl NewStep {
    /// A step whose stage is the symbol's rank in `kind`.
    pub fn ranked(
        kind: LayerKind,
        node_scope: Option<usize>,
        symbol: Symbol,
        role: impl Into<String>,
        shape: Vec<usize>,
        values: Vec<f32>,
        derivation: Derivation,
    ) -> Self {
        NewStep {
            node_scope,
            symbol,
            role: role.into(),
            shape,
            values,
            stage_order: kind.symbol_rank(symbol).unwrap_or(u32::MAX),
            derivation,
        }
    }
}

/// Discards everything; hands out sequential ids.
#[derive(Debug, Default)]
pub struct NullRecorder {
    next: StepId,
    layers: usize,
}

impl Recorder for NullRecorder {
    fn begin_layer(&mut self, _header: LayerHeader) -> Result<usize> {
        self.layers += 1;
        Ok(self.layers - 1)
    }

    fn record(&mut self, _step: NewStep) -> Result<StepId> {
        self.next += 1;
        Ok(self.next - 1)
    }

    fn curve(&mut self, _curve: EdgeCurve) {}

    fn is_recording(&self) -> bool {
        false
    }
}

/// Builds a [`Trace`], enforcing shape and stage-order rules as steps arrive.
#[derive(Debug, Default)]
pub struct TraceRecorder {
    layers: Vec<TraceLayer>,
    next: StepId,
    stage_by_rank: BTreeMap<u32, u32>,
}

impl TraceRecorder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn layers(&self) -> &[TraceLayer] {
        &self.layers
    }

    /// Appends an input-derived step to the currently open layer.
    pub fn record_step(
        &mut self,
        layer_index: usize,
        node_scope: Option<usize>,
        symbol: Symbol,
        shape: Vec<usize>,
        values: Vec<f32>,
        stage_order: u32,
    ) -> Result<StepId> {
        if layer_index + 1 != self.layers.len() {
            return Err(Error::UnknownLayer(layer_index));
        }
        self.record(NewStep {
            node_scope,
            symbol,
            role: symbol.as_str().to_string(),
            shape,
            values,
            stage_order,
            derivation: Derivation::Input,
        })
    }

    fn check_stage(&self, kind: LayerKind, symbol: Symbol, stage: u32) -> Result<u32> {
        let rank = kind.symbol_rank(symbol).ok_or_else(|| {
            Error::StageOrderViolation(format!("symbol {symbol} does not occur in a {kind} layer"))
        })?;
        if let Some(&s) = self.stage_by_rank.get(&rank) {
            if s != stage {
                return Err(Error::StageOrderViolation(format!(
                    "{symbol} at stage {stage}, but its computation step is already at stage {s}"
                )));
            }
        }
        for (&r, &s) in &self.stage_by_rank {
            if (r < rank && s >= stage) || (r > rank && s <= stage) {
                return Err(Error::StageOrderViolation(format!(
                    "{symbol} at stage {stage} is out of order with an existing step at stage {s}"
                )));
            }
        }
        Ok(rank)
    }

    /// Seals the trace. The id is a digest of the content, so equal inputs
    /// always produce equal ids.
    pub fn finish(
        self,
        model: ModelDescriptor,
        graph: GraphSummary,
        target: Target,
        prediction_step: StepId,
    ) -> Result<Trace> {
        let mut trace = Trace {
            schema_version: SCHEMA_VERSION,
            trace_id: String::new(),
            model,
            graph,
            target,
            layers: self.layers,
            prediction_step,
            index: Vec::new(),
        };
        trace.rebuild_index();
        trace.check_completeness()?;
        let digest = Sha256::digest(trace.to_json_unchecked());
        trace.trace_id = digest[..8].iter().map(|b| format!("{b:02x}")).collect();
        Ok(trace)
    }
}

impl Recorder for TraceRecorder {
    fn begin_layer(&mut self, header: LayerHeader) -> Result<usize> {
        let index = self.layers.len();
        let name = if header.name.is_empty() {
            let same = self.layers.iter().filter(|l| l.kind == header.kind).count();
            format!("{}{}", header.kind.display_base(), same + 1)
        } else {
            header.name
        };
        let formula_id = *header
            .formula_ids
            .last()
            .ok_or_else(|| Error::IncompleteTrace(format!("layer {name} has no formula")))?;
        self.layers.push(TraceLayer {
            index,
            name,
            kind: header.kind,
            formula_id,
            formula_ids: header.formula_ids,
            sample_seed: header.sample_seed,
            edge_curves: Vec::new(),
            steps: Vec::new(),
        });
        self.stage_by_rank.clear();
        Ok(index)
    }

    fn record(&mut self, step: NewStep) -> Result<StepId> {
        let layer_index = self
            .layers
            .len()
            .checked_sub(1)
            .ok_or(Error::UnknownLayer(0))?;
        let expected: usize = step.shape.iter().product();
        if expected != step.values.len() {
            return Err(Error::shape(format!(
                "{} values for shape {:?}",
                step.values.len(),
                step.shape
            )));
        }
        let kind = self.layers[layer_index].kind;
        let rank = self.check_stage(kind, step.symbol, step.stage_order)?;
        self.stage_by_rank.insert(rank, step.stage_order);
        let id = self.next;
        self.next += 1;
        self.layers[layer_index].steps.push(TraceStep {
            step_id: id,
            layer_index,
            node_scope: step.node_scope,
            symbol: step.symbol,
            role: step.role,
            shape: step.shape,
            values: step.values,
            stage_order: step.stage_order,
            derivation: step.derivation,
        });
        Ok(id)
    }

    fn curve(&mut self, curve: EdgeCurve) {
        if let Some(layer) = self.layers.last_mut() {
            layer.edge_curves.push(curve);
        }
    }
}
