//! Forward kernels for message-passing layers and task heads.
//!
//! Each kernel opens one trace layer on the recorder it is given and emits
//! its intermediate tensors as steps. Reductions accumulate in `f64`, in
//! ascending node / column order, and every step stores `f32` values. A step
//! is always computed from the stored values of its source steps, so the
//! numbers are the same whether or not a trace is being kept.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NeighborhoodView};
use crate::tensor::Matrix;
use crate::trace::{
    Derivation, EdgeCurve, FormulaId, IconKind, LayerHeader, LayerKind, NewStep, Recorder, StepId,
    Symbol,
};

pub const DEFAULT_LEAKY_SLOPE: f32 = 0.2;
pub const DEFAULT_SAMPLE_SIZE: usize = 25;

/// Weight matrix `[out × in]` plus bias `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    pub weight: Matrix,
    pub bias: Vec<f32>,
}

impl DenseParams {
    pub fn new(weight: Matrix, bias: Vec<f32>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::shape(format!(
                "bias has length {}, weight has {} rows",
                bias.len(),
                weight.rows()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Single-head attention parameters. `attention` is `[2·out]`: the first
/// half scores the receiving node, the second half the sending node.
#[derive(Debug, Clone, PartialEq)]
pub struct GatParams {
    pub weight: Matrix,
    pub attention: Vec<f32>,
    pub leaky_slope: f32,
}

impl GatParams {
    pub fn new(weight: Matrix, attention: Vec<f32>, leaky_slope: f32) -> Result<Self> {
        if attention.len() != 2 * weight.rows() {
            return Err(Error::shape(format!(
                "attention vector has length {}, expected {}",
                attention.len(),
                2 * weight.rows()
            )));
        }
        if !(leaky_slope > 0.0 && leaky_slope < 1.0) {
            return Err(Error::shape(format!("leaky slope {leaky_slope} outside (0, 1)")));
        }
        Ok(Self {
            weight,
            attention,
            leaky_slope,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SageParams {
    pub w_self: Matrix,
    pub w_neigh: Matrix,
    pub bias: Vec<f32>,
    pub sample_size: usize,
}

impl SageParams {
    pub fn new(w_self: Matrix, w_neigh: Matrix, bias: Vec<f32>, sample_size: usize) -> Result<Self> {
        if w_self.rows() != w_neigh.rows() || w_self.cols() != w_neigh.cols() {
            return Err(Error::shape("W_self and W_neigh differ in shape"));
        }
        if bias.len() != w_self.rows() {
            return Err(Error::shape(format!(
                "bias has length {}, expected {}",
                bias.len(),
                w_self.rows()
            )));
        }
        if sample_size == 0 {
            return Err(Error::shape("sample size must be at least 1"));
        }
        Ok(Self {
            w_self,
            w_neigh,
            bias,
            sample_size,
        })
    }
}

/// Dense layers with rectifiers between them; the last layer emits logits.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<DenseParams>,
}

impl MlpParams {
    pub fn new(layers: Vec<DenseParams>) -> Result<Self> {
        for (t, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::shape(format!(
                    "mlp layer {} outputs {} but layer {} expects {}",
                    t,
                    pair[0].out_dim(),
                    t + 1,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Self { layers })
    }
}

/// Row features flowing between layers, with the trace steps that hold them.
#[derive(Debug, Clone, PartialEq)]
pub struct Activations {
    pub values: Matrix,
    /// One step per row, or empty for raw inputs that were never recorded.
    pub steps: Vec<StepId>,
    /// Whether row `r` is node `r` (false for a pooled graph-level row).
    pub node_scoped: bool,
}

impl Activations {
    pub fn input(values: Matrix) -> Self {
        Self {
            values,
            steps: Vec::new(),
            node_scoped: true,
        }
    }

    fn scope(&self, r: usize) -> Option<usize> {
        self.node_scoped.then_some(r)
    }

    /// Step ids of the rows as seen from a new layer: copies of the
    /// previous layer's outputs, or fresh input steps.
    fn bind_inputs(&self, kind: LayerKind, rec: &mut dyn Recorder) -> Result<Vec<StepId>> {
        let mut ids = Vec::with_capacity(self.values.rows());
        for r in 0..self.values.rows() {
            let derivation = match self.steps.get(r) {
                Some(&source) => Derivation::Copy { source },
                None => Derivation::Input,
            };
            ids.push(rec.record(NewStep::ranked(
                kind,
                self.scope(r),
                Symbol::Xj,
                "input features",
                vec![self.values.cols()],
                self.values.row(r).to_vec(),
                derivation,
            ))?);
        }
        Ok(ids)
    }
}

fn record_matrix(
    rec: &mut dyn Recorder,
    kind: LayerKind,
    symbol: Symbol,
    role: &str,
    m: &Matrix,
) -> Result<StepId> {
    rec.record(NewStep::ranked(
        kind,
        None,
        symbol,
        role,
        vec![m.rows(), m.cols()],
        m.as_slice().to_vec(),
        Derivation::Input,
    ))
}

fn record_vector(rec: &mut dyn Recorder, kind: LayerKind, symbol: Symbol, role: &str, v: &[f32]) -> Result<StepId> {
    rec.record(NewStep::ranked(
        kind,
        None,
        symbol,
        role,
        vec![v.len()],
        v.to_vec(),
        Derivation::Input,
    ))
}

fn check_input(g: &Graph, x: &Matrix, in_dim: usize) -> Result<()> {
    if x.rows() != g.node_count() {
        return Err(Error::shape(format!(
            "{} feature rows for {} nodes",
            x.rows(),
            g.node_count()
        )));
    }
    if x.cols() != in_dim {
        return Err(Error::shape(format!(
            "features have {} columns, layer expects {in_dim}",
            x.cols()
        )));
    }
    Ok(())
}

pub fn relu(v: &[f32]) -> Vec<f32> {
    v.iter().map(|&x| x.max(0.0)).collect()
}

pub fn leaky_relu(v: &[f32], slope: f32) -> Vec<f32> {
    v.iter().map(|&x| if x >= 0.0 { x } else { slope * x }).collect()
}

#[inline]
fn leaky(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted softmax.
pub fn softmax_over_neighborhood(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() || logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `Σ_t weights[t] · rows[t]` over stored `f32` values.
fn weighted_rows(x: &Matrix, rows: &[usize], weights: &[f64]) -> Vec<f32> {
    (0..x.cols())
        .map(|d| {
            let mut acc = 0.0f64;
            for (&j, &w) in rows.iter().zip(weights) {
                acc += w * f64::from(x.get(j, d));
            }
            acc as f32
        })
        .collect()
}

fn add_rows(a: &[f32], b: &[f32]) -> Vec<f32> {
    a.iter()
        .zip(b)
        .map(|(&p, &q)| (f64::from(p) + f64::from(q)) as f32)
        .collect()
}

/// `relu(W · Σ_{j ∈ N(i) ∪ i} x_j / sqrt(d_i d_j) + b)` for every node.
pub fn gcn_layer_forward(g: &Graph, x: &Activations, p: &DenseParams, rec: &mut dyn Recorder) -> Result<Activations> {
    const K: LayerKind = LayerKind::Gcn;
    check_input(g, &x.values, p.in_dim())?;
    let n = g.node_count();
    rec.begin_layer(LayerHeader::new(K, vec![FormulaId::GcnConv]))?;
    let w_id = record_matrix(rec, K, Symbol::W, "weight matrix W", &p.weight)?;
    let b_id = record_vector(rec, K, Symbol::B, "bias b", &p.bias)?;
    let x_ids = x.bind_inputs(K, rec)?;

    let mut coeff_ids = Vec::with_capacity(n);
    let mut members = Vec::with_capacity(n);
    let mut coeffs = Vec::with_capacity(n);
    for i in 0..n {
        let view = g.neighborhood(i)?;
        let stored: Vec<f32> = view.coefficients.iter().map(|&c| c as f32).collect();
        for (&j, &c) in view.members.iter().zip(&stored) {
            rec.curve(EdgeCurve {
                source: Some(j),
                target: Some(i),
                coefficient: c,
                icon: IconKind::None,
            });
        }
        coeff_ids.push(rec.record(NewStep::ranked(
            K,
            Some(i),
            Symbol::Coeff,
            "normalization 1/sqrt(d_i d_j)",
            vec![stored.len()],
            stored.clone(),
            Derivation::Structure,
        ))?);
        members.push(view.members);
        coeffs.push(stored.into_iter().map(f64::from).collect::<Vec<_>>());
    }

    let mut agg = Vec::with_capacity(n);
    let mut agg_ids = Vec::with_capacity(n);
    for i in 0..n {
        let v = weighted_rows(&x.values, &members[i], &coeffs[i]);
        agg_ids.push(rec.record(NewStep::ranked(
            K,
            Some(i),
            Symbol::Agg,
            "normalized neighbor sum",
            vec![v.len()],
            v.clone(),
            Derivation::WeightedRows {
                sources: members[i].iter().map(|&j| x_ids[j]).collect(),
                weights: coeff_ids[i],
            },
        ))?);
        agg.push(v);
    }
    dense_tail(K, n, &agg, &agg_ids, &p.weight, w_id, Some((&p.bias, b_id)), rec)
}

/// Shared `W·v (+ b) → relu` tail. Returns the activation rows.
#[allow(clippy::too_many_arguments)]
fn dense_tail(
    kind: LayerKind,
    n: usize,
    rows: &[Vec<f32>],
    row_ids: &[StepId],
    weight: &Matrix,
    w_id: StepId,
    bias: Option<(&[f32], StepId)>,
    rec: &mut dyn Recorder,
) -> Result<Activations> {
    let mut wx = Vec::with_capacity(n);
    let mut wx_ids = Vec::with_capacity(n);
    for i in 0..n {
        let v = weight.matvec(&rows[i])?;
        wx_ids.push(rec.record(NewStep::ranked(
            kind,
            Some(i),
            Symbol::Wx,
            "weight matrix applied",
            vec![v.len()],
            v.clone(),
            Derivation::MatVec {
                matrix: w_id,
                vector: row_ids[i],
            },
        ))?);
        wx.push(v);
    }
    let (pre, pre_ids) = match bias {
        Some((b, b_id)) => {
            let mut out = Vec::with_capacity(n);
            let mut ids = Vec::with_capacity(n);
            for i in 0..n {
                let v = add_rows(&wx[i], b);
                ids.push(rec.record(NewStep::ranked(
                    kind,
                    Some(i),
                    Symbol::BiasAdd,
                    "bias added",
                    vec![v.len()],
                    v.clone(),
                    Derivation::Sum {
                        sources: vec![wx_ids[i], b_id],
                    },
                ))?);
                out.push(v);
            }
            (out, ids)
        }
        None => (wx, wx_ids),
    };
    activate(kind, &pre, &pre_ids, true, rec)
}

fn activate(
    kind: LayerKind,
    pre: &[Vec<f32>],
    pre_ids: &[StepId],
    node_scoped: bool,
    rec: &mut dyn Recorder,
) -> Result<Activations> {
    let n = pre.len();
    let cols = pre.first().map_or(0, Vec::len);
    let mut out = Matrix::zeros(n, cols);
    let mut ids = Vec::with_capacity(n);
    for i in 0..n {
        let v = relu(&pre[i]);
        out.row_mut(i).copy_from_slice(&v);
        ids.push(rec.record(NewStep::ranked(
            kind,
            node_scoped.then_some(i),
            Symbol::Activation,
            "ReLU",
            vec![v.len()],
            v,
            Derivation::Relu { source: pre_ids[i] },
        ))?);
    }
    Ok(Activations {
        values: out,
        steps: ids,
        node_scoped,
    })
}

/// Attention of one node over its closed neighborhood.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRow {
    /// Members with `α` as coefficients.
    pub view: NeighborhoodView,
    /// Raw scores `e_ij`, aligned with `view.members`.
    pub scores: Vec<f64>,
}

struct GatState {
    wx: Vec<Vec<f32>>,
    members: Vec<Vec<usize>>,
    scores: Vec<Vec<f32>>,
    alphas: Vec<Vec<f32>>,
}

fn gat_compute(g: &Graph, x: &Matrix, p: &GatParams) -> Result<GatState> {
    check_input(g, x, p.weight.cols())?;
    let n = g.node_count();
    let h = p.weight.rows();
    let slope = f64::from(p.leaky_slope);
    let wx: Vec<Vec<f32>> = (0..n).map(|j| p.weight.matvec(x.row(j))).collect::<Result<_>>()?;
    let mut members = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    let mut alphas = Vec::with_capacity(n);
    for i in 0..n {
        let m = g.closed_neighborhood(i)?;
        let e: Vec<f32> = m
            .iter()
            .map(|&j| {
                let mut acc = 0.0f64;
                for k in 0..h {
                    acc += f64::from(p.attention[k]) * f64::from(wx[i][k]);
                }
                for k in 0..h {
                    acc += f64::from(p.attention[h + k]) * f64::from(wx[j][k]);
                }
                leaky(acc, slope) as f32
            })
            .collect();
        let wide: Vec<f64> = e.iter().map(|&v| f64::from(v)).collect();
        let a: Vec<f32> = softmax_over_neighborhood(&wide)?
            .into_iter()
            .map(|v| v as f32)
            .collect();
        members.push(m);
        scores.push(e);
        alphas.push(a);
    }
    Ok(GatState {
        wx,
        members,
        scores,
        alphas,
    })
}

/// Attention coefficients `α_ij` and raw scores `e_ij` for every node.
pub fn gat_attention(g: &Graph, x: &Matrix, p: &GatParams) -> Result<Vec<AttentionRow>> {
    let st = gat_compute(g, x, p)?;
    Ok((0..g.node_count())
        .map(|i| AttentionRow {
            view: NeighborhoodView {
                center: i,
                members: st.members[i].clone(),
                coefficients: st.alphas[i].iter().map(|&a| f64::from(a)).collect(),
            },
            scores: st.scores[i].iter().map(|&e| f64::from(e)).collect(),
        })
        .collect())
}

/// `relu(Σ_{j ∈ N(i) ∪ i} α_ij · W x_j)`; no bias term.
pub fn gat_layer_forward(g: &Graph, x: &Activations, p: &GatParams, rec: &mut dyn Recorder) -> Result<Activations> {
    const K: LayerKind = LayerKind::Gat;
    let st = gat_compute(g, &x.values, p)?;
    let n = g.node_count();
    rec.begin_layer(LayerHeader::new(
        K,
        vec![FormulaId::GatScore1, FormulaId::GatScore2, FormulaId::GatScore3],
    ))?;
    let w_id = record_matrix(rec, K, Symbol::W, "weight matrix W", &p.weight)?;
    let a_id = record_vector(rec, K, Symbol::A, "attention vector a", &p.attention)?;
    let x_ids = x.bind_inputs(K, rec)?;

    let mut wx_ids = Vec::with_capacity(n);
    for j in 0..n {
        wx_ids.push(rec.record(NewStep::ranked(
            K,
            Some(j),
            Symbol::Wx,
            "transformed features W x_j",
            vec![st.wx[j].len()],
            st.wx[j].clone(),
            Derivation::MatVec {
                matrix: w_id,
                vector: x_ids[j],
            },
        ))?);
    }
    let mut e_ids = Vec::with_capacity(n);
    for i in 0..n {
        e_ids.push(rec.record(NewStep::ranked(
            K,
            Some(i),
            Symbol::Eij,
            "attention scores e_ij",
            vec![st.scores[i].len()],
            st.scores[i].clone(),
            Derivation::AttentionScores {
                attention: a_id,
                center: wx_ids[i],
                neighbors: st.members[i].iter().map(|&j| wx_ids[j]).collect(),
                slope: p.leaky_slope,
            },
        ))?);
    }
    let mut alpha_ids = Vec::with_capacity(n);
    for i in 0..n {
        for (&j, &a) in st.members[i].iter().zip(&st.alphas[i]) {
            rec.curve(EdgeCurve {
                source: Some(j),
                target: Some(i),
                coefficient: a,
                icon: IconKind::None,
            });
        }
        alpha_ids.push(rec.record(NewStep::ranked(
            K,
            Some(i),
            Symbol::Alpha,
            "attention coefficients alpha_ij",
            vec![st.alphas[i].len()],
            st.alphas[i].clone(),
            Derivation::Softmax { source: e_ids[i] },
        ))?);
    }
    let wx = Matrix::from_rows(&st.wx)?;
    let mut agg = Vec::with_capacity(n);
    let mut agg_ids = Vec::with_capacity(n);
    for i in 0..n {
        let weights: Vec<f64> = st.alphas[i].iter().map(|&a| f64::from(a)).collect();
        let v = weighted_rows(&wx, &st.members[i], &weights);
        agg_ids.push(rec.record(NewStep::ranked(
            K,
            Some(i),
            Symbol::Agg,
            "attention-weighted sum",
            vec![v.len()],
            v.clone(),
            Derivation::WeightedRows {
                sources: st.members[i].iter().map(|&j| wx_ids[j]).collect(),
                weights: alpha_ids[i],
            },
        ))?);
        agg.push(v);
    }
    activate(K, &agg, &agg_ids, true, rec)
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed used by layer `layer` of a pass started with `seed`.
pub fn layer_seed(seed: u64, layer: usize) -> u64 {
    mix64(seed ^ mix64(layer as u64 + 1))
}

/// Uniform sample of `N(i)` without replacement, sorted. Takes every
/// neighbor when there are at most `size` of them.
pub fn sample_neighbors(g: &Graph, i: usize, size: usize, seed: u64) -> Result<Vec<usize>> {
    let nbrs = g.neighbors(i)?;
    if size == 0 {
        return Err(Error::shape("sample size must be at least 1"));
    }
    if nbrs.len() <= size {
        return Ok(nbrs.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ mix64(i as u64)));
    let mut picked: Vec<usize> = index::sample(&mut rng, nbrs.len(), size)
        .into_iter()
        .map(|k| nbrs[k])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Where a SAGE layer gets its neighbor samples from.
#[derive(Debug, Clone, PartialEq)]
pub enum NeighborSampler {
    Seeded(u64),
    /// Replayed lists keyed by node index; nodes without an entry must have
    /// at most `sample_size` neighbors and take all of them.
    Fixed(BTreeMap<usize, Vec<usize>>),
}

impl NeighborSampler {
    pub fn sample(&self, g: &Graph, i: usize, size: usize) -> Result<Vec<usize>> {
        match self {
            NeighborSampler::Seeded(seed) => sample_neighbors(g, i, size, *seed),
            NeighborSampler::Fixed(lists) => match lists.get(&i) {
                Some(list) => {
                    for &j in list {
                        if !g.has_edge(i, j) {
                            return Err(Error::NotANeighbor { i, j });
                        }
                    }
                    let mut list = list.clone();
                    list.sort_unstable();
                    Ok(list)
                }
                None => {
                    let nbrs = g.neighbors(i)?;
                    if nbrs.len() > size {
                        return Err(Error::SpecMismatch(format!(
                            "no recorded neighbor sample for node {i} with {} neighbors",
                            nbrs.len()
                        )));
                    }
                    Ok(nbrs.to_vec())
                }
            },
        }
    }

    fn seed(&self) -> Option<u64> {
        match self {
            NeighborSampler::Seeded(s) => Some(*s),
            NeighborSampler::Fixed(_) => None,
        }
    }
}

/// `relu(W_self x_i + W_neigh · mean_{j ∈ S(i)} x_j + b)`.
pub fn sage_layer_forward(
    g: &Graph,
    x: &Activations,
    p: &SageParams,
    sampler: &NeighborSampler,
    rec: &mut dyn Recorder,
) -> Result<Activations> {
    const K: LayerKind = LayerKind::Sage;
    check_input(g, &x.values, p.w_self.cols())?;
    let n = g.node_count();
    let mut header = LayerHeader::new(K, vec![FormulaId::SageConv]);
    header.sample_seed = sampler.seed();
    rec.begin_layer(header)?;
    let ws_id = record_matrix(rec, K, Symbol::W, "W_self", &p.w_self)?;
    let wn_id = record_matrix(rec, K, Symbol::W, "W_neigh", &p.w_neigh)?;
    let b_id = record_vector(rec, K, Symbol::B, "bias b", &p.bias)?;
    let x_ids = x.bind_inputs(K, rec)?;

    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let s = sampler.sample(g, i, p.sample_size)?;
        let coef = if s.is_empty() { 0.0 } else { (1.0 / s.len() as f64) as f32 };
        for &j in &s {
            rec.curve(EdgeCurve {
                source: Some(j),
                target: Some(i),
                coefficient: coef,
                icon: IconKind::Sample,
            });
        }
        rec.curve(EdgeCurve {
            source: Some(i),
            target: Some(i),
            coefficient: 1.0,
            icon: IconKind::Matmul,
        });
        rec.record(NewStep::ranked(
            K,
            Some(i),
            Symbol::Sample,
            "sampled neighbors",
            vec![s.len()],
            s.iter().map(|&j| j as f32).collect(),
            Derivation::Structure,
        ))?;
        samples.push(s);
    }
    let mut means = Vec::with_capacity(n);
    let mut mean_ids = Vec::with_capacity(n);
    for i in 0..n {
        let s = &samples[i];
        let v = if s.is_empty() {
            vec![0.0; x.values.cols()]
        } else {
            let inv = 1.0 / s.len() as f64;
            weighted_rows(&x.values, s, &vec![inv; s.len()])
        };
        mean_ids.push(rec.record(NewStep::ranked(
            K,
            Some(i),
            Symbol::Mean,
            "mean of sampled neighbors",
            vec![v.len()],
            v.clone(),
            Derivation::MeanRows {
                sources: s.iter().map(|&j| x_ids[j]).collect(),
            },
        ))?);
        means.push(v);
    }
    let mut self_t = Vec::with_capacity(n);
    let mut self_ids = Vec::with_capacity(n);
    let mut neigh_t = Vec::with_capacity(n);
    let mut neigh_ids = Vec::with_capacity(n);
    for i in 0..n {
        let v = p.w_self.matvec(x.values.row(i))?;
        self_ids.push(rec.record(NewStep::ranked(
            K,
            Some(i),
            Symbol::WxSelf,
            "W_self x_i",
            vec![v.len()],
            v.clone(),
            Derivation::MatVec {
                matrix: ws_id,
                vector: x_ids[i],
            },
        ))?);
        self_t.push(v);
        let v = p.w_neigh.matvec(&means[i])?;
        neigh_ids.push(rec.record(NewStep::ranked(
            K,
            Some(i),
            Symbol::WxNeigh,
            "W_neigh mean",
            vec![v.len()],
            v.clone(),
            Derivation::MatVec {
                matrix: wn_id,
                vector: mean_ids[i],
            },
        ))?);
        neigh_t.push(v);
    }
    let mut agg = Vec::with_capacity(n);
    let mut agg_ids = Vec::with_capacity(n);
    for i in 0..n {
        let v = add_rows(&self_t[i], &neigh_t[i]);
        agg_ids.push(rec.record(NewStep::ranked(
            K,
            Some(i),
            Symbol::Agg,
            "self and neighbor terms combined",
            vec![v.len()],
            v.clone(),
            Derivation::Sum {
                sources: vec![self_ids[i], neigh_ids[i]],
            },
        ))?);
        agg.push(v);
    }
    let mut pre = Vec::with_capacity(n);
    let mut pre_ids = Vec::with_capacity(n);
    for i in 0..n {
        let v = add_rows(&agg[i], &p.bias);
        pre_ids.push(rec.record(NewStep::ranked(
            K,
            Some(i),
            Symbol::BiasAdd,
            "bias added",
            vec![v.len()],
            v.clone(),
            Derivation::Sum {
                sources: vec![agg_ids[i], b_id],
            },
        ))?);
        pre.push(v);
    }
    activate(K, &pre, &pre_ids, true, rec)
}

/// Column means; each column is summed in ascending value order, which makes
/// the result independent of row order.
pub fn global_mean_pool(x: &Activations, rec: &mut dyn Recorder) -> Result<Activations> {
    const K: LayerKind = LayerKind::Pool;
    let n = x.values.rows();
    if n == 0 {
        return Err(Error::EmptyGraph);
    }
    rec.begin_layer(LayerHeader::new(K, vec![FormulaId::PoolMean]))?;
    let sources = if x.steps.len() == n {
        x.steps.clone()
    } else {
        x.bind_inputs(K, rec)?
    };
    let inv = 1.0 / n as f64;
    let mut column = Vec::with_capacity(n);
    let pooled: Vec<f32> = (0..x.values.cols())
        .map(|d| {
            column.clear();
            column.extend((0..n).map(|r| x.values.get(r, d)));
            column.sort_by(|a, b| a.total_cmp(b));
            column.iter().fold(0.0f64, |acc, &v| acc + inv * f64::from(v)) as f32
        })
        .collect();
    for r in 0..n {
        rec.curve(EdgeCurve {
            source: x.scope(r),
            target: None,
            coefficient: inv as f32,
            icon: IconKind::Pool,
        });
    }
    let id = rec.record(NewStep::ranked(
        K,
        None,
        Symbol::Pool,
        "mean over all nodes",
        vec![pooled.len()],
        pooled.clone(),
        Derivation::ColumnMean { sources },
    ))?;
    Ok(Activations {
        values: Matrix::from_vec(1, pooled.len(), pooled)?,
        steps: vec![id],
        node_scoped: false,
    })
}

/// Applies the MLP rowwise. One trace layer per dense layer; the last one
/// records `logits` instead of a rectified output.
pub fn mlp_forward(x: &Activations, p: &MlpParams, rec: &mut dyn Recorder) -> Result<Activations> {
    const K: LayerKind = LayerKind::Mlp;
    let mut cur = x.clone();
    for (t, layer) in p.layers.iter().enumerate() {
        if cur.values.cols() != layer.in_dim() {
            return Err(Error::shape(format!(
                "mlp layer {t} expects {} inputs, got {}",
                layer.in_dim(),
                cur.values.cols()
            )));
        }
        let last = t + 1 == p.layers.len();
        let n = cur.values.rows();
        rec.begin_layer(LayerHeader::new(K, vec![FormulaId::MlpAffine]))?;
        let w_id = record_matrix(rec, K, Symbol::W, "weight matrix W", &layer.weight)?;
        let b_id = record_vector(rec, K, Symbol::B, "bias b", &layer.bias)?;
        let in_ids = if cur.steps.len() == n {
            cur.steps.clone()
        } else {
            cur.bind_inputs(K, rec)?
        };
        for r in 0..n {
            rec.curve(EdgeCurve {
                source: cur.scope(r),
                target: cur.scope(r),
                coefficient: 1.0,
                icon: IconKind::Matmul,
            });
        }
        let mut wx = Vec::with_capacity(n);
        let mut wx_ids = Vec::with_capacity(n);
        for r in 0..n {
            let v = layer.weight.matvec(cur.values.row(r))?;
            wx_ids.push(rec.record(NewStep::ranked(
                K,
                cur.scope(r),
                Symbol::Wx,
                "weight matrix applied",
                vec![v.len()],
                v.clone(),
                Derivation::MatVec {
                    matrix: w_id,
                    vector: in_ids[r],
                },
            ))?);
            wx.push(v);
        }
        let symbol = if last { Symbol::Logits } else { Symbol::BiasAdd };
        let mut pre = Vec::with_capacity(n);
        let mut pre_ids = Vec::with_capacity(n);
        for r in 0..n {
            let v = add_rows(&wx[r], &layer.bias);
            pre_ids.push(rec.record(NewStep::ranked(
                K,
                cur.scope(r),
                symbol,
                if last { "logits" } else { "bias added" },
                vec![v.len()],
                v.clone(),
                Derivation::Sum {
                    sources: vec![wx_ids[r], b_id],
                },
            ))?);
            pre.push(v);
        }
        cur = if last {
            Activations {
                values: Matrix::from_rows(&pre)?,
                steps: pre_ids,
                node_scoped: cur.node_scoped,
            }
        } else {
            activate(K, &pre, &pre_ids, cur.node_scoped, rec)?
        };
    }
    Ok(cur)
}

/// Link score of two rows of `x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkScore {
    pub raw: f32,
    pub probability: f64,
    /// Step holding the two-class logits `[raw, 0]`.
    pub logits_step: StepId,
}

/// `raw = u · v`, `probability = logistic(raw)` for rows `a` and `b`.
pub fn dot_product_score(x: &Activations, a: usize, b: usize, rec: &mut dyn Recorder) -> Result<LinkScore> {
    const K: LayerKind = LayerKind::Dot;
    let n = x.values.rows();
    for v in [a, b] {
        if v >= n {
            return Err(Error::IndexOutOfRange { index: v, len: n });
        }
    }
    rec.begin_layer(LayerHeader::new(K, vec![FormulaId::LinkDot]))?;
    let ids = if x.steps.len() == n {
        x.steps.clone()
    } else {
        x.bind_inputs(K, rec)?
    };
    let u = x.values.row(a);
    let v = x.values.row(b);
    let mut acc = 0.0f64;
    for (&p, &q) in u.iter().zip(v) {
        acc += f64::from(p) * f64::from(q);
    }
    let raw = acc as f32;
    for s in [a, b] {
        rec.curve(EdgeCurve {
            source: x.scope(s),
            target: None,
            coefficient: 1.0,
            icon: IconKind::Dot,
        });
    }
    let dot_id = rec.record(NewStep::ranked(
        K,
        None,
        Symbol::Dot,
        "dot product of the two node features",
        vec![1],
        vec![raw],
        Derivation::Dot {
            left: ids[a],
            right: ids[b],
        },
    ))?;
    let logits_step = rec.record(NewStep::ranked(
        K,
        None,
        Symbol::Logits,
        "link logits [score, 0]",
        vec![2],
        vec![raw, 0.0],
        Derivation::LinkLogits { score: dot_id },
    ))?;
    Ok(LinkScore {
        raw,
        probability: logistic(f64::from(raw)),
        logits_step,
    })
}

/// Dot product of two vectors without a trace.
pub fn dot_score(u: &[f32], v: &[f32]) -> Result<(f32, f64)> {
    if u.len() != v.len() {
        return Err(Error::shape(format!("vectors of length {} and {}", u.len(), v.len())));
    }
    let x = Activations::input(Matrix::from_rows(&[u.to_vec(), v.to_vec()])?);
    let s = dot_product_score(&x, 0, 1, &mut crate::trace::NullRecorder::default())?;
    Ok((s.raw, s.probability))
}
