//! Undirected attributed graphs, GCN normalization arithmetic and k-hop
//! neighborhood extraction.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Optional supervision attached to a graph.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Labels {
    pub node: Option<Vec<usize>>,
    pub graph: Option<usize>,
}

/// An immutable undirected graph with dense `0..n` node indices.
///
/// Edges are stored once per unordered pair as `(low, high)` in ascending
/// order. Self-loops are never stored; the GCN arithmetic adds them.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    node_ids: Vec<String>,
    features: Matrix,
    edges: Vec<(usize, usize)>,
    adjacency: Vec<Vec<usize>>,
    node_labels: Option<Vec<usize>>,
    graph_label: Option<usize>,
}

/// Closed neighborhood `N(i) ∪ {i}` with one coefficient per member.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodView {
    pub center: usize,
    pub members: Vec<usize>,
    pub coefficients: Vec<f64>,
}

/// Index correspondence produced by [`Graph::k_hop_subgraph`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubgraphMap {
    /// `new_to_old[new] = old`, ascending in `old`.
    pub new_to_old: Vec<usize>,
    pub old_to_new: BTreeMap<usize, usize>,
}

impl SubgraphMap {
    pub fn to_new(&self, old: usize) -> Option<usize> {
        self.old_to_new.get(&old).copied()
    }
}

impl Graph {
    /// Validates and builds a graph. Node ids default to `"0".."n-1"`.
    pub fn build(features: Vec<Vec<f32>>, edges: &[(usize, usize)], labels: Labels) -> Result<Self> {
        let features = Matrix::from_rows(&features)?;
        Self::from_matrix(features, edges, labels)
    }

    pub fn from_matrix(features: Matrix, edges: &[(usize, usize)], labels: Labels) -> Result<Self> {
        let n = features.rows();
        if n > 0 && features.cols() == 0 {
            return Err(Error::RaggedFeatures {
                row: 0,
                expected: 1,
                found: 0,
            });
        }
        let mut seen = BTreeSet::new();
        for &(a, b) in edges {
            for v in [a, b] {
                if v >= n {
                    return Err(Error::IndexOutOfRange { index: v, len: n });
                }
            }
            if a == b {
                return Err(Error::SelfLoop(a));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(Error::DuplicateEdge(a, b));
            }
        }
        if let Some(nl) = &labels.node {
            if nl.len() != n {
                return Err(Error::shape(format!(
                    "{} node labels for {n} nodes",
                    nl.len()
                )));
            }
        }
        let edges: Vec<(usize, usize)> = seen.into_iter().collect();
        let mut adjacency = vec![Vec::new(); n];
        for &(a, b) in &edges {
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }
        Ok(Self {
            node_ids: (0..n).map(|i| i.to_string()).collect(),
            features,
            edges,
            adjacency,
            node_labels: labels.node,
            graph_label: labels.graph,
        })
    }

    /// Replaces the external node identifiers; they must be unique.
    pub fn with_node_ids(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.node_count() {
            return Err(Error::shape(format!(
                "{} node ids for {} nodes",
                ids.len(),
                self.node_count()
            )));
        }
        let mut uniq = BTreeSet::new();
        for id in &ids {
            if !uniq.insert(id.as_str()) {
                return Err(Error::SchemaError(format!("duplicate node id {id:?}")));
            }
        }
        self.node_ids = ids;
        Ok(self)
    }

    #[inline]
    pub fn node_count(&self) -> usize {
        self.features.rows()
    }

    #[inline]
    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn node_labels(&self) -> Option<&[usize]> {
        self.node_labels.as_deref()
    }

    pub fn graph_label(&self) -> Option<usize> {
        self.graph_label
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.node_ids.iter().position(|x| x == id)
    }

    fn check(&self, i: usize) -> Result<()> {
        if i >= self.node_count() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: self.node_count(),
            });
        }
        Ok(())
    }

    /// Sorted open neighborhood `N(i)`.
    pub fn neighbors(&self, i: usize) -> Result<&[usize]> {
        self.check(i)?;
        Ok(&self.adjacency[i])
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        a < self.node_count() && self.adjacency[a].binary_search(&b).is_ok()
    }

    /// `|N(i)| + 1`.
    pub fn degree_with_self_loop(&self, i: usize) -> Result<usize> {
        Ok(self.neighbors(i)?.len() + 1)
    }

    /// `1 / sqrt(d_i d_j)` with self-loop degrees, for `j ∈ N(i) ∪ {i}`.
    pub fn gcn_coefficient(&self, i: usize, j: usize) -> Result<f64> {
        self.check(i)?;
        self.check(j)?;
        if i != j && !self.has_edge(i, j) {
            return Err(Error::NotANeighbor { i, j });
        }
        Ok(self.gcn_coefficient_unchecked(i, j))
    }

    pub(crate) fn gcn_coefficient_unchecked(&self, i: usize, j: usize) -> f64 {
        // integer product first, so the result is symmetric bit for bit
        let di = self.adjacency[i].len() + 1;
        let dj = self.adjacency[j].len() + 1;
        1.0 / ((di * dj) as f64).sqrt()
    }

    /// Sorted members of `N(i) ∪ {i}`.
    pub fn closed_neighborhood(&self, i: usize) -> Result<Vec<usize>> {
        let nbrs = self.neighbors(i)?;
        let mut members = Vec::with_capacity(nbrs.len() + 1);
        let pos = nbrs.partition_point(|&j| j < i);
        members.extend_from_slice(&nbrs[..pos]);
        members.push(i);
        members.extend_from_slice(&nbrs[pos..]);
        Ok(members)
    }

    /// Closed neighborhood of `i` carrying GCN coefficients.
    pub fn neighborhood(&self, i: usize) -> Result<NeighborhoodView> {
        let members = self.closed_neighborhood(i)?;
        let coefficients = members
            .iter()
            .map(|&j| self.gcn_coefficient_unchecked(i, j))
            .collect();
        Ok(NeighborhoodView {
            center: i,
            members,
            coefficients,
        })
    }

    /// Induced subgraph on every node within `k` hops of any seed.
    pub fn k_hop_subgraph(&self, seeds: &[usize], k: usize) -> Result<(Graph, SubgraphMap)> {
        if seeds.is_empty() {
            return Err(Error::EmptySeeds);
        }
        let n = self.node_count();
        let mut dist = vec![usize::MAX; n];
        let mut queue = VecDeque::new();
        for &s in seeds {
            self.check(s)?;
            if dist[s] != 0 {
                dist[s] = 0;
                queue.push_back(s);
            }
        }
        while let Some(v) = queue.pop_front() {
            if dist[v] == k {
                continue;
            }
            for &u in &self.adjacency[v] {
                if dist[u] == usize::MAX {
                    dist[u] = dist[v] + 1;
                    queue.push_back(u);
                }
            }
        }
        let new_to_old: Vec<usize> = (0..n).filter(|&v| dist[v] != usize::MAX).collect();
        let old_to_new: BTreeMap<usize, usize> =
            new_to_old.iter().enumerate().map(|(new, &old)| (old, new)).collect();

        let mut rows = Vec::with_capacity(new_to_old.len());
        for &old in &new_to_old {
            rows.push(self.features.row(old).to_vec());
        }
        let edges: Vec<(usize, usize)> = self
            .edges
            .iter()
            .filter_map(|&(a, b)| Some((*old_to_new.get(&a)?, *old_to_new.get(&b)?)))
            .collect();
        let node_labels = self
            .node_labels
            .as_ref()
            .map(|l| new_to_old.iter().map(|&o| l[o]).collect());
        let sub = Graph::from_matrix(
            Matrix::from_rows(&rows)?.reshape_if_empty(self.feature_dim()),
            &edges,
            Labels {
                node: node_labels,
                graph: self.graph_label,
            },
        )?
        .with_node_ids(new_to_old.iter().map(|&o| self.node_ids[o].clone()).collect())?;
        Ok((
            sub,
            SubgraphMap {
                new_to_old,
                old_to_new,
            },
        ))
    }

    /// Relabels nodes: old node `j` becomes new node `perm[j]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Graph> {
        let n = self.node_count();
        let mut inverse = vec![usize::MAX; n];
        if perm.len() != n {
            return Err(Error::NotAPermutation(n));
        }
        for (old, &new) in perm.iter().enumerate() {
            if new >= n || inverse[new] != usize::MAX {
                return Err(Error::NotAPermutation(n));
            }
            inverse[new] = old;
        }
        let rows: Vec<Vec<f32>> = inverse.iter().map(|&o| self.features.row(o).to_vec()).collect();
        let edges: Vec<(usize, usize)> = self.edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect();
        let node_labels = self
            .node_labels
            .as_ref()
            .map(|l| inverse.iter().map(|&o| l[o]).collect());
        Graph::from_matrix(
            Matrix::from_rows(&rows)?.reshape_if_empty(self.feature_dim()),
            &edges,
            Labels {
                node: node_labels,
                graph: self.graph_label,
            },
        )?
        .with_node_ids(inverse.iter().map(|&o| self.node_ids[o].clone()).collect())
    }

    /// Copy of the graph with one extra isolated node appended.
    pub fn with_isolated_node(&self, features: Vec<f32>) -> Result<Graph> {
        let mut rows = self.features.to_rows();
        rows.push(features);
        let node_labels = self.node_labels.as_ref().map(|l| {
            let mut l = l.clone();
            l.push(0);
            l
        });
        let mut ids = self.node_ids.clone();
        let mut fresh = format!("{}", self.node_count());
        while ids.contains(&fresh) {
            fresh.push('_');
        }
        ids.push(fresh);
        Graph::build(
            rows,
            &self.edges,
            Labels {
                node: node_labels,
                graph: self.graph_label,
            },
        )?
        .with_node_ids(ids)
    }
}

impl Matrix {
    fn reshape_if_empty(self, cols: usize) -> Matrix {
        if self.rows() == 0 {
            Matrix::zeros(0, cols)
        } else {
            self
        }
    }
}
