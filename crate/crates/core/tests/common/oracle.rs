//! Independent reference implementations used by the oracle and acceptance tests.

use std::collections::{BTreeSet, HashMap, VecDeque};

use glassgnn::kernels::sample_neighbors;
use glassgnn::{Graph, Matrix};

fn dense_adjacency(g: &Graph) -> Vec<Vec<f64>> {
    let n = g.node_count();
    let mut a = vec![vec![0.0; n]; n];
    for &(u, v) in g.edges() {
        a[u][v] = 1.0;
        a[v][u] = 1.0;
    }
    a
}

/// relu(D^-1/2 (A+I) D^-1/2 X W^T + 1 b^T) with dense matrices.
pub fn gcn_dense(g: &Graph, w: &Matrix, b: &[f32]) -> Vec<Vec<f64>> {
    let n = g.node_count();
    let mut a = dense_adjacency(g);
    for (i, row) in a.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let deg: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
    let x = g.features();
    let mut ax = vec![vec![0.0; x.cols()]; n];
    for i in 0..n {
        for j in 0..n {
            let norm = a[i][j] / (deg[i].sqrt() * deg[j].sqrt());
            for d in 0..x.cols() {
                ax[i][d] += norm * f64::from(x.get(j, d));
            }
        }
    }
    (0..n)
        .map(|i| {
            (0..w.rows())
                .map(|o| {
                    let s: f64 = (0..w.cols()).map(|k| f64::from(w.get(o, k)) * ax[i][k]).sum();
                    (s + f64::from(b[o])).max(0.0)
                })
                .collect()
        })
        .collect()
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

pub struct GatOracle {
    pub alpha: Vec<Vec<(usize, f64)>>,
    pub out: Vec<Vec<f64>>,
}

/// Per-edge loops with an unshifted exponential softmax.
pub fn gat_naive(g: &Graph, w: &Matrix, a: &[f32], slope: f64) -> GatOracle {
    let n = g.node_count();
    let h = w.rows();
    let x = g.features();
    let z: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            (0..h)
                .map(|o| (0..w.cols()).map(|k| f64::from(w.get(o, k)) * f64::from(x.get(j, k))).sum())
                .collect()
        })
        .collect();
    let mut alpha = Vec::new();
    let mut out = Vec::new();
    for i in 0..n {
        let mut members: Vec<usize> = g.neighbors(i).unwrap().to_vec();
        members.push(i);
        let score = |j: usize| {
            let s: f64 = (0..h).map(|k| f64::from(a[k]) * z[i][k] + f64::from(a[h + k]) * z[j][k]).sum();
            leaky(s, slope).exp()
        };
        let total: f64 = members.iter().map(|&j| score(j)).sum();
        let row: Vec<(usize, f64)> = members.iter().map(|&j| (j, score(j) / total)).collect();
        let mut o = vec![0.0; h];
        for &(j, al) in &row {
            for k in 0..h {
                o[k] += al * z[j][k];
            }
        }
        out.push(o.into_iter().map(|v| v.max(0.0)).collect());
        alpha.push(row);
    }
    GatOracle { alpha, out }
}

/// relu(W_self x_i + W_neigh mean(x_S) + b) with `S` drawn by the engine's sampler.
pub fn sage_naive(g: &Graph, ws: &Matrix, wn: &Matrix, b: &[f32], size: usize, seed: u64) -> Vec<Vec<f64>> {
    let x = g.features();
    let (din, dout) = (ws.cols(), ws.rows());
    (0..g.node_count())
        .map(|i| {
            let s = sample_neighbors(g, i, size, seed).unwrap();
            assert_eq!(s.len(), size.min(g.neighbors(i).unwrap().len()));
            let mut mean = vec![0.0; din];
            for &j in &s {
                for d in 0..din {
                    mean[d] += f64::from(x.get(j, d)) / s.len() as f64;
                }
            }
            (0..dout)
                .map(|o| {
                    let mut v = f64::from(b[o]);
                    for k in 0..din {
                        v += f64::from(ws.get(o, k)) * f64::from(x.get(i, k));
                        v += f64::from(wn.get(o, k)) * mean[k];
                    }
                    v.max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Node ids within `k` hops of `seeds`, read straight from a `a,b` edge csv with a header.
pub fn bfs_from_edge_csv(csv: &str, seeds: &[&str], k: usize) -> BTreeSet<String> {
    let mut adj: HashMap<&str, Vec<&str>> = HashMap::new();
    for line in csv.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let (a, b) = line.split_once(',').unwrap();
        let (a, b) = (a.trim(), b.trim());
        adj.entry(a).or_default().push(b);
        adj.entry(b).or_default().push(a);
    }
    let mut seen: BTreeSet<String> = seeds.iter().map(|s| s.to_string()).collect();
    let mut queue: VecDeque<(String, usize)> = seeds.iter().map(|s| (s.to_string(), 0)).collect();
    while let Some((v, d)) = queue.pop_front() {
        if d == k {
            continue;
        }
        for u in adj.get(v.as_str()).into_iter().flatten() {
            if seen.insert(u.to_string()) {
                queue.push_back((u.to_string(), d + 1));
            }
        }
    }
    seen
}
