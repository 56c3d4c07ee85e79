//! Pruned k-nearest-neighbor graph over demonstration states and the per-edge
//! neighborhoods used by the orientation distributions.
//!
//! All distances are Euclidean on whatever state representation the caller
//! passes in; training code passes standardized states.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{LvrError, Result};

/// Control deltas with norm below this are degenerate.
pub const DEGENERATE_DELTA: f64 = 1e-10;

/// Directed edge `(from, to)`.
pub type Edge = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    /// Neighbors per node before pruning; clamped to `T - 1`.
    pub k: usize,
    /// Per-node quantile of outgoing distances used as the pruning radius.
    pub q: f64,
    /// Maximum neighborhood size per edge.
    pub cap: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self { k: 32, q: 0.8, cap: 32 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

fn distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Exhaustive kNN: for every node the `k` closest other nodes, ordered by
/// distance with ties broken by lower index.
pub fn build_knn(states: ArrayView2<f64>, k: usize) -> Result<Vec<Vec<Neighbor>>> {
    let n = states.nrows();
    if k == 0 || k >= n {
        return Err(LvrError::invalid_parameter(format!("k={k} must satisfy 1 <= k < {n}")));
    }
    let mut out = Vec::with_capacity(n);
    let mut cand: Vec<Neighbor> = Vec::with_capacity(n - 1);
    for i in 0..n {
        cand.clear();
        let xi = states.row(i);
        cand.extend((0..n).filter(|&j| j != i).map(|j| Neighbor {
            index: j,
            distance: distance(xi, states.row(j)),
        }));
        let cmp = |a: &Neighbor, b: &Neighbor| a.distance.total_cmp(&b.distance).then(a.index.cmp(&b.index));
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, cmp);
            cand.truncate(k);
        }
        cand.sort_by(cmp);
        out.push(cand.clone());
    }
    Ok(out)
}

/// Empirical quantile with linear interpolation between order statistics
/// (position `(n - 1) q`). `sorted` must be ascending and non-empty.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Keeps edges strictly shorter than the node's `q`-quantile radius. A node
/// left with no edges keeps its nearest one.
pub fn prune_by_radius(knn: &[Vec<Neighbor>], q: f64) -> Result<(Vec<Edge>, Vec<f64>)> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(LvrError::invalid_parameter(format!("quantile q={q} must be in (0, 1]")));
    }
    let mut edges = Vec::new();
    let mut radii = Vec::with_capacity(knn.len());
    for (i, nbrs) in knn.iter().enumerate() {
        if nbrs.is_empty() {
            radii.push(0.0);
            continue;
        }
        let dists: Vec<f64> = nbrs.iter().map(|n| n.distance).collect();
        let eps = quantile_sorted(&dists, q);
        radii.push(eps);
        let before = edges.len();
        edges.extend(nbrs.iter().filter(|n| n.distance < eps).map(|n| (i, n.index)));
        if edges.len() == before {
            edges.push((i, nbrs[0].index));
        }
    }
    Ok((edges, radii))
}

/// `N(e)`: edges sharing an endpoint with `e`, ranked by distance between
/// edge midpoints (ties by edge index), truncated to `cap`. `e` is always
/// first.
pub fn edge_neighborhoods(states: ArrayView2<f64>, edges: &[Edge], cap: usize) -> Vec<Vec<usize>> {
    let n = states.nrows();
    let cap = cap.max(1);
    let mut incident: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (e, &(i, j)) in edges.iter().enumerate() {
        incident[i].push(e);
        if j != i {
            incident[j].push(e);
        }
    }
    let midpoints: Array2<f64> = {
        let mut m = Array2::zeros((edges.len(), states.ncols()));
        for (e, &(i, j)) in edges.iter().enumerate() {
            m.row_mut(e).assign(&((&states.row(i) + &states.row(j)) * 0.5));
        }
        m
    };
    let mut out = Vec::with_capacity(edges.len());
    let mut cand: Vec<(f64, usize)> = Vec::new();
    for (e, &(i, j)) in edges.iter().enumerate() {
        cand.clear();
        let me = midpoints.row(e);
        for &f in incident[i].iter().chain(&incident[j]) {
            if f != e {
                cand.push((distance(me, midpoints.row(f)), f));
            }
        }
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        cand.dedup_by_key(|c| c.1);
        let mut nbh = Vec::with_capacity(cap.min(cand.len() + 1));
        nbh.push(e);
        nbh.extend(cand.iter().take(cap - 1).map(|c| c.1));
        out.push(nbh);
    }
    out
}

/// Per-edge state and expert-action differences `x_j - x_i`, `u_j - u_i`.
#[derive(Debug, Clone)]
pub struct EdgeDeltas {
    pub dx: Array2<f64>,
    pub du: Array2<f64>,
    /// `||du|| < DEGENERATE_DELTA`.
    pub degenerate: Vec<bool>,
}

pub fn edge_deltas(data: &Dataset, edges: &[Edge]) -> EdgeDeltas {
    let mut dx = Array2::zeros((edges.len(), data.state_dim()));
    let mut du = Array2::zeros((edges.len(), data.action_dim()));
    let mut degenerate = Vec::with_capacity(edges.len());
    for (e, &(i, j)) in edges.iter().enumerate() {
        dx.row_mut(e).assign(&(&data.states.row(j) - &data.states.row(i)));
        let d = &data.actions.row(j) - &data.actions.row(i);
        degenerate.push(d.dot(&d).sqrt() < DEGENERATE_DELTA);
        du.row_mut(e).assign(&d);
    }
    EdgeDeltas { dx, du, degenerate }
}

/// The pruned graph with per-node radii and per-edge neighborhoods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnGraph {
    pub edges: Vec<Edge>,
    pub node_radius: Vec<f64>,
    pub neighborhoods: Vec<Vec<usize>>,
    pub config: GraphConfig,
    /// `k` actually used after clamping to `T - 1`.
    pub effective_k: usize,
}

impl KnnGraph {
    pub fn build(states: ArrayView2<f64>, config: GraphConfig) -> Result<Self> {
        let n = states.nrows();
        if n < 2 {
            return Err(LvrError::invalid_input(format!("graph needs at least 2 states, got {n}")));
        }
        if config.k == 0 {
            return Err(LvrError::invalid_parameter("k must be at least 1"));
        }
        let k = config.k.min(n - 1);
        let knn = build_knn(states, k)?;
        let (edges, node_radius) = prune_by_radius(&knn, config.q)?;
        let neighborhoods = edge_neighborhoods(states, &edges, config.cap);
        Ok(Self {
            edges,
            node_radius,
            neighborhoods,
            config,
            effective_k: k,
        })
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Diagnostic summary: edges, radii and neighborhood sizes.
    pub fn diagnostic_json(&self) -> serde_json::Value {
        let sizes: Vec<usize> = self.neighborhoods.iter().map(Vec::len).collect();
        serde_json::json!({
            "k": self.config.k,
            "effective_k": self.effective_k,
            "q": self.config.q,
            "cap": self.config.cap,
            "num_nodes": self.node_radius.len(),
            "num_edges": self.edges.len(),
            "edges": self.edges,
            "node_radius": self.node_radius,
            "neighborhood_sizes": sizes,
        })
    }
}

/// Mean node radius; handy for logging.
pub fn mean_radius(graph: &KnnGraph) -> f64 {
    Array1::from(graph.node_radius.clone()).mean().unwrap_or(0.0)
}
