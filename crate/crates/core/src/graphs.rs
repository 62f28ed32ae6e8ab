//! Weighted pair graphs over training indices.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Debug)]
pub struct SamplingGraph {
    n: usize,
    edges: Vec<(usize, usize)>,
    weights: Vec<f64>,
    index: WeightedIndex<f64>,
}

impl SamplingGraph {
    pub fn new(n: usize, edges: Vec<(usize, usize)>, weights: Vec<f64>) -> Result<Self> {
        if edges.is_empty() || edges.len() != weights.len() {
            return Err(Error::invalid("graph needs one weight per edge and at least one edge"));
        }
        if let Some(&(i, j)) = edges.iter().find(|(i, j)| *i >= n || *j >= n) {
            return Err(Error::invalid(format!("edge ({i}, {j}) out of range for {n} nodes")));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("edge weights must be finite and non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::invalid("edge weights sum to zero"));
        }
        let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let index = WeightedIndex::new(&weights).map_err(|e| Error::invalid(e.to_string()))?;
        Ok(Self { n, edges, weights, index })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}

/// Every ordered pair, self-pairs included, each with weight `1/n²`.
pub fn fully_connected(n: usize) -> Result<SamplingGraph> {
    if n == 0 {
        return Err(Error::invalid("fully connected graph needs at least one node"));
    }
    let edges: Vec<_> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
    let w = 1.0 / (n * n) as f64;
    let weights = vec![w; edges.len()];
    SamplingGraph::new(n, edges, weights)
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Indices of the `k` nearest rows to row `i` (excluding `i`), nearest first,
/// ties resolved towards the lower index.
pub fn nearest_neighbors(features: &Matrix, i: usize, k: usize) -> Vec<usize> {
    let xi = features.row(i);
    let mut cand: Vec<(f64, usize)> = (0..features.rows())
        .filter(|&j| j != i)
        .map(|j| (squared_distance(xi, features.row(j)), j))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < cand.len() {
        cand.select_nth_unstable_by(k - 1, cmp);
        cand.truncate(k);
    }
    cand.sort_by(cmp);
    cand.into_iter().map(|(_, j)| j).collect()
}

/// Directed `K`-nearest-neighbour graph under Euclidean distance, weight
/// `1/(nK)` per edge.
pub fn knn_graph(features: &Matrix, k: usize) -> Result<SamplingGraph> {
    let n = features.rows();
    if k == 0 || k >= n {
        return Err(Error::invalid(format!("K = {k} must satisfy 1 <= K < n = {n}")));
    }
    if !features.is_finite() {
        return Err(Error::invalid("features contain non-finite values"));
    }
    let edges: Vec<(usize, usize)> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| nearest_neighbors(features, i, k).into_iter().map(move |j| (i, j)))
        .collect();
    let weights = vec![1.0 / (n * k) as f64; edges.len()];
    SamplingGraph::new(n, edges, weights)
}

/// I.i.d. edge draws proportional to the edge weights.
pub fn sample_edges<R: Rng + ?Sized>(graph: &SamplingGraph, count: usize, rng: &mut R) -> Vec<(usize, usize)> {
    (0..count).map(|_| graph.edges[graph.index.sample(rng)]).collect()
}
