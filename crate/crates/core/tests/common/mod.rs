#![allow(dead_code)]

pub mod gradients;

use std::collections::BTreeMap;

use bgcl::graphdata::Graph;
use bgcl::numcore::Tensor;
use rand::Rng;

pub fn random_tensor<R: Rng>(rng: &mut R, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::matrix(rows, cols, data)
}

/// Erdős–Rényi graph with Gaussian-ish features and no labels.
pub fn random_graph<R: Rng>(rng: &mut R, n: usize, p: f64, f: usize) -> Graph {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    let x = random_tensor(rng, n, f, -1.0, 1.0);
    Graph::new(n, edges, x, None, BTreeMap::new()).unwrap()
}

pub fn dense(adj: &bgcl::numcore::CsrMatrix, entry_values: &[f64]) -> Tensor {
    let n = adj.n();
    let mut out = Tensor::zeros(&[n, n]);
    for r in 0..n {
        for e in adj.row_range(r) {
            out.set(r, adj.col_indices()[e], entry_values[e]);
        }
    }
    out
}
