#![allow(dead_code)]

use proptest::prelude::*;
use taskplan_core::embed::EmbeddingMatrix;
use taskplan_core::taskgraph::{LinkKind, TaskGraph};

pub type Dense = Vec<Vec<f64>>;

/// Named `t0..t{n-1}`; `edges` are id pairs.
pub fn graph(n: usize, edges: &[(usize, usize)]) -> TaskGraph {
    let names: Vec<String> = (0..n).map(|i| format!("t{i}")).collect();
    TaskGraph::from_parts(
        names.iter().map(|s| (s.as_str(), format!("does {s}"))),
        edges.iter().map(|&(s, t)| (names[s].as_str(), names[t].as_str(), LinkKind::Resource)),
    )
    .unwrap()
}

/// Random digraph without self loops or duplicate pairs.
pub fn arb_graph(max_n: usize) -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
    (1..=max_n).prop_flat_map(|n| {
        let pairs: Vec<(usize, usize)> =
            (0..n).flat_map(|a| (0..n).filter(move |&b| b != a).map(move |b| (a, b))).collect();
        let k = pairs.len();
        (Just(n), proptest::collection::vec(any::<bool>(), k)).prop_map(move |(n, keep)| {
            let edges = pairs.iter().zip(keep).filter(|(_, k)| *k).map(|(p, _)| *p).collect();
            (n, edges)
        })
    })
}

pub fn arb_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Dense> {
    proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, cols), rows)
}

pub fn arb_permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

pub fn to_matrix(d: &Dense) -> EmbeddingMatrix {
    EmbeddingMatrix::from_rows(d).unwrap()
}

pub fn to_dense(m: &EmbeddingMatrix) -> Dense {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

pub fn mul(a: &Dense, b: &Dense) -> Dense {
    let inner = b.len();
    let cols = b.first().map_or(0, Vec::len);
    a.iter()
        .map(|row| {
            (0..cols).map(|j| (0..inner).map(|k| row[k] * b[k][j]).sum()).collect()
        })
        .collect()
}

pub fn add(a: &Dense, b: &Dense) -> Dense {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

/// Dense `D^-1/2 (A + A^T > 0, plus I) D^-1/2`.
pub fn dense_adjacency(n: usize, edges: &[(usize, usize)]) -> Dense {
    let mut a = vec![vec![0.0; n]; n];
    for &(s, t) in edges {
        a[s][t] = 1.0;
        a[t][s] = 1.0;
    }
    for (i, row) in a.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let deg: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
    (0..n).map(|i| (0..n).map(|j| a[i][j] / (deg[i] * deg[j]).sqrt()).collect()).collect()
}

/// Row-mean over symmetrized neighbors (no self), zero for isolated nodes.
pub fn dense_mean_operator(n: usize, edges: &[(usize, usize)]) -> Dense {
    let mut a = vec![vec![0.0; n]; n];
    for &(s, t) in edges {
        a[s][t] = 1.0;
        a[t][s] = 1.0;
    }
    a.into_iter()
        .map(|row| {
            let d: f64 = row.iter().sum();
            if d == 0.0 {
                row
            } else {
                row.into_iter().map(|x| x / d).collect()
            }
        })
        .collect()
}

pub fn max_abs(a: &Dense, b: &Dense) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn relu(a: &Dense) -> Dense {
    a.iter().map(|r| r.iter().map(|x| x.max(0.0)).collect()).collect()
}
