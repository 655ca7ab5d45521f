use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::SparseMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizeMode {
    /// `D^{-1/2} A D^{-1/2}`
    Symmetric,
    /// `D^{-1} A`
    RandomWalk,
}

/// How a raw adjacency becomes the propagation operator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormalizeOptions {
    pub mode: NormalizeMode,
    pub self_loops: bool,
}

impl Default for NormalizeOptions {
    fn default() -> Self {
        Self {
            mode: NormalizeMode::Symmetric,
            self_loops: true,
        }
    }
}

/// Builds a symmetric 0/1 adjacency from undirected edges (both directions
/// inserted, duplicates removed). Self-edges are rejected.
pub fn adjacency_from_edges(n: usize, edges: &[(usize, usize)]) -> Result<SparseMatrix> {
    let mut rows: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
    for &(u, v) in edges {
        if u >= n || v >= n {
            return Err(Error::shape(
                "adjacency_from_edges",
                format!("edge ({u}, {v}) outside {n} nodes"),
            ));
        }
        if u == v {
            return Err(Error::Config(format!("self-edge on node {u}")));
        }
        rows[u].insert(v, 1.0);
        rows[v].insert(u, 1.0);
    }
    SparseMatrix::from_row_maps(n, rows)
}

/// Normalizes a symmetric, zero-diagonal adjacency.
///
/// With `self_loops` the identity is added first. Symmetric values are
/// computed once per unordered pair and mirrored, so the result is exactly
/// symmetric.
pub fn normalize_laplacian(
    adjacency: &SparseMatrix,
    mode: NormalizeMode,
    self_loops: bool,
) -> Result<SparseMatrix> {
    let n = adjacency.n_rows();
    if adjacency.n_cols() != n {
        return Err(Error::shape(
            "normalize_laplacian",
            format!("adjacency is {}x{}", n, adjacency.n_cols()),
        ));
    }
    for (r, c, v) in adjacency.iter() {
        if r == c && v != 0.0 {
            return Err(Error::Config(format!(
                "adjacency has a diagonal entry at {r}"
            )));
        }
        if v < 0.0 {
            return Err(Error::Config(format!(
                "negative adjacency weight at ({r}, {c})"
            )));
        }
        if adjacency.get(c, r) != v {
            return Err(Error::Config(format!(
                "adjacency not symmetric at ({r}, {c})"
            )));
        }
    }

    let mut rows: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
    for (r, c, v) in adjacency.iter() {
        if r != c {
            rows[r].insert(c, v);
        }
    }
    if self_loops {
        for (i, row) in rows.iter_mut().enumerate() {
            row.insert(i, 1.0);
        }
    }
    let degree: Vec<f64> = rows.iter().map(|r| r.values().sum()).collect();
    if let Some(node) = degree.iter().position(|&d| d <= 0.0) {
        return Err(Error::DegreeZero { node });
    }

    match mode {
        NormalizeMode::Symmetric => {
            let mut upper = Vec::new();
            for (i, row) in rows.iter().enumerate() {
                for (&j, &a) in row.range(i..) {
                    upper.push((i, j, a / (degree[i] * degree[j]).sqrt()));
                }
            }
            for (i, j, v) in upper {
                rows[i].insert(j, v);
                rows[j].insert(i, v);
            }
        }
        NormalizeMode::RandomWalk => {
            for (i, row) in rows.iter_mut().enumerate() {
                for v in row.values_mut() {
                    *v /= degree[i];
                }
            }
        }
    }
    SparseMatrix::from_row_maps(n, rows)
}
