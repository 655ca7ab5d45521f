//! Graph datasets: normalized Laplacian, node features, labels and splits.

mod io;
mod laplacian;
mod sbm;

pub use io::{load_dataset, load_dataset_with, save_dataset};
pub use laplacian::{adjacency_from_edges, normalize_laplacian, NormalizeMode, NormalizeOptions};
pub use sbm::{generate_sbm, SbmConfig};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{DenseMatrix, SparseMatrix};

/// Per-node targets.
#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    /// One class index per node.
    Single(Vec<usize>),
    /// N×C 0/1 indicator matrix.
    Multi(DenseMatrix),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Single(v) => v.len(),
            Labels::Multi(m) => m.n_rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Disjoint, sorted node index sets.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Masks {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Masks {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Immutable graph with features, labels and train/val/test masks.
#[derive(Clone, Debug)]
pub struct GraphDataset {
    laplacian: SparseMatrix,
    features: DenseMatrix,
    labels: Labels,
    masks: Masks,
    num_classes: usize,
    edges: Vec<(usize, usize)>,
    column_norms_sq: Vec<f64>,
}

impl GraphDataset {
    /// Assembles and validates a dataset. `edges` are undirected; they are
    /// symmetrized and deduplicated before normalization.
    pub fn new(
        edges: &[(usize, usize)],
        features: DenseMatrix,
        labels: Labels,
        mut masks: Masks,
        num_classes: usize,
        norm: NormalizeOptions,
    ) -> Result<Self> {
        let n = features.n_rows();
        if labels.len() != n {
            return Err(Error::shape(
                "GraphDataset::new",
                format!("{} label rows for {} nodes", labels.len(), n),
            ));
        }
        match &labels {
            Labels::Single(v) => {
                if let Some((i, &c)) = v.iter().enumerate().find(|(_, &c)| c >= num_classes) {
                    return Err(Error::Label(format!(
                        "node {i} has class {c}, expected < {num_classes}"
                    )));
                }
            }
            Labels::Multi(m) => {
                if m.n_cols() != num_classes {
                    return Err(Error::shape(
                        "GraphDataset::new",
                        format!("{} label columns for {num_classes} classes", m.n_cols()),
                    ));
                }
                if m.values().iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::Label("multi-label entries must be 0 or 1".into()));
                }
            }
        }
        let mut seen = BTreeSet::new();
        for set in [&mut masks.train, &mut masks.val, &mut masks.test] {
            set.sort_unstable();
            for &i in set.iter() {
                if i >= n {
                    return Err(Error::Config(format!("mask index {i} outside {n} nodes")));
                }
                if !seen.insert(i) {
                    return Err(Error::Config(format!(
                        "node {i} appears in more than one mask"
                    )));
                }
            }
        }

        let mut undirected: Vec<(usize, usize)> =
            edges.iter().map(|&(u, v)| (u.min(v), u.max(v))).collect();
        undirected.sort_unstable();
        undirected.dedup();
        let adjacency = adjacency_from_edges(n, &undirected)?;
        let laplacian = normalize_laplacian(&adjacency, norm.mode, norm.self_loops)?;

        let mut column_norms_sq = vec![0.0; n];
        for (_, c, v) in laplacian.iter() {
            column_norms_sq[c] += v * v;
        }

        Ok(Self {
            laplacian,
            features,
            labels,
            masks,
            num_classes,
            edges: undirected,
            column_norms_sq,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.features.n_rows()
    }

    pub fn num_features(&self) -> usize {
        self.features.n_cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn is_multilabel(&self) -> bool {
        matches!(self.labels, Labels::Multi(_))
    }

    pub fn laplacian(&self) -> &SparseMatrix {
        &self.laplacian
    }

    pub fn features(&self) -> &DenseMatrix {
        &self.features
    }

    pub fn labels(&self) -> &Labels {
        &self.labels
    }

    pub fn masks(&self) -> &Masks {
        &self.masks
    }

    pub fn train_nodes(&self) -> &[usize] {
        &self.masks.train
    }

    /// Undirected edges `(u, v)` with `u < v`, sorted and unique.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Support of row `i` of the Laplacian (includes `i` itself with self-loops).
    pub fn neighbors(&self, i: usize) -> &[usize] {
        self.laplacian.row(i).0
    }

    /// `Σ_i L_ij²` for every column `j`.
    pub fn column_norms_sq(&self) -> &[f64] {
        &self.column_norms_sq
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(labels: Labels, masks: Masks) -> Result<GraphDataset> {
        GraphDataset::new(
            &[(0, 1)],
            DenseMatrix::from_vec(2, 1, vec![0.5, -0.5]).unwrap(),
            labels,
            masks,
            2,
            NormalizeOptions::default(),
        )
    }

    #[test]
    fn minimal_dataset() {
        let g = tiny(
            Labels::Single(vec![0, 1]),
            Masks {
                train: vec![0],
                val: vec![1],
                test: vec![],
            },
        )
        .unwrap();
        assert_eq!(
            (g.num_nodes(), g.num_features(), g.num_classes()),
            (2, 1, 2)
        );
        assert_eq!(g.neighbors(0), &[0, 1]);
    }

    #[test]
    fn overlapping_masks_rejected() {
        let masks = Masks {
            train: vec![0],
            val: vec![0],
            test: vec![],
        };
        assert!(tiny(Labels::Single(vec![0, 1]), masks).is_err());
    }

    #[test]
    fn out_of_range_label_rejected() {
        assert!(matches!(
            tiny(Labels::Single(vec![0, 2]), Masks::default()),
            Err(Error::Label(_))
        ));
    }
}
