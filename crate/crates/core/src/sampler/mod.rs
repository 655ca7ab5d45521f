//! Per-layer sampled Laplacians for a mini-batch.
//!
//! Every strategy returns a [`LayerPlan`]: for each layer `ℓ = 1..L` an N×N
//! sparse matrix whose rows are the layer's output nodes and whose columns
//! are its input nodes. Stored values are `L_ij / α_ij` for a positive
//! per-entry weight `α_ij`.

mod choice;
mod propagation;

pub use choice::{
    binomial, derive_seed, enumerate, inclusion_probabilities, unrank_combination, ChoiceSource,
    Outcome, Purpose, RandomChoice, ScriptedChoice, ENUMERATION_LIMIT,
};
pub use propagation::{propagation_matrix, PropagationMethod};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::GraphDataset;
use crate::matrix::SparseMatrix;

/// Subgraph draws retried this many times when they miss the training set.
pub const SUBGRAPH_RETRIES: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Exact,
    Nodewise,
    Fastgcn,
    Ladies,
    Subgraph,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Exact => "exact",
            Strategy::Nodewise => "nodewise",
            Strategy::Fastgcn => "fastgcn",
            Strategy::Ladies => "ladies",
            Strategy::Subgraph => "subgraph",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Strategy::Exact),
            "nodewise" => Ok(Strategy::Nodewise),
            "fastgcn" => Ok(Strategy::Fastgcn),
            "ladies" => Ok(Strategy::Ladies),
            "subgraph" => Ok(Strategy::Subgraph),
            _ => Err(Error::Config(format!("unknown sampler {s:?}"))),
        }
    }
}

/// Sampling strategy and its size parameter.
///
/// `samples_per_layer` is the per-layer node count for FastGCN and LADIES and
/// the subgraph size for the subgraph sampler.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub strategy: Strategy,
    pub neighbors_per_node: Option<usize>,
    pub samples_per_layer: Option<usize>,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn exact() -> Self {
        Self {
            strategy: Strategy::Exact,
            neighbors_per_node: None,
            samples_per_layer: None,
            seed: 0,
        }
    }

    pub fn nodewise(s: usize) -> Self {
        Self {
            strategy: Strategy::Nodewise,
            neighbors_per_node: Some(s),
            ..Self::exact()
        }
    }

    pub fn fastgcn(s: usize) -> Self {
        Self {
            strategy: Strategy::Fastgcn,
            samples_per_layer: Some(s),
            ..Self::exact()
        }
    }

    pub fn ladies(s: usize) -> Self {
        Self {
            strategy: Strategy::Ladies,
            samples_per_layer: Some(s),
            ..Self::exact()
        }
    }

    pub fn subgraph(size: usize) -> Self {
        Self {
            strategy: Strategy::Subgraph,
            samples_per_layer: Some(size),
            ..Self::exact()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// The strategy's size parameter, if it has one.
    pub fn size(&self) -> Option<usize> {
        match self.strategy {
            Strategy::Exact => None,
            Strategy::Nodewise => self.neighbors_per_node,
            _ => self.samples_per_layer,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let need = |v: Option<usize>, name: &str, min: usize| match v {
            Some(s) if s >= min => Ok(()),
            Some(s) => Err(Error::Config(format!(
                "{} needs {name} >= {min}, got {s}",
                self.strategy.name()
            ))),
            None => Err(Error::Config(format!(
                "{} needs {name}",
                self.strategy.name()
            ))),
        };
        match self.strategy {
            Strategy::Exact => Ok(()),
            Strategy::Nodewise => need(self.neighbors_per_node, "neighbors_per_node", 1),
            Strategy::Fastgcn | Strategy::Ladies => {
                need(self.samples_per_layer, "samples_per_layer", 1)
            }
            Strategy::Subgraph => need(self.samples_per_layer, "samples_per_layer", 2),
        }
    }
}

/// One layer of a plan.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanLayer {
    /// N×N sampled Laplacian; nonzero rows ⊆ `output_nodes`, columns ⊆ `input_nodes`.
    pub laplacian: SparseMatrix,
    pub input_nodes: Vec<usize>,
    pub output_nodes: Vec<usize>,
}

/// Sampled computation graph for one step. `layers[0]` is layer 1.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerPlan {
    /// Nodes on which the loss is evaluated.
    pub batch: Vec<usize>,
    pub layers: Vec<PlanLayer>,
}

impl LayerPlan {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Layer `l`, 1-based.
    pub fn layer(&self, l: usize) -> &PlanLayer {
        &self.layers[l - 1]
    }

    /// Checks the structural invariants against a graph with `n` nodes.
    pub fn check(&self, n: usize) -> Result<()> {
        let bad = |d: String| Err(Error::shape("LayerPlan::check", d));
        if self.layers.is_empty() {
            return bad("plan has no layers".into());
        }
        for (k, layer) in self.layers.iter().enumerate() {
            let l = &layer.laplacian;
            if l.n_rows() != n || l.n_cols() != n {
                return bad(format!(
                    "layer {} Laplacian is {}x{}, expected {n}x{n}",
                    k + 1,
                    l.n_rows(),
                    l.n_cols()
                ));
            }
            let mut out = vec![false; n];
            let mut inp = vec![false; n];
            for &i in &layer.output_nodes {
                out[i] = true;
            }
            for &j in &layer.input_nodes {
                inp[j] = true;
            }
            for (i, j, _) in l.iter() {
                if !out[i] || !inp[j] {
                    return bad(format!(
                        "layer {} entry ({i}, {j}) outside its node sets",
                        k + 1
                    ));
                }
            }
            if k > 0 && self.layers[k - 1].output_nodes != layer.input_nodes {
                return bad(format!(
                    "layer {} input does not match layer {} output",
                    k + 1,
                    k
                ));
            }
        }
        let top = &self.layers[self.layers.len() - 1].output_nodes;
        if let Some(i) = self.batch.iter().find(|i| top.binary_search(i).is_err()) {
            return bad(format!("batch node {i} missing from the output layer"));
        }
        Ok(())
    }
}

fn normalized_batch(graph: &GraphDataset, batch: &[usize]) -> Result<Vec<usize>> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let n = graph.num_nodes();
    if let Some(&i) = batch.iter().find(|&&i| i >= n) {
        return Err(Error::Config(format!("batch node {i} outside {n} nodes")));
    }
    let mut b = batch.to_vec();
    b.sort_unstable();
    b.dedup();
    Ok(b)
}

fn check_layers(n_layers: usize) -> Result<()> {
    if n_layers == 0 {
        return Err(Error::Config("a plan needs at least one layer".into()));
    }
    Ok(())
}

fn union_support(l: &SparseMatrix, rows: &[usize]) -> Vec<usize> {
    let set: BTreeSet<usize> = rows
        .iter()
        .flat_map(|&i| l.row(i).0.iter().copied())
        .collect();
    set.into_iter().collect()
}

/// Builds layers top-down: `step(ℓ, output)` returns `(laplacian, input)`.
fn build_top_down(
    batch: Vec<usize>,
    n_layers: usize,
    mut step: impl FnMut(usize, &[usize]) -> Result<(SparseMatrix, Vec<usize>)>,
) -> Result<LayerPlan> {
    let mut layers = Vec::with_capacity(n_layers);
    let mut output = batch.clone();
    for l in (1..=n_layers).rev() {
        let (laplacian, input) = step(l, &output)?;
        layers.push(PlanLayer {
            laplacian,
            input_nodes: input.clone(),
            output_nodes: output,
        });
        output = input;
    }
    layers.reverse();
    Ok(LayerPlan { batch, layers })
}

/// All neighbors at every layer, unweighted.
pub fn sample_exact(graph: &GraphDataset, batch: &[usize], n_layers: usize) -> Result<LayerPlan> {
    check_layers(n_layers)?;
    let batch = normalized_batch(graph, batch)?;
    let l = graph.laplacian();
    build_top_down(batch, n_layers, |_, output| {
        Ok((l.restrict_rows(output), union_support(l, output)))
    })
}

/// Each output node keeps `min(s, |𝒩(i)|)` uniformly drawn neighbors, scaled
/// by `|𝒩(i)|/s`.
pub fn sample_nodewise(
    graph: &GraphDataset,
    batch: &[usize],
    n_layers: usize,
    s: usize,
    src: &mut dyn ChoiceSource,
) -> Result<LayerPlan> {
    check_layers(n_layers)?;
    if s == 0 {
        return Err(Error::Config("nodewise sampling needs s >= 1".into()));
    }
    let batch = normalized_batch(graph, batch)?;
    let l = graph.laplacian();
    let n = graph.num_nodes();
    build_top_down(batch, n_layers, |layer, output| {
        src.enter_layer(layer);
        let mut entries = Vec::new();
        let mut input = BTreeSet::new();
        for &i in output {
            let (cols, vals) = l.row(i);
            let deg = cols.len();
            let scale = deg as f64 / s as f64;
            for k in src.subset(deg, s.min(deg)) {
                entries.push((i, cols[k], scale * vals[k]));
                input.insert(cols[k]);
            }
        }
        Ok((
            SparseMatrix::from_triplets(n, n, entries)?,
            input.into_iter().collect(),
        ))
    })
}

/// Draws the layer's node set by importance `p_j ∝ Σ_i L_ij²`.
///
/// `dependent` restricts candidates to the upper layer's neighborhoods and
/// the sum to its rows; otherwise every node is a candidate with its full
/// column norm. Nodes are drawn without replacement with inclusion
/// probabilities `π_j = min(1, c·p_j)` summing to `min(s, #candidates)`;
/// kept columns are scaled by `1/π_j`, which is `1/(s·p_j)` whenever no
/// probability is capped.
pub fn sample_layerwise(
    graph: &GraphDataset,
    batch: &[usize],
    n_layers: usize,
    s: usize,
    dependent: bool,
    src: &mut dyn ChoiceSource,
) -> Result<LayerPlan> {
    check_layers(n_layers)?;
    if s == 0 {
        return Err(Error::Config("layer-wise sampling needs s >= 1".into()));
    }
    let batch = normalized_batch(graph, batch)?;
    let l = graph.laplacian();
    let n = graph.num_nodes();
    build_top_down(batch, n_layers, |layer, output| {
        src.enter_layer(layer);
        let (candidates, weights): (Vec<usize>, Vec<f64>) = if dependent {
            let mut w = vec![0.0; n];
            for &i in output {
                let (cols, vals) = l.row(i);
                for (&j, &v) in cols.iter().zip(vals) {
                    w[j] += v * v;
                }
            }
            union_support(l, output)
                .into_iter()
                .map(|j| (j, w[j]))
                .unzip()
        } else {
            (0..n).map(|j| (j, graph.column_norms_sq()[j])).unzip()
        };
        let pi = inclusion_probabilities(&weights, s)?;
        let mut kept: Vec<Option<f64>> = vec![None; n];
        let mut input = Vec::new();
        for k in src.systematic(&pi) {
            let j = candidates[k];
            kept[j] = Some(pi[k]);
            input.push(j);
        }
        input.sort_unstable();
        let mut entries = Vec::new();
        for &i in output {
            let (cols, vals) = l.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                if let Some(p) = kept[j] {
                    entries.push((i, j, v / p));
                }
            }
        }
        Ok((SparseMatrix::from_triplets(n, n, entries)?, input))
    })
}

/// Draws one node set ℬ of `size` nodes by importance `p_j ∝ Σ_i L_ij²` and
/// uses the ℬ×ℬ restriction of `L`, columns scaled by `1/π_j`, at every layer.
/// The loss batch is ℬ ∩ train; draws missing the training set are retried.
pub fn sample_subgraph(
    graph: &GraphDataset,
    size: usize,
    n_layers: usize,
    src: &mut dyn ChoiceSource,
) -> Result<LayerPlan> {
    check_layers(n_layers)?;
    if size < 2 {
        return Err(Error::Config(format!(
            "subgraph size must be >= 2, got {size}"
        )));
    }
    let l = graph.laplacian();
    let n = graph.num_nodes();
    let pi = inclusion_probabilities(graph.column_norms_sq(), size)?;
    let mut is_train = vec![false; n];
    for &i in graph.train_nodes() {
        is_train[i] = true;
    }
    src.enter_layer(1);
    for _ in 0..SUBGRAPH_RETRIES {
        let nodes = src.systematic(&pi);
        let batch: Vec<usize> = nodes.iter().copied().filter(|&i| is_train[i]).collect();
        if batch.is_empty() {
            continue;
        }
        let mut inside = vec![false; n];
        for &j in &nodes {
            inside[j] = true;
        }
        let mut entries = Vec::new();
        for &i in &nodes {
            let (cols, vals) = l.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                if inside[j] {
                    entries.push((i, j, v / pi[j]));
                }
            }
        }
        let laplacian = SparseMatrix::from_triplets(n, n, entries)?;
        let layer = PlanLayer {
            laplacian,
            input_nodes: nodes.clone(),
            output_nodes: nodes,
        };
        return Ok(LayerPlan {
            batch,
            layers: vec![layer; n_layers],
        });
    }
    Err(Error::SamplerDegenerate(format!(
        "{SUBGRAPH_RETRIES} subgraph draws contained no training node"
    )))
}

/// Dispatches on `config.strategy`. The subgraph sampler ignores `batch` and
/// chooses its own.
pub fn sample_plan(
    graph: &GraphDataset,
    config: &SamplerConfig,
    batch: &[usize],
    n_layers: usize,
    src: &mut dyn ChoiceSource,
) -> Result<LayerPlan> {
    config.validate()?;
    let size = config.size().unwrap_or(0);
    match config.strategy {
        Strategy::Exact => sample_exact(graph, batch, n_layers),
        Strategy::Nodewise => sample_nodewise(graph, batch, n_layers, size, src),
        Strategy::Fastgcn => sample_layerwise(graph, batch, n_layers, size, false, src),
        Strategy::Ladies => sample_layerwise(graph, batch, n_layers, size, true, src),
        Strategy::Subgraph => sample_subgraph(graph, size, n_layers, src),
    }
}
