//! Historical embeddings and gradients for variance-reduced training.
//!
//! A snapshot runs an exact forward/backward (over all training nodes, or
//! over a large random pool using all neighbors) and stores `Z`, `D` and `G`.
//! Regular steps then correct the stored values with control variates:
//!
//! ```text
//! Z̃_t = Z̃_{t−1} + L̃ H̃_t W_t − L̃ H̃_{t−1} W_{t−1}
//! G̃_t = G̃_{t−1} + (L̃ H̃_t)ᵀ M_t − (L̃ H̃_{t−1})ᵀ M_{t−1}
//! D̃_t = D̃_{t−1} + L̃ᵀ M_t W_tᵀ − L̃ᵀ M_{t−1} W_{t−1}ᵀ
//! ```
//!
//! with `M = D̃^(ℓ+1) ∘ σ′(Z̃^(ℓ))`. Only rows of the plan's node sets change.

use log::info;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::GraphDataset;
use crate::matrix::DenseMatrix;
use crate::model::{
    backward_sampled, forward_sampled, full_gradient, loss_and_output_grad, ForwardCache,
    GradientSet, ModelParams,
};
use crate::sampler::{sample_exact, ChoiceSource, LayerPlan};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VrMode {
    /// Plain sampled gradients.
    None,
    /// Historical embeddings only.
    Zeroth,
    /// Historical embeddings and layerwise gradients.
    Doubly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotMode {
    FullBatch,
    /// Snapshot on `B′` random training nodes with all their neighbors.
    LargeBatch(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotConfig {
    pub mode: SnapshotMode,
    /// Base gap `K` between snapshots.
    pub gap: usize,
    /// Gap after `s` snapshots is `⌊K + growth·s⌋`.
    pub gap_growth: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for SnapshotConfig {
    fn default() -> Self {
        Self {
            mode: SnapshotMode::FullBatch,
            gap: 10,
            gap_growth: 0.0,
            alpha: 1.1,
            beta: 1.1,
        }
    }
}

impl SnapshotConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gap == 0 {
            return Err(Error::Config("snapshot gap must be >= 1".into()));
        }
        if !(self.gap_growth >= 0.0 && self.gap_growth.is_finite()) {
            return Err(Error::Config(format!(
                "gap growth {} must be >= 0",
                self.gap_growth
            )));
        }
        if !(self.alpha >= 1.0) || !(self.beta >= 1.0) {
            return Err(Error::Config(format!(
                "alpha and beta must be >= 1, got {} and {}",
                self.alpha, self.beta
            )));
        }
        if let SnapshotMode::LargeBatch(b) = self.mode {
            if b < 2 {
                return Err(Error::Config(format!(
                    "large-batch size must be >= 2, got {b}"
                )));
            }
        }
        Ok(())
    }

    /// Regular steps allowed after `snapshots` snapshots.
    pub fn gap_after(&self, snapshots: usize) -> usize {
        ((self.gap as f64 + self.gap_growth * snapshots as f64).floor() as usize).max(1)
    }
}

/// Stored `Z̃`, `D̃`, `G̃` plus snapshot metadata.
#[derive(Clone, Debug)]
pub struct HistoricalStore {
    z: Vec<DenseMatrix>,
    d: Vec<DenseMatrix>,
    g: Vec<DenseMatrix>,
    /// Weights that produced the current contents.
    weights: Vec<DenseMatrix>,
    snapshot_h_norms: Vec<f64>,
    snapshot_d_norms: Vec<f64>,
    last_snapshot_iter: usize,
    snapshot_count: usize,
    pool: Option<Vec<usize>>,
    alpha: f64,
    beta: f64,
}

impl HistoricalStore {
    pub fn new(alpha: f64, beta: f64) -> Self {
        Self {
            z: Vec::new(),
            d: Vec::new(),
            g: Vec::new(),
            weights: Vec::new(),
            snapshot_h_norms: Vec::new(),
            snapshot_d_norms: Vec::new(),
            last_snapshot_iter: 0,
            snapshot_count: 0,
            pool: None,
            alpha,
            beta,
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.snapshot_count > 0
    }

    pub fn z_store(&self) -> &[DenseMatrix] {
        &self.z
    }

    pub fn d_store(&self) -> &[DenseMatrix] {
        &self.d
    }

    pub fn g_store(&self) -> &[DenseMatrix] {
        &self.g
    }

    pub fn weights(&self) -> &[DenseMatrix] {
        &self.weights
    }

    pub fn snapshot_h_norms(&self) -> &[f64] {
        &self.snapshot_h_norms
    }

    pub fn snapshot_d_norms(&self) -> &[f64] {
        &self.snapshot_d_norms
    }

    pub fn last_snapshot_iter(&self) -> usize {
        self.last_snapshot_iter
    }

    pub fn snapshot_count(&self) -> usize {
        self.snapshot_count
    }

    /// Training nodes of the last large-batch snapshot; `None` after a full one.
    pub fn pool(&self) -> Option<&[usize]> {
        self.pool.as_deref()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    fn require_init(&self, op: &str) -> Result<()> {
        if self.is_initialized() {
            Ok(())
        } else {
            Err(Error::State(format!("{op} before any snapshot")))
        }
    }

    fn record_snapshot(
        &mut self,
        params: &ModelParams,
        cache: ForwardCache,
        grads: &GradientSet,
        iter: usize,
        pool: Option<Vec<usize>>,
    ) {
        self.snapshot_h_norms = cache.h.iter().map(DenseMatrix::frobenius_norm).collect();
        self.snapshot_d_norms = grads
            .embed_grads
            .iter()
            .map(DenseMatrix::frobenius_norm)
            .collect();
        self.z = cache.z;
        self.d = grads.embed_grads.clone();
        self.g = grads.weight_grads.clone();
        self.weights = params.weights.clone();
        self.last_snapshot_iter = iter;
        self.snapshot_count += 1;
        self.pool = pool;
    }

    /// Installs the time-`t` embeddings and the weights that produced them.
    pub fn commit_forward(&mut self, fwd: VrForward, params: &ModelParams) -> Result<()> {
        self.require_init("commit_forward")?;
        self.z = fwd.current.z;
        self.weights = params.weights.clone();
        Ok(())
    }

    /// Installs the time-`t` layerwise gradients.
    pub fn commit_backward(&mut self, grads: &GradientSet) -> Result<()> {
        self.require_init("commit_backward")?;
        self.d = grads.embed_grads.clone();
        self.g = grads.weight_grads.clone();
        Ok(())
    }
}

/// Full-batch snapshot over all training nodes at iteration `iter`.
pub fn snapshot_full(
    graph: &GraphDataset,
    params: &ModelParams,
    store: &mut HistoricalStore,
    iter: usize,
) -> Result<(f64, GradientSet)> {
    let (loss, cache, grads) = full_gradient(graph, params, graph.train_nodes())?;
    store.record_snapshot(params, cache, &grads, iter, None);
    Ok((loss, grads))
}

/// Snapshot on `b_prime` training nodes drawn uniformly without replacement,
/// propagated through all their neighbors. The drawn nodes become the pool
/// for the following regular steps. With `b_prime` at least the number of
/// training nodes this is exactly [`snapshot_full`].
pub fn snapshot_large_batch(
    graph: &GraphDataset,
    params: &ModelParams,
    store: &mut HistoricalStore,
    b_prime: usize,
    iter: usize,
    src: &mut dyn ChoiceSource,
) -> Result<(f64, GradientSet)> {
    let train = graph.train_nodes();
    if b_prime < 2 {
        return Err(Error::Config(format!(
            "large-batch size must be >= 2, got {b_prime}"
        )));
    }
    if b_prime >= train.len() {
        if b_prime > train.len() {
            info!(
                "large-batch size {b_prime} exceeds {} training nodes; using the full snapshot",
                train.len()
            );
        }
        return snapshot_full(graph, params, store, iter);
    }
    let pool: Vec<usize> = src
        .subset(train.len(), b_prime)
        .into_iter()
        .map(|k| train[k])
        .collect();
    let plan = sample_exact(graph, &pool, params.n_layers())?;
    let cache = forward_sampled(graph, params, &plan)?;
    let (loss, d_out) = loss_and_output_grad(cache.output(), graph.labels(), &pool, params.loss)?;
    let grads = backward_sampled(graph, &plan, &cache, &d_out, params)?;
    store.record_snapshot(params, cache, &grads, iter, Some(pool));
    Ok((loss, grads))
}

/// Embeddings before (`previous`, straight from the store) and after
/// (`current`) a regular forward step.
#[derive(Clone, Debug)]
pub struct VrForward {
    pub current: ForwardCache,
    pub previous: ForwardCache,
}

fn add_rows(base: &DenseMatrix, delta: &DenseMatrix, rows: &[usize]) -> DenseMatrix {
    let mut out = base.clone();
    for &i in rows {
        for (o, &d) in out.row_mut(i).iter_mut().zip(delta.row(i)) {
            *o += d;
        }
    }
    out
}

fn check_plan(plan: &LayerPlan, params: &ModelParams, store: &HistoricalStore) -> Result<()> {
    if plan.n_layers() != params.n_layers() || store.z.len() != params.n_layers() {
        return Err(Error::shape(
            "vr",
            format!(
                "plan has {} layers, model {}, store {}",
                plan.n_layers(),
                params.n_layers(),
                store.z.len()
            ),
        ));
    }
    Ok(())
}

/// Regular-step forward with historical embeddings. Does not modify the store.
pub fn forward_plus(
    graph: &GraphDataset,
    params: &ModelParams,
    plan: &LayerPlan,
    store: &HistoricalStore,
) -> Result<VrForward> {
    store.require_init("forward_plus")?;
    check_plan(plan, params, store)?;
    let act = params.activation;
    let x = graph.features();
    let previous = ForwardCache {
        z: store.z.clone(),
        h: store.z.iter().map(|z| z.map(|v| act.apply(v))).collect(),
    };
    let mut current = ForwardCache {
        z: Vec::with_capacity(params.n_layers()),
        h: Vec::with_capacity(params.n_layers()),
    };
    for l in 1..=params.n_layers() {
        let layer = plan.layer(l);
        let lap = &layer.laplacian;
        let new_term = lap
            .spmm(current.input(x, l))?
            .matmul(&params.weights[l - 1])?;
        let old_term = lap
            .spmm(previous.input(x, l))?
            .matmul(&store.weights[l - 1])?;
        let z = add_rows(
            &store.z[l - 1],
            &new_term.sub(&old_term)?,
            &layer.output_nodes,
        );
        current.h.push(z.map(|v| act.apply(v)));
        current.z.push(z);
    }
    Ok(VrForward { current, previous })
}

/// Regular-step backward with historical layerwise gradients. The time
/// `t−1` output gradient is recomputed on `plan.batch` from the stored
/// embeddings. Does not modify the store.
pub fn backward_plusplus(
    graph: &GraphDataset,
    plan: &LayerPlan,
    fwd: &VrForward,
    output_grad: &DenseMatrix,
    params: &ModelParams,
    store: &HistoricalStore,
) -> Result<GradientSet> {
    store.require_init("backward_plusplus")?;
    check_plan(plan, params, store)?;
    if store.d.len() != params.n_layers() || store.g.len() != params.n_layers() {
        return Err(Error::State("gradient store missing".into()));
    }
    let act = params.activation;
    let x = graph.features();
    let (_, prev_out_grad) = loss_and_output_grad(
        fwd.previous.output(),
        graph.labels(),
        &plan.batch,
        params.loss,
    )?;
    let n_layers = params.n_layers();
    let mut weight_grads = vec![DenseMatrix::zeros(0, 0); n_layers];
    let mut embed_grads = vec![DenseMatrix::zeros(0, 0); n_layers];
    let mut up_cur = output_grad.clone();
    let mut up_prev = prev_out_grad;
    for l in (1..=n_layers).rev() {
        let layer = plan.layer(l);
        let lap = &layer.laplacian;
        let m_cur = up_cur.hadamard(&fwd.current.z[l - 1].map(|v| act.derivative(v)))?;
        let m_prev = up_prev.hadamard(&fwd.previous.z[l - 1].map(|v| act.derivative(v)))?;

        let g_cur = lap.spmm(fwd.current.input(x, l))?.t_matmul(&m_cur)?;
        let g_prev = lap.spmm(fwd.previous.input(x, l))?.t_matmul(&m_prev)?;
        let mut g = store.g[l - 1].clone();
        g.add_assign(&g_cur.sub(&g_prev)?)?;
        weight_grads[l - 1] = g;

        let d_cur = lap.t_spmm(&m_cur)?.matmul_t(&params.weights[l - 1])?;
        let d_prev = lap.t_spmm(&m_prev)?.matmul_t(&store.weights[l - 1])?;
        let d = add_rows(&store.d[l - 1], &d_cur.sub(&d_prev)?, &layer.input_nodes);
        up_cur = d.clone();
        up_prev = store.d[l - 1].clone();
        embed_grads[l - 1] = d;
    }
    Ok(GradientSet {
        weight_grads,
        embed_grads,
        output_grad: output_grad.clone(),
    })
}

/// True when some `‖H̃^(ℓ)‖_F ≥ α·‖H^(ℓ)_{t_s}‖_F`, or, with `d_norms`, some
/// `‖D̃^(ℓ)‖_F ≥ β·‖D^(ℓ)_{t_s}‖_F`. A zero current norm never triggers.
pub fn early_stop_check(store: &HistoricalStore, h_norms: &[f64], d_norms: Option<&[f64]>) -> bool {
    let exceeds = |cur: &[f64], snap: &[f64], factor: f64| {
        cur.iter()
            .zip(snap)
            .any(|(&c, &s)| c > 0.0 && c >= factor * s)
    };
    exceeds(h_norms, &store.snapshot_h_norms, store.alpha)
        || d_norms.is_some_and(|d| exceeds(d, &store.snapshot_d_norms, store.beta))
}
