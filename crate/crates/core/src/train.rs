//! Training loops: plain sampled SGD (SGCN), historical embeddings (SGCN+)
//! and historical embeddings plus gradients (SGCN++).
//!
//! Iteration `t` draws from its own seeded streams, so a run is fully
//! determined by the configuration and seed. Measurements use separate
//! streams and never alter the trajectory.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analysis::{decompose_draws, grad_mse};
use crate::error::{Error, Result};
use crate::graph::{GraphDataset, Labels, Split};
use crate::matrix::DenseMatrix;
use crate::model::{
    backward_sampled, evaluate_loss, forward_full, full_gradient, loss_and_output_grad,
    sampled_gradient, GradientSet, ModelParams,
};
use crate::optim::{Optimizer, OptimizerKind};
use crate::sampler::{
    derive_seed, sample_plan, ChoiceSource, Purpose, RandomChoice, SamplerConfig,
};
pub use crate::vr::VrMode;
use crate::vr::{
    backward_plusplus, early_stop_check, forward_plus, snapshot_full, snapshot_large_batch,
    HistoricalStore, SnapshotConfig, SnapshotMode, VrForward,
};

/// Which iterations get gradient-error measurements.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasureConfig {
    /// Measure `grad_mse` every `every` iterations; 0 disables.
    pub every: usize,
    /// Extra gradient draws per measured iteration for bias and variance;
    /// 0 disables, otherwise at least 2.
    pub draws: usize,
}

impl MeasureConfig {
    pub fn off() -> Self {
        Self::default()
    }

    pub fn is_due(&self, iter: usize) -> bool {
        match (self.every, self.draws) {
            (0, 0) => false,
            (0, _) => true,
            (k, _) => iter % k == 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub sampler: SamplerConfig,
    pub vr_mode: VrMode,
    pub snapshot: SnapshotConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Defaults to `⌈N_train / batch_size⌉`.
    pub iters_per_epoch: Option<usize>,
    pub seed: u64,
    /// Validation metrics every this many iterations (and at the last one).
    pub eval_every: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub measure: MeasureConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerConfig::exact(),
            vr_mode: VrMode::None,
            snapshot: SnapshotConfig::default(),
            batch_size: 512,
            epochs: 1,
            iters_per_epoch: None,
            seed: 0,
            eval_every: 1,
            optimizer: OptimizerKind::Adam,
            lr: 0.01,
            measure: MeasureConfig::off(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.iters_per_epoch == Some(0) {
            return Err(Error::Config("iterations per epoch must be >= 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        if self.measure.draws == 1 {
            return Err(Error::Config("measurement draws must be 0 or >= 2".into()));
        }
        if self.vr_mode != VrMode::None {
            self.snapshot.validate()?;
        }
        Optimizer::new(self.optimizer, self.lr).map(|_| ())
    }

    pub fn iters_per_epoch(&self, n_train: usize) -> usize {
        self.iters_per_epoch
            .unwrap_or_else(|| n_train.div_ceil(self.batch_size).max(1))
    }
}

/// One row of the metric stream. Absent measurements are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub iter: usize,
    pub epoch: usize,
    /// Full-graph training loss at the parameters of this iteration.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub grad_mse: Option<f64>,
    pub bias_sq: Option<f64>,
    pub variance: Option<f64>,
    /// Norm of the gradient handed to the optimizer.
    pub grad_norm: Option<f64>,
    pub f1_val: Option<f64>,
    #[serde(with = "flag")]
    pub snapshot_flag: bool,
    pub wall_ms: f64,
}

mod flag {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(u8::from(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        match u8::deserialize(d)? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(serde::de::Error::custom(format!(
                "flag must be 0 or 1, got {v}"
            ))),
        }
    }
}

/// What a hook sees after the gradient of iteration `iter` is formed and
/// before the optimizer applies it.
pub struct StepView<'a> {
    pub iter: usize,
    pub params: &'a ModelParams,
    pub grads: &'a GradientSet,
    pub snapshot: bool,
    pub store: Option<&'a HistoricalStore>,
}

/// Fraction of correct argmax predictions (lowest index wins ties) for
/// single-label targets; micro-F1 at logit threshold 0 for multi-label ones.
/// An empty F1 denominator scores 1.
pub fn score(output: &DenseMatrix, labels: &Labels, nodes: &[usize]) -> Result<f64> {
    if nodes.is_empty() {
        return Err(Error::Config("score over an empty node set".into()));
    }
    match labels {
        Labels::Single(y) => {
            let correct = nodes
                .iter()
                .filter(|&&i| {
                    let row = output.row(i);
                    let best = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
                    best == y[i]
                })
                .count();
            Ok(correct as f64 / nodes.len() as f64)
        }
        Labels::Multi(m) => {
            let (mut tp, mut fp, mut fne) = (0usize, 0usize, 0usize);
            for &i in nodes {
                for (&z, &t) in output.row(i).iter().zip(m.row(i)) {
                    match (z > 0.0, t == 1.0) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fne += 1,
                        _ => {}
                    }
                }
            }
            let denom = 2 * tp + fp + fne;
            Ok(if denom == 0 {
                1.0
            } else {
                2.0 * tp as f64 / denom as f64
            })
        }
    }
}

/// Full-graph mean loss and score on a split.
pub fn evaluate(graph: &GraphDataset, params: &ModelParams, split: Split) -> Result<(f64, f64)> {
    let nodes = graph.masks().get(split);
    if nodes.is_empty() {
        return Err(Error::Config(format!("{split:?} split is empty")));
    }
    let cache = forward_full(graph, params)?;
    let loss = evaluate_loss(cache.output(), graph.labels(), nodes, params.loss)?;
    Ok((loss, score(cache.output(), graph.labels(), nodes)?))
}

/// Outcome of one gradient computation.
struct Step {
    grads: GradientSet,
    snapshot: bool,
    /// Pending store update for a regular variance-reduced step.
    pending: Option<VrForward>,
}

fn snapshot_due(config: &TrainConfig, store: &HistoricalStore, iter: usize) -> bool {
    !store.is_initialized()
        || iter - store.last_snapshot_iter() >= config.snapshot.gap_after(store.snapshot_count())
}

fn draw_batch(
    graph: &GraphDataset,
    config: &TrainConfig,
    store: Option<&HistoricalStore>,
    src: &mut dyn ChoiceSource,
) -> Vec<usize> {
    let pool = store
        .and_then(HistoricalStore::pool)
        .unwrap_or(graph.train_nodes());
    let size = config.batch_size.min(pool.len());
    src.subset(pool.len(), size)
        .into_iter()
        .map(|k| pool[k])
        .collect()
}

fn snapshot_step(
    graph: &GraphDataset,
    config: &TrainConfig,
    params: &ModelParams,
    store: &mut HistoricalStore,
    iter: usize,
    src: &mut dyn ChoiceSource,
) -> Result<GradientSet> {
    let (_, grads) = match config.snapshot.mode {
        SnapshotMode::FullBatch => snapshot_full(graph, params, store, iter)?,
        SnapshotMode::LargeBatch(b) => snapshot_large_batch(graph, params, store, b, iter, src)?,
    };
    Ok(grads)
}

/// A regular step against `store`; nothing is committed.
fn regular_step(
    graph: &GraphDataset,
    config: &TrainConfig,
    params: &ModelParams,
    store: Option<&HistoricalStore>,
    src: &mut dyn ChoiceSource,
) -> Result<(GradientSet, Option<VrForward>)> {
    let batch = draw_batch(graph, config, store, src);
    let plan = sample_plan(graph, &config.sampler, &batch, params.n_layers(), src)?;
    let Some(store) = store else {
        return Ok((sampled_gradient(graph, params, &plan)?.2, None));
    };
    let fwd = forward_plus(graph, params, &plan, store)?;
    let (_, d_out) = loss_and_output_grad(
        fwd.current.output(),
        graph.labels(),
        &plan.batch,
        params.loss,
    )?;
    let grads = match config.vr_mode {
        VrMode::Doubly => backward_plusplus(graph, &plan, &fwd, &d_out, params, store)?,
        _ => backward_sampled(graph, &plan, &fwd.current, &d_out, params)?,
    };
    Ok((grads, Some(fwd)))
}

/// The gradient iteration `iter` would use under `src`, computed on a
/// scratch copy of the store.
fn probe_gradient(
    graph: &GraphDataset,
    config: &TrainConfig,
    params: &ModelParams,
    store: Option<&HistoricalStore>,
    iter: usize,
    src: &mut dyn ChoiceSource,
) -> Result<GradientSet> {
    match store {
        Some(s) if snapshot_due(config, s, iter) => {
            let mut scratch = s.clone();
            snapshot_step(graph, config, params, &mut scratch, iter, src)
        }
        _ => Ok(regular_step(graph, config, params, store, src)?.0),
    }
}

fn take_step(
    graph: &GraphDataset,
    config: &TrainConfig,
    params: &ModelParams,
    store: Option<&mut HistoricalStore>,
    iter: usize,
) -> Result<Step> {
    let mut src = RandomChoice::new(config.seed, Purpose::Step, iter as u64);
    let Some(store) = store else {
        let (grads, _) = regular_step(graph, config, params, None, &mut src)?;
        return Ok(Step {
            grads,
            snapshot: false,
            pending: None,
        });
    };
    if !snapshot_due(config, store, iter) {
        let (grads, fwd) = regular_step(graph, config, params, Some(store), &mut src)?;
        let fwd = fwd.expect("variance-reduced step keeps its forward");
        let h_norms: Vec<f64> = fwd
            .current
            .h
            .iter()
            .map(DenseMatrix::frobenius_norm)
            .collect();
        let d_norms: Option<Vec<f64>> = (config.vr_mode == VrMode::Doubly).then(|| {
            grads
                .embed_grads
                .iter()
                .map(DenseMatrix::frobenius_norm)
                .collect()
        });
        if !early_stop_check(store, &h_norms, d_norms.as_deref()) {
            return Ok(Step {
                grads,
                snapshot: false,
                pending: Some(fwd),
            });
        }
        log::debug!("iteration {iter}: staleness check triggered a snapshot");
    }
    let mut snap_src = RandomChoice::new(config.seed, Purpose::Snapshot, iter as u64);
    let grads = snapshot_step(graph, config, params, store, iter, &mut snap_src)?;
    Ok(Step {
        grads,
        snapshot: true,
        pending: None,
    })
}

fn commit(
    config: &TrainConfig,
    store: Option<&mut HistoricalStore>,
    step: &mut Step,
    params: &ModelParams,
) -> Result<()> {
    if let (Some(store), Some(fwd)) = (store, step.pending.take()) {
        store.commit_forward(fwd, params)?;
        if config.vr_mode == VrMode::Doubly {
            store.commit_backward(&step.grads)?;
        }
    }
    Ok(())
}

/// Runs the loop selected by `config.vr_mode`, sending one record per
/// iteration to `sink`.
pub fn train(
    graph: &GraphDataset,
    params: ModelParams,
    config: &TrainConfig,
    sink: &mut dyn FnMut(RunRecord) -> Result<()>,
) -> Result<ModelParams> {
    train_with_hook(graph, params, config, sink, &mut |_| {})
}

/// [`train`] with a hook observing every gradient before it is applied.
pub fn train_with_hook(
    graph: &GraphDataset,
    mut params: ModelParams,
    config: &TrainConfig,
    sink: &mut dyn FnMut(RunRecord) -> Result<()>,
    hook: &mut dyn FnMut(&StepView),
) -> Result<ModelParams> {
    config.validate()?;
    let train_nodes = graph.train_nodes();
    if train_nodes.is_empty() {
        return Err(Error::Config("dataset has no training nodes".into()));
    }
    let per_epoch = config.iters_per_epoch(train_nodes.len());
    let total = config.epochs * per_epoch;
    let mut optimizer = Optimizer::new(config.optimizer, config.lr)?;
    let mut store = (config.vr_mode != VrMode::None)
        .then(|| HistoricalStore::new(config.snapshot.alpha, config.snapshot.beta));
    let has_val = !graph.masks().val.is_empty();

    for iter in 0..total {
        let started = Instant::now();
        let measured = config.measure.is_due(iter);

        let (train_loss, full) = if measured {
            let (loss, _, grads) = full_gradient(graph, &params, train_nodes)?;
            (loss, Some(grads))
        } else {
            let cache = forward_full(graph, &params)?;
            (
                evaluate_loss(cache.output(), graph.labels(), train_nodes, params.loss)?,
                None,
            )
        };

        let (mut bias_sq, mut variance) = (None, None);
        if let (Some(full), true) = (&full, measured && config.measure.draws >= 2) {
            let base = derive_seed(config.seed, &[iter as u64]);
            let draws = (0..config.measure.draws)
                .map(|k| {
                    let mut src = RandomChoice::new(base, Purpose::Measure, k as u64);
                    Ok(
                        probe_gradient(graph, config, &params, store.as_ref(), iter, &mut src)?
                            .weight_grads,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let d = decompose_draws(&draws, &full.weight_grads)?;
            bias_sq = Some(d.bias_sq);
            variance = Some(d.variance);
        }

        let mut step = take_step(graph, config, &params, store.as_mut(), iter)?;
        let grad_mse = match &full {
            Some(f) => Some(grad_mse(&step.grads, f)?),
            None => None,
        };
        hook(&StepView {
            iter,
            params: &params,
            grads: &step.grads,
            snapshot: step.snapshot,
            store: store.as_ref(),
        });

        let (val_loss, f1_val) = if has_val && (iter % config.eval_every == 0 || iter + 1 == total)
        {
            let (l, s) = evaluate(graph, &params, Split::Val)?;
            (Some(l), Some(s))
        } else {
            (None, None)
        };

        commit(config, store.as_mut(), &mut step, &params)?;
        optimizer.step(&mut params, &step.grads.weight_grads)?;

        sink(RunRecord {
            iter,
            epoch: iter / per_epoch,
            train_loss,
            val_loss,
            grad_mse,
            bias_sq,
            variance,
            grad_norm: Some(step.grads.norm_sq().sqrt()),
            f1_val,
            snapshot_flag: step.snapshot,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        })?;
    }
    Ok(params)
}

fn require_mode(config: &TrainConfig, mode: VrMode) -> Result<()> {
    if config.vr_mode != mode {
        return Err(Error::Config(format!(
            "this loop needs vr_mode {mode:?}, got {:?}",
            config.vr_mode
        )));
    }
    Ok(())
}

/// Plain sampled mini-batch training.
pub fn train_sgcn(
    graph: &GraphDataset,
    params: ModelParams,
    config: &TrainConfig,
    sink: &mut dyn FnMut(RunRecord) -> Result<()>,
) -> Result<ModelParams> {
    require_mode(config, VrMode::None)?;
    train(graph, params, config, sink)
}

/// Training with historical embeddings.
pub fn train_sgcn_plus(
    graph: &GraphDataset,
    params: ModelParams,
    config: &TrainConfig,
    sink: &mut dyn FnMut(RunRecord) -> Result<()>,
) -> Result<ModelParams> {
    require_mode(config, VrMode::Zeroth)?;
    train(graph, params, config, sink)
}

/// Training with historical embeddings and layerwise gradients.
pub fn train_sgcn_plusplus(
    graph: &GraphDataset,
    params: ModelParams,
    config: &TrainConfig,
    sink: &mut dyn FnMut(RunRecord) -> Result<()>,
) -> Result<ModelParams> {
    require_mode(config, VrMode::Doubly)?;
    train(graph, params, config, sink)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_sbm, Masks, NormalizeOptions, SbmConfig};
    use crate::model::{init_params, Activation, LossKind};

    fn sbm() -> GraphDataset {
        generate_sbm(&SbmConfig {
            n_nodes: 30,
            n_blocks: 3,
            p_in: 0.4,
            p_out: 0.05,
            feat_dim: 4,
            noise: 0.5,
            seed: 2,
        })
        .unwrap()
    }

    fn collect(graph: &GraphDataset, config: &TrainConfig) -> (ModelParams, Vec<RunRecord>) {
        let p = init_params(
            &[graph.num_features(), 8, graph.num_classes()],
            Activation::Elu,
            LossKind::SoftmaxCe,
            1,
        )
        .unwrap();
        let mut recs = Vec::new();
        let out = train(graph, p, config, &mut |r| {
            recs.push(r);
            Ok(())
        })
        .unwrap();
        (out, recs)
    }

    #[test]
    fn zero_epochs_leave_params() {
        let g = sbm();
        let config = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let p = init_params(&[4, 8, 3], Activation::Elu, LossKind::SoftmaxCe, 1).unwrap();
        let (out, recs) = collect(&g, &config);
        assert_eq!(out, p);
        assert!(recs.is_empty());
    }

    #[test]
    fn runs_are_deterministic() {
        let g = sbm();
        for vr in [VrMode::None, VrMode::Zeroth, VrMode::Doubly] {
            let config = TrainConfig {
                sampler: SamplerConfig::ladies(4),
                vr_mode: vr,
                batch_size: 6,
                epochs: 2,
                seed: 5,
                measure: MeasureConfig { every: 2, draws: 3 },
                snapshot: SnapshotConfig {
                    gap: 3,
                    ..SnapshotConfig::default()
                },
                ..TrainConfig::default()
            };
            let (pa, mut a) = collect(&g, &config);
            let (pb, mut b) = collect(&g, &config);
            for r in a.iter_mut().chain(b.iter_mut()) {
                r.wall_ms = 0.0;
            }
            assert_eq!(pa, pb);
            assert_eq!(a, b);
            assert!(a[0].bias_sq.is_some() && a[1].bias_sq.is_none());
        }
    }

    #[test]
    fn measurement_does_not_perturb_trajectory() {
        let g = sbm();
        let base = TrainConfig {
            sampler: SamplerConfig::nodewise(2),
            vr_mode: VrMode::Doubly,
            batch_size: 5,
            epochs: 1,
            seed: 3,
            ..TrainConfig::default()
        };
        let measured = TrainConfig {
            measure: MeasureConfig { every: 1, draws: 4 },
            ..base.clone()
        };
        let (pa, _) = collect(&g, &base);
        let (pb, _) = collect(&g, &measured);
        assert_eq!(pa, pb);
    }

    #[test]
    fn snapshot_accounting_without_early_stop() {
        let g = sbm();
        let config = TrainConfig {
            sampler: SamplerConfig::nodewise(2),
            vr_mode: VrMode::Zeroth,
            batch_size: 6,
            epochs: 1,
            iters_per_epoch: Some(23),
            snapshot: SnapshotConfig {
                gap: 5,
                alpha: 1e9,
                beta: 1e9,
                ..SnapshotConfig::default()
            },
            ..TrainConfig::default()
        };
        let (_, recs) = collect(&g, &config);
        assert_eq!(recs.iter().filter(|r| r.snapshot_flag).count(), 5);
        assert!(recs[0].snapshot_flag && recs[5].snapshot_flag && !recs[4].snapshot_flag);
    }

    #[test]
    fn loop_mode_is_checked() {
        let g = sbm();
        let p = init_params(&[4, 3], Activation::Elu, LossKind::SoftmaxCe, 1).unwrap();
        let config = TrainConfig::default();
        assert!(train_sgcn_plus(&g, p, &config, &mut |_| Ok(())).is_err());
    }

    #[test]
    fn scores() {
        let out =
            DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.5], vec![0.0, 2.0]]).unwrap();
        assert_eq!(
            score(&out, &Labels::Single(vec![0, 0, 1]), &[0, 1, 2]).unwrap(),
            1.0
        );
        assert_eq!(
            score(&out, &Labels::Single(vec![1, 1, 0]), &[0, 1, 2]).unwrap(),
            0.0
        );
        // TP = 2, FP = 1, FN = 1
        let logits = DenseMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, -1.0]]).unwrap();
        let y = Labels::Multi(DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap());
        assert!((score(&logits, &y, &[0, 1]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn evaluate_rejects_empty_split() {
        let g = GraphDataset::new(
            &[(0, 1)],
            DenseMatrix::zeros(2, 1),
            Labels::Single(vec![0, 1]),
            Masks {
                train: vec![0, 1],
                ..Masks::default()
            },
            2,
            NormalizeOptions::default(),
        )
        .unwrap();
        let p = init_params(&[1, 2], Activation::Elu, LossKind::SoftmaxCe, 0).unwrap();
        assert!(evaluate(&g, &p, Split::Train).is_ok());
        assert!(matches!(
            evaluate(&g, &p, Split::Test),
            Err(Error::Config(_))
        ));
    }
}
