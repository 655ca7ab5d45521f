//! Gradient error instruments: MSE against the full gradient, its
//! bias/variance decomposition, and finite-difference gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::GraphDataset;
use crate::matrix::DenseMatrix;
use crate::model::{
    evaluate_loss, forward_full, forward_sampled, full_gradient, sampled_gradient, GradientSet,
    ModelParams,
};
use crate::sampler::{
    enumerate, sample_plan, ChoiceSource, LayerPlan, Purpose, RandomChoice, SamplerConfig,
    ENUMERATION_LIMIT,
};

fn sq_dist(a: &[DenseMatrix], b: &[DenseMatrix]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "grad_mse",
            format!("{} vs {} layers", a.len(), b.len()),
        ));
    }
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        if x.shape() != y.shape() {
            return Err(Error::shape(
                "grad_mse",
                format!("{:?} vs {:?}", x.shape(), y.shape()),
            ));
        }
        acc += x
            .values()
            .iter()
            .zip(y.values())
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>();
    }
    Ok(acc)
}

/// `Σ_ℓ ‖G̃^(ℓ) − G^(ℓ)‖²_F` over the weight gradients.
pub fn grad_mse(stoch: &GradientSet, full: &GradientSet) -> Result<f64> {
    sq_dist(&stoch.weight_grads, &full.weight_grads)
}

/// Sum with pairwise splitting to bound rounding drift.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let (a, b) = xs.split_at(xs.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecompositionMethod {
    Enumerate,
    MonteCarlo,
}

impl DecompositionMethod {
    pub fn name(self) -> &'static str {
        match self {
            DecompositionMethod::Enumerate => "enumerate",
            DecompositionMethod::MonteCarlo => "monte-carlo",
        }
    }
}

/// Error of a stochastic gradient estimator against the full gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub mse: f64,
    pub bias_sq: f64,
    pub variance: f64,
    /// Standard error of `mse` (zero for enumeration).
    pub stderr: f64,
    /// Number of draws, or of enumerated outcomes.
    pub samples: usize,
    pub method: DecompositionMethod,
}

fn mean_of(grads: &[(f64, &[DenseMatrix])]) -> Result<Vec<DenseMatrix>> {
    let first = grads
        .first()
        .ok_or_else(|| Error::Config("no gradients to average".into()))?
        .1;
    let mut mean: Vec<DenseMatrix> = first
        .iter()
        .map(|m| DenseMatrix::zeros(m.n_rows(), m.n_cols()))
        .collect();
    for (w, g) in grads {
        for (acc, m) in mean.iter_mut().zip(g.iter()) {
            acc.axpy(*w, m)?;
        }
    }
    Ok(mean)
}

/// Monte-Carlo decomposition from `n ≥ 2` equally likely draws:
/// `mse = mean ‖g_k − ∇L‖²`, `bias² = ‖ḡ − ∇L‖²`,
/// `variance = Σ‖g_k − ḡ‖² / (n−1)`, so that
/// `mse = bias² + variance·(n−1)/n` up to rounding.
pub fn decompose_draws(draws: &[Vec<DenseMatrix>], full: &[DenseMatrix]) -> Result<Decomposition> {
    let n = draws.len();
    if n < 2 {
        return Err(Error::Config(format!("need at least 2 draws, got {n}")));
    }
    let w = 1.0 / n as f64;
    let weighted: Vec<(f64, &[DenseMatrix])> = draws.iter().map(|d| (w, d.as_slice())).collect();
    let mean = mean_of(&weighted)?;
    let errs: Vec<f64> = draws
        .iter()
        .map(|d| sq_dist(d, full))
        .collect::<Result<_>>()?;
    let spread: Vec<f64> = draws
        .iter()
        .map(|d| sq_dist(d, &mean))
        .collect::<Result<_>>()?;
    let mse = pairwise_sum(&errs) / n as f64;
    let var_err = errs.iter().map(|e| (e - mse) * (e - mse)).sum::<f64>() / (n - 1) as f64;
    Ok(Decomposition {
        mse,
        bias_sq: sq_dist(&mean, full)?,
        variance: pairwise_sum(&spread) / (n - 1) as f64,
        stderr: (var_err / n as f64).sqrt(),
        samples: n,
        method: DecompositionMethod::MonteCarlo,
    })
}

/// Exact decomposition over weighted outcomes `(p_k, g_k)` with `Σ p_k = 1`:
/// `mse = Σ p‖g − ∇L‖²`, `bias² = ‖E g − ∇L‖²`, `variance = Σ p‖g − E g‖²`.
pub fn decompose_enumerated(
    outcomes: &[(f64, Vec<DenseMatrix>)],
    full: &[DenseMatrix],
) -> Result<Decomposition> {
    let weighted: Vec<(f64, &[DenseMatrix])> =
        outcomes.iter().map(|(p, g)| (*p, g.as_slice())).collect();
    let mean = mean_of(&weighted)?;
    let mut mse = Vec::with_capacity(outcomes.len());
    let mut var = Vec::with_capacity(outcomes.len());
    for (p, g) in outcomes {
        mse.push(p * sq_dist(g, full)?);
        var.push(p * sq_dist(g, &mean)?);
    }
    Ok(Decomposition {
        mse: pairwise_sum(&mse),
        bias_sq: sq_dist(&mean, full)?,
        variance: pairwise_sum(&var),
        stderr: 0.0,
        samples: outcomes.len(),
        method: DecompositionMethod::Enumerate,
    })
}

/// How the loss batch is chosen for each draw.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BatchLaw {
    /// The same batch every draw.
    Fixed(Vec<usize>),
    /// `B` training nodes uniformly without replacement.
    Uniform(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnalysisMethod {
    Enumerate,
    MonteCarlo(usize),
}

fn draw_batch(graph: &GraphDataset, law: &BatchLaw, src: &mut dyn ChoiceSource) -> Vec<usize> {
    match law {
        BatchLaw::Fixed(b) => b.clone(),
        BatchLaw::Uniform(size) => {
            let train = graph.train_nodes();
            src.subset(train.len(), (*size).min(train.len()))
                .into_iter()
                .map(|k| train[k])
                .collect()
        }
    }
}

/// One stochastic gradient: draw a batch under `law`, a plan under `config`,
/// and differentiate the sampled loss.
pub fn stochastic_gradient(
    graph: &GraphDataset,
    params: &ModelParams,
    config: &SamplerConfig,
    law: &BatchLaw,
    src: &mut dyn ChoiceSource,
) -> Result<Vec<DenseMatrix>> {
    let batch = draw_batch(graph, law, src);
    let plan = sample_plan(graph, config, &batch, params.n_layers(), src)?;
    Ok(sampled_gradient(graph, params, &plan)?.2.weight_grads)
}

/// Decomposes the error of the sampled gradient at `params` against the
/// full gradient over the training nodes.
pub fn bias_variance_decompose(
    graph: &GraphDataset,
    params: &ModelParams,
    config: &SamplerConfig,
    law: &BatchLaw,
    method: AnalysisMethod,
) -> Result<Decomposition> {
    if graph.train_nodes().is_empty() {
        return Err(Error::Config("no training nodes".into()));
    }
    if let BatchLaw::Uniform(0) = law {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let full = full_gradient(graph, params, graph.train_nodes())?
        .2
        .weight_grads;
    match method {
        AnalysisMethod::Enumerate => {
            let outcomes = enumerate(ENUMERATION_LIMIT, |c| {
                stochastic_gradient(graph, params, config, law, c)
            })?;
            let weighted: Vec<(f64, Vec<DenseMatrix>)> =
                outcomes.into_iter().map(|o| (o.prob, o.value)).collect();
            decompose_enumerated(&weighted, &full)
        }
        AnalysisMethod::MonteCarlo(n) => {
            let draws = (0..n)
                .map(|k| {
                    let mut src = RandomChoice::new(config.seed, Purpose::Analysis, k as u64);
                    stochastic_gradient(graph, params, config, law, &mut src)
                })
                .collect::<Result<Vec<_>>>()?;
            decompose_draws(&draws, &full)
        }
    }
}

/// Whose loss a finite-difference gradient differentiates.
#[derive(Clone, Copy, Debug)]
pub enum FdTarget<'a> {
    /// Full-graph loss averaged over these nodes.
    Full(&'a [usize]),
    /// Loss of a fixed sampled plan on its batch.
    Plan(&'a LayerPlan),
}

fn target_loss(graph: &GraphDataset, params: &ModelParams, target: FdTarget) -> Result<f64> {
    match target {
        FdTarget::Full(nodes) => {
            let cache = forward_full(graph, params)?;
            evaluate_loss(cache.output(), graph.labels(), nodes, params.loss)
        }
        FdTarget::Plan(plan) => {
            let cache = forward_sampled(graph, params, plan)?;
            evaluate_loss(cache.output(), graph.labels(), &plan.batch, params.loss)
        }
    }
}

/// Central differences `(f(w+h) − f(w−h)) / 2h` for every weight entry, one
/// coordinate at a time. An empty loss batch yields zeros.
pub fn finite_difference_gradient(
    graph: &GraphDataset,
    params: &ModelParams,
    target: FdTarget,
    step: f64,
) -> Result<Vec<DenseMatrix>> {
    if !(step > 0.0) {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let mut out: Vec<DenseMatrix> = params
        .weights
        .iter()
        .map(|w| DenseMatrix::zeros(w.n_rows(), w.n_cols()))
        .collect();
    let empty = match target {
        FdTarget::Full(nodes) => nodes.is_empty(),
        FdTarget::Plan(plan) => plan.batch.is_empty(),
    };
    if empty {
        return Ok(out);
    }
    let mut probe = params.clone();
    for l in 0..params.n_layers() {
        for k in 0..params.weights[l].values().len() {
            let w = params.weights[l].values()[k];
            probe.weights[l].values_mut()[k] = w + step;
            let plus = target_loss(graph, &probe, target)?;
            probe.weights[l].values_mut()[k] = w - step;
            let minus = target_loss(graph, &probe, target)?;
            probe.weights[l].values_mut()[k] = w;
            out[l].values_mut()[k] = (plus - minus) / (2.0 * step);
        }
    }
    Ok(out)
}

/// `max_k |a_k − b_k| / max(|a_k|, |b_k|, floor)` across all layers.
pub fn max_relative_error(a: &[DenseMatrix], b: &[DenseMatrix], floor: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("max_relative_error", "layer counts differ"));
    }
    let mut worst: f64 = 0.0;
    for (x, y) in a.iter().zip(b) {
        if x.shape() != y.shape() {
            return Err(Error::shape("max_relative_error", "shapes differ"));
        }
        for (&p, &q) in x.values().iter().zip(y.values()) {
            worst = worst.max((p - q).abs() / p.abs().max(q.abs()).max(floor));
        }
    }
    Ok(worst)
}
