use super::{loss_and_output_grad, Activation, ForwardCache, GradientSet, ModelParams};
use crate::error::{Error, Result};
use crate::graph::GraphDataset;
use crate::matrix::{DenseMatrix, SparseMatrix};
use crate::sampler::LayerPlan;

/// `Z = (L H) W`, `H' = σ(Z)`.
pub(crate) fn layer_forward(
    lap: &SparseMatrix,
    input: &DenseMatrix,
    w: &DenseMatrix,
    act: Activation,
) -> Result<(DenseMatrix, DenseMatrix)> {
    let z = lap.spmm(input)?.matmul(w)?;
    let h = z.map(|v| act.apply(v));
    Ok((z, h))
}

fn forward_with(
    laps: &[&SparseMatrix],
    x: &DenseMatrix,
    params: &ModelParams,
) -> Result<ForwardCache> {
    if x.n_cols() != params.dims()[0] {
        return Err(Error::shape(
            "forward",
            format!(
                "{} feature columns, model expects {}",
                x.n_cols(),
                params.dims()[0]
            ),
        ));
    }
    let mut z = Vec::with_capacity(laps.len());
    let mut h: Vec<DenseMatrix> = Vec::with_capacity(laps.len());
    for (lap, w) in laps.iter().zip(&params.weights) {
        let input = h.last().unwrap_or(x);
        let (zl, hl) = layer_forward(lap, input, w, params.activation)?;
        z.push(zl);
        h.push(hl);
    }
    Ok(ForwardCache { z, h })
}

fn plan_laplacians<'a>(
    graph: &GraphDataset,
    params: &ModelParams,
    plan: &'a LayerPlan,
) -> Result<Vec<&'a SparseMatrix>> {
    if plan.n_layers() != params.n_layers() {
        return Err(Error::shape(
            "plan",
            format!(
                "{} plan layers for a {}-layer model",
                plan.n_layers(),
                params.n_layers()
            ),
        ));
    }
    let n = graph.num_nodes();
    plan.layers
        .iter()
        .map(|layer| {
            let l = &layer.laplacian;
            if l.n_rows() != n || l.n_cols() != n {
                Err(Error::shape(
                    "plan",
                    format!(
                        "sampled Laplacian is {}x{} on a {n}-node graph",
                        l.n_rows(),
                        l.n_cols()
                    ),
                ))
            } else {
                Ok(l)
            }
        })
        .collect()
}

pub fn forward_full(graph: &GraphDataset, params: &ModelParams) -> Result<ForwardCache> {
    let laps = vec![graph.laplacian(); params.n_layers()];
    forward_with(&laps, graph.features(), params)
}

/// Forward pass with the plan's per-layer Laplacians; rows outside each
/// layer's output nodes stay zero.
pub fn forward_sampled(
    graph: &GraphDataset,
    params: &ModelParams,
    plan: &LayerPlan,
) -> Result<ForwardCache> {
    let laps = plan_laplacians(graph, params, plan)?;
    forward_with(&laps, graph.features(), params)
}

/// Backward recursion for layers `ℓ = L..1` with per-layer propagation
/// matrices `laps`:
///
/// ```text
/// M      = D^(ℓ+1) ∘ σ′(Z^(ℓ))
/// G^(ℓ)  = (L H^(ℓ−1))ᵀ M
/// D^(ℓ)  = (Lᵀ M) W^(ℓ)ᵀ
/// ```
pub fn backward_with(
    laps: &[&SparseMatrix],
    x: &DenseMatrix,
    cache: &ForwardCache,
    output_grad: &DenseMatrix,
    params: &ModelParams,
) -> Result<GradientSet> {
    let n_layers = params.n_layers();
    if laps.len() != n_layers || cache.z.len() != n_layers || cache.h.len() != n_layers {
        return Err(Error::shape("backward", "layer counts disagree"));
    }
    if output_grad.shape() != cache.output().shape() {
        return Err(Error::shape(
            "backward",
            format!(
                "output gradient {:?} vs output {:?}",
                output_grad.shape(),
                cache.output().shape()
            ),
        ));
    }
    let mut weight_grads = vec![DenseMatrix::zeros(0, 0); n_layers];
    let mut embed_grads = vec![DenseMatrix::zeros(0, 0); n_layers];
    let mut upstream = output_grad.clone();
    for l in (1..=n_layers).rev() {
        let lap = laps[l - 1];
        let act = params.activation;
        let m = upstream.hadamard(&cache.z[l - 1].map(|v| act.derivative(v)))?;
        let lh = lap.spmm(cache.input(x, l))?;
        weight_grads[l - 1] = lh.t_matmul(&m)?;
        let d = lap.t_spmm(&m)?.matmul_t(&params.weights[l - 1])?;
        embed_grads[l - 1] = d.clone();
        upstream = d;
    }
    Ok(GradientSet {
        weight_grads,
        embed_grads,
        output_grad: output_grad.clone(),
    })
}

pub fn backward_full(
    graph: &GraphDataset,
    cache: &ForwardCache,
    output_grad: &DenseMatrix,
    params: &ModelParams,
) -> Result<GradientSet> {
    let laps = vec![graph.laplacian(); params.n_layers()];
    backward_with(&laps, graph.features(), cache, output_grad, params)
}

pub fn backward_sampled(
    graph: &GraphDataset,
    plan: &LayerPlan,
    cache: &ForwardCache,
    output_grad: &DenseMatrix,
    params: &ModelParams,
) -> Result<GradientSet> {
    let laps = plan_laplacians(graph, params, plan)?;
    backward_with(&laps, graph.features(), cache, output_grad, params)
}

/// Full-graph loss and gradient of the mean loss over `nodes`.
pub fn full_gradient(
    graph: &GraphDataset,
    params: &ModelParams,
    nodes: &[usize],
) -> Result<(f64, ForwardCache, GradientSet)> {
    let cache = forward_full(graph, params)?;
    let (loss, d_out) = loss_and_output_grad(cache.output(), graph.labels(), nodes, params.loss)?;
    let grads = backward_full(graph, &cache, &d_out, params)?;
    Ok((loss, cache, grads))
}

/// Loss and gradient of the sampled computation graph on `plan.batch`.
pub fn sampled_gradient(
    graph: &GraphDataset,
    params: &ModelParams,
    plan: &LayerPlan,
) -> Result<(f64, ForwardCache, GradientSet)> {
    let cache = forward_sampled(graph, params, plan)?;
    let (loss, d_out) =
        loss_and_output_grad(cache.output(), graph.labels(), &plan.batch, params.loss)?;
    let grads = backward_sampled(graph, plan, &cache, &d_out, params)?;
    Ok((loss, cache, grads))
}
