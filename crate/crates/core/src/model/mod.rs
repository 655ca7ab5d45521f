//! The L-layer GCN `H^(ℓ) = σ(L H^(ℓ−1) W^(ℓ))`, `H^(0) = X`, with explicit
//! forward and backward recursions.

mod loss;
mod propagate;

pub use loss::{evaluate_loss, loss_and_output_grad, LossKind};
pub use propagate::{
    backward_full, backward_sampled, backward_with, forward_full, forward_sampled, full_gradient,
    sampled_gradient,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Elu,
    Identity,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Elu => {
                if z > 0.0 {
                    z
                } else {
                    z.exp_m1()
                }
            }
            Activation::Identity => z,
        }
    }

    /// Derivative; at `z = 0` ELU takes the right limit 1 and ReLU takes 0.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Elu => {
                if z >= 0.0 {
                    1.0
                } else {
                    z.exp()
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Layer weights `W^(ℓ)` (d_{ℓ−1}×d_ℓ), `weights[0]` being layer 1. No biases.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub weights: Vec<DenseMatrix>,
    pub activation: Activation,
    pub loss: LossKind,
}

impl ModelParams {
    pub fn new(weights: Vec<DenseMatrix>, activation: Activation, loss: LossKind) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::shape("ModelParams::new", "no layers"));
        }
        for (k, pair) in weights.windows(2).enumerate() {
            if pair[0].n_cols() != pair[1].n_rows() {
                return Err(Error::shape(
                    "ModelParams::new",
                    format!(
                        "layer {} outputs {} columns but layer {} expects {}",
                        k + 1,
                        pair[0].n_cols(),
                        k + 2,
                        pair[1].n_rows()
                    ),
                ));
            }
        }
        Ok(Self {
            weights,
            activation,
            loss,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    /// `(d_0, d_1, …, d_L)`
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.weights[0].n_rows()];
        d.extend(self.weights.iter().map(DenseMatrix::n_cols));
        d
    }

    /// Euclidean distance between the stacked weights.
    pub fn distance(&self, other: &Self) -> Result<f64> {
        if self.dims() != other.dims() {
            return Err(Error::shape("ModelParams::distance", "different dims"));
        }
        let mut acc = 0.0;
        for (a, b) in self.weights.iter().zip(&other.weights) {
            acc += a.sub(b)?.frobenius_norm_sq();
        }
        Ok(acc.sqrt())
    }
}

/// Glorot-uniform weights in `±√(6/(d_in+d_out))` for dims `(d_0, …, d_L)`.
pub fn init_params(
    dims: &[usize],
    activation: Activation,
    loss: LossKind,
    seed: u64,
) -> Result<ModelParams> {
    if dims.len() < 2 {
        return Err(Error::shape("init_params", "need at least one layer"));
    }
    if let Some(k) = dims.iter().position(|&d| d == 0) {
        return Err(Error::shape(
            "init_params",
            format!("dimension {k} is zero"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = dims
        .windows(2)
        .map(|d| {
            let bound = (6.0 / (d[0] + d[1]) as f64).sqrt();
            DenseMatrix::from_fn(d[0], d[1], |_, _| rng.random_range(-bound..=bound))
        })
        .collect();
    ModelParams::new(weights, activation, loss)
}

/// Per-layer pre-activations and activations; `z[0]`, `h[0]` are layer 1.
/// Rows outside a layer's output nodes are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardCache {
    pub z: Vec<DenseMatrix>,
    pub h: Vec<DenseMatrix>,
}

impl ForwardCache {
    /// `H^(L)`
    pub fn output(&self) -> &DenseMatrix {
        self.h.last().expect("at least one layer")
    }

    /// `H^(ℓ−1)` for 1-based `l`, with `H^(0) = x`.
    pub fn input<'a>(&'a self, x: &'a DenseMatrix, l: usize) -> &'a DenseMatrix {
        if l == 1 {
            x
        } else {
            &self.h[l - 2]
        }
    }
}

/// Weight gradients `G^(ℓ)`, embedding gradients `D^(ℓ)` (N×d_{ℓ−1}) and
/// the output gradient `D^(L+1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub weight_grads: Vec<DenseMatrix>,
    pub embed_grads: Vec<DenseMatrix>,
    pub output_grad: DenseMatrix,
}

impl GradientSet {
    pub fn zeros(params: &ModelParams, n_nodes: usize) -> Self {
        let dims = params.dims();
        Self {
            weight_grads: params
                .weights
                .iter()
                .map(|w| DenseMatrix::zeros(w.n_rows(), w.n_cols()))
                .collect(),
            embed_grads: dims[..dims.len() - 1]
                .iter()
                .map(|&d| DenseMatrix::zeros(n_nodes, d))
                .collect(),
            output_grad: DenseMatrix::zeros(n_nodes, dims[dims.len() - 1]),
        }
    }

    /// `Σ_ℓ ‖G^(ℓ)‖²_F`
    pub fn norm_sq(&self) -> f64 {
        self.weight_grads
            .iter()
            .map(DenseMatrix::frobenius_norm_sq)
            .sum()
    }
}
