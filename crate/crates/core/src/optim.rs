//! Plain SGD and Adam over the layer weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::model::ModelParams;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

fn check_shapes(params: &ModelParams, grads: &[DenseMatrix]) -> Result<()> {
    if grads.len() != params.n_layers() {
        return Err(Error::shape(
            "optimizer",
            format!("{} gradients for {} layers", grads.len(), params.n_layers()),
        ));
    }
    for (w, g) in params.weights.iter().zip(grads) {
        if w.shape() != g.shape() {
            return Err(Error::shape(
                "optimizer",
                format!("gradient {:?} for weight {:?}", g.shape(), w.shape()),
            ));
        }
    }
    Ok(())
}

/// `W ← W − lr·G` for every layer.
pub fn sgd_step(params: &mut ModelParams, grads: &[DenseMatrix], lr: f64) -> Result<()> {
    check_shapes(params, grads)?;
    for (w, g) in params.weights.iter_mut().zip(grads) {
        w.axpy(-lr, g)?;
    }
    Ok(())
}

/// Optimizer with its per-parameter state.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<DenseMatrix>,
    v: Vec<DenseMatrix>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        Ok(Self {
            kind,
            lr,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Number of steps taken.
    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[DenseMatrix]) -> Result<()> {
        check_shapes(params, grads)?;
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => sgd_step(params, grads, self.lr),
            OptimizerKind::Adam => {
                if self.m.is_empty() {
                    let zeros = |w: &DenseMatrix| DenseMatrix::zeros(w.n_rows(), w.n_cols());
                    self.m = params.weights.iter().map(zeros).collect();
                    self.v = params.weights.iter().map(zeros).collect();
                }
                let t = self.t as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                for (((w, g), m), v) in params
                    .weights
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.m)
                    .zip(&mut self.v)
                {
                    let (w, g, m, v) = (w.values_mut(), g.values(), m.values_mut(), v.values_mut());
                    for k in 0..w.len() {
                        m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g[k];
                        v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g[k] * g[k];
                        let m_hat = m[k] / c1;
                        let v_hat = v[k] / c2;
                        w[k] -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
                    }
                }
                Ok(())
            }
        }
    }
}
