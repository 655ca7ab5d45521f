use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Labels;
use crate::matrix::DenseMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Softmax cross-entropy against a single class index.
    SoftmaxCe,
    /// Per-class sigmoid binary cross-entropy, summed over classes.
    /// Single-label targets are treated as one-hot rows.
    SigmoidBce,
}

fn target(labels: &Labels, i: usize, c: usize, n_classes: usize) -> Result<f64> {
    match labels {
        Labels::Single(y) => {
            if y[i] >= n_classes {
                return Err(Error::Label(format!(
                    "node {i} has class {}, output has {n_classes} columns",
                    y[i]
                )));
            }
            Ok(if y[i] == c { 1.0 } else { 0.0 })
        }
        Labels::Multi(m) => Ok(m.get(i, c)),
    }
}

fn check(output: &DenseMatrix, labels: &Labels, nodes: &[usize], loss: LossKind) -> Result<()> {
    if nodes.is_empty() {
        return Err(Error::Config("loss over an empty node set".into()));
    }
    if labels.len() != output.n_rows() {
        return Err(Error::shape(
            "loss",
            format!(
                "{} label rows for {} output rows",
                labels.len(),
                output.n_rows()
            ),
        ));
    }
    if let Some(&i) = nodes.iter().find(|&&i| i >= output.n_rows()) {
        return Err(Error::Config(format!(
            "loss node {i} outside {} nodes",
            output.n_rows()
        )));
    }
    match (labels, loss) {
        (Labels::Multi(_), LossKind::SoftmaxCe) => Err(Error::Label(
            "softmax cross-entropy needs single-label targets".into(),
        )),
        (Labels::Multi(m), _) if m.n_cols() != output.n_cols() => Err(Error::Label(format!(
            "{} label columns for {} outputs",
            m.n_cols(),
            output.n_cols()
        ))),
        _ => Ok(()),
    }
}

/// Per-node loss and, if `grad` is given, `∂loss/∂h` written into it.
fn node_loss(
    h: &[f64],
    labels: &Labels,
    i: usize,
    loss: LossKind,
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    let c = h.len();
    match loss {
        LossKind::SoftmaxCe => {
            let Labels::Single(y) = labels else {
                unreachable!("checked")
            };
            let y = y[i];
            if y >= c {
                return Err(Error::Label(format!(
                    "node {i} has class {y}, output has {c} columns"
                )));
            }
            let m = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = h.iter().map(|v| (v - m).exp()).sum();
            let lse = m + sum.ln();
            if let Some(g) = grad {
                for (k, gk) in g.iter_mut().enumerate() {
                    *gk = (h[k] - lse).exp() - if k == y { 1.0 } else { 0.0 };
                }
            }
            Ok(lse - h[y])
        }
        LossKind::SigmoidBce => {
            let mut total = 0.0;
            let mut grad = grad;
            for (k, &z) in h.iter().enumerate() {
                let t = target(labels, i, k, c)?;
                total += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
                if let Some(g) = grad.as_deref_mut() {
                    let s = if z >= 0.0 {
                        1.0 / (1.0 + (-z).exp())
                    } else {
                        let e = z.exp();
                        e / (1.0 + e)
                    };
                    g[k] = s - t;
                }
            }
            Ok(total)
        }
    }
}

/// Mean loss over `batch` of the final activations `output` (N×C) and the
/// output gradient `D^(L+1)`, whose row `i` is `(1/B)·∂loss_i/∂h_i` for
/// `i ∈ batch` and zero elsewhere.
pub fn loss_and_output_grad(
    output: &DenseMatrix,
    labels: &Labels,
    batch: &[usize],
    loss: LossKind,
) -> Result<(f64, DenseMatrix)> {
    check(output, labels, batch, loss)?;
    let inv_b = 1.0 / batch.len() as f64;
    let mut grad = DenseMatrix::zeros(output.n_rows(), output.n_cols());
    let mut row = vec![0.0; output.n_cols()];
    let mut total = 0.0;
    for &i in batch {
        total += node_loss(output.row(i), labels, i, loss, Some(&mut row))?;
        for (g, r) in grad.row_mut(i).iter_mut().zip(&row) {
            *g += inv_b * r;
        }
    }
    Ok((total * inv_b, grad))
}

/// Mean loss over `nodes` without the gradient.
pub fn evaluate_loss(
    output: &DenseMatrix,
    labels: &Labels,
    nodes: &[usize],
    loss: LossKind,
) -> Result<f64> {
    check(output, labels, nodes, loss)?;
    let mut total = 0.0;
    for &i in nodes {
        total += node_loss(output.row(i), labels, i, loss, None)?;
    }
    Ok(total / nodes.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_softmax() {
        let out = DenseMatrix::zeros(3, 4);
        let labels = Labels::Single(vec![1, 3, 0]);
        let (l, g) = loss_and_output_grad(&out, &labels, &[0, 2], LossKind::SoftmaxCe).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15);
        assert_eq!(g.row(0), &[0.125, 0.125 - 0.5, 0.125, 0.125]);
        assert_eq!(g.row(1), &[0.0; 4]);
    }

    #[test]
    fn bce_at_zero_logit() {
        let out = DenseMatrix::zeros(2, 2);
        let labels =
            Labels::Multi(DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let (l, g) = loss_and_output_grad(&out, &labels, &[0, 1], LossKind::SigmoidBce).unwrap();
        assert!((l - 2.0 * 2f64.ln()).abs() < 1e-15);
        assert_eq!(g.row(0), &[-0.25, 0.25]);
    }

    #[test]
    fn large_logits_stay_finite() {
        let out = DenseMatrix::from_rows(&[vec![800.0, -800.0]]).unwrap();
        for loss in [LossKind::SoftmaxCe, LossKind::SigmoidBce] {
            let (l, g) = loss_and_output_grad(&out, &Labels::Single(vec![1]), &[0], loss).unwrap();
            assert!(l.is_finite() && l > 0.0);
            assert!(g.is_finite());
        }
    }

    #[test]
    fn label_errors() {
        let out = DenseMatrix::zeros(1, 2);
        assert!(matches!(
            loss_and_output_grad(&out, &Labels::Single(vec![2]), &[0], LossKind::SoftmaxCe),
            Err(Error::Label(_))
        ));
        let multi = Labels::Multi(DenseMatrix::zeros(1, 2));
        assert!(matches!(
            loss_and_output_grad(&out, &multi, &[0], LossKind::SoftmaxCe),
            Err(Error::Label(_))
        ));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let vals = [
            0.3, -1.2, 0.7, 2.1, -0.4, 0.0, 1.5, -2.2, 0.9, 0.1, -0.6, 1.1,
        ];
        let out = DenseMatrix::from_vec(4, 3, vals.to_vec()).unwrap();
        let single = Labels::Single(vec![2, 0, 1, 1]);
        let multi = Labels::Multi(
            DenseMatrix::from_vec(4, 3, vec![1., 0., 1., 0., 0., 1., 1., 1., 0., 0., 1., 0.])
                .unwrap(),
        );
        let batch = [0, 1, 3];
        for (labels, loss) in [
            (&single, LossKind::SoftmaxCe),
            (&multi, LossKind::SigmoidBce),
        ] {
            let (_, g) = loss_and_output_grad(&out, labels, &batch, loss).unwrap();
            let step = 1e-6;
            for i in 0..4 {
                for c in 0..3 {
                    let mut plus = out.clone();
                    plus.set(i, c, out.get(i, c) + step);
                    let mut minus = out.clone();
                    minus.set(i, c, out.get(i, c) - step);
                    let fd = (evaluate_loss(&plus, labels, &batch, loss).unwrap()
                        - evaluate_loss(&minus, labels, &batch, loss).unwrap())
                        / (2.0 * step);
                    let a = g.get(i, c);
                    let rel = (fd - a).abs() / a.abs().max(fd.abs()).max(1e-3);
                    assert!(rel < 1e-6, "({i},{c}) {a} vs {fd}");
                }
            }
        }
    }
}
