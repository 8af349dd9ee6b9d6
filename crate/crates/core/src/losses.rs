//! Per-example losses `L(u, y)` with their output gradients and Hessians.
//!
//! Labels are class indices. Cross-entropy and squared loss take `y` as the
//! one-hot vector of that class over `K` outputs; the squared hinge loss has
//! a single output and reads class 0 as `-1` and class 1 as `+1`.

use serde::{Deserialize, Serialize};

use crate::error::{GulfError, Result};
use crate::numerics::{lse_unchecked, softmax_unchecked, DenseMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    CrossEntropy,
    Squared,
    SquaredHinge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Loss {
    pub kind: LossKind,
    pub num_classes: usize,
}

impl Loss {
    pub fn new(kind: LossKind, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(GulfError::InvalidParameter(format!(
                "a loss needs at least 2 classes, got {num_classes}"
            )));
        }
        if kind == LossKind::SquaredHinge && num_classes != 2 {
            return Err(GulfError::InvalidParameter(
                "squared hinge loss is binary".into(),
            ));
        }
        Ok(Self { kind, num_classes })
    }

    pub fn cross_entropy(num_classes: usize) -> Self {
        Self::new(LossKind::CrossEntropy, num_classes).expect("num_classes >= 2")
    }

    pub fn squared(num_classes: usize) -> Self {
        Self::new(LossKind::Squared, num_classes).expect("num_classes >= 2")
    }

    pub fn squared_hinge() -> Self {
        Self {
            kind: LossKind::SquaredHinge,
            num_classes: 2,
        }
    }

    /// Width of the model output this loss consumes.
    pub fn output_dim(&self) -> usize {
        match self.kind {
            LossKind::SquaredHinge => 1,
            _ => self.num_classes,
        }
    }

    /// Whether `∇L_y(u) = p(u) − y` with `p` independent of `y`.
    pub fn has_link_gradient(&self) -> bool {
        matches!(self.kind, LossKind::CrossEntropy | LossKind::Squared)
    }

    fn check(&self, u: &[f64], y: usize) -> Result<()> {
        if u.len() != self.output_dim() {
            return Err(GulfError::InvalidDimension(format!(
                "{:?} expects {} outputs, got {}",
                self.kind,
                self.output_dim(),
                u.len()
            )));
        }
        if y >= self.num_classes {
            return Err(GulfError::InvalidLabel {
                label: y,
                valid: format!("0..{}", self.num_classes),
            });
        }
        Ok(())
    }

    /// Vector representation of the label (one-hot, or `[±1]` for hinge).
    pub fn target(&self, y: usize) -> Result<Vec<f64>> {
        if y >= self.num_classes {
            return Err(GulfError::InvalidLabel {
                label: y,
                valid: format!("0..{}", self.num_classes),
            });
        }
        Ok(match self.kind {
            LossKind::SquaredHinge => vec![hinge_sign(y)],
            _ => one_hot(y, self.num_classes),
        })
    }

    /// The link `p(u)`: softmax for cross-entropy, identity for squared loss.
    pub fn link(&self, u: &[f64]) -> Result<Vec<f64>> {
        match self.kind {
            LossKind::CrossEntropy => Ok(softmax_unchecked(u)),
            LossKind::Squared => Ok(u.to_vec()),
            LossKind::SquaredHinge => Err(GulfError::Unsupported(
                "squared hinge loss has no link p(f) with ∇L = p(f) − y".into(),
            )),
        }
    }

    pub fn value(&self, u: &[f64], y: usize) -> Result<f64> {
        self.check(u, y)?;
        Ok(self.value_unchecked(u, y))
    }

    pub(crate) fn value_unchecked(&self, u: &[f64], y: usize) -> f64 {
        match self.kind {
            LossKind::CrossEntropy => lse_unchecked(u) - u[y],
            LossKind::Squared => {
                0.5 * u
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| {
                        let d = v - if k == y { 1.0 } else { 0.0 };
                        d * d
                    })
                    .sum::<f64>()
            }
            LossKind::SquaredHinge => {
                let m = (1.0 - hinge_sign(y) * u[0]).max(0.0);
                m * m
            }
        }
    }

    pub fn grad(&self, u: &[f64], y: usize) -> Result<Vec<f64>> {
        self.check(u, y)?;
        let mut g = vec![0.0; u.len()];
        self.grad_into(u, y, &mut g);
        Ok(g)
    }

    pub(crate) fn grad_into(&self, u: &[f64], y: usize, out: &mut [f64]) {
        match self.kind {
            LossKind::CrossEntropy => {
                let p = softmax_unchecked(u);
                for (k, o) in out.iter_mut().enumerate() {
                    *o = p[k] - if k == y { 1.0 } else { 0.0 };
                }
            }
            LossKind::Squared => {
                for (k, o) in out.iter_mut().enumerate() {
                    *o = u[k] - if k == y { 1.0 } else { 0.0 };
                }
            }
            LossKind::SquaredHinge => {
                let s = hinge_sign(y);
                out[0] = -2.0 * s * (1.0 - s * u[0]).max(0.0);
            }
        }
    }

    pub fn hessian(&self, u: &[f64], y: usize) -> Result<DenseMatrix> {
        self.check(u, y)?;
        match self.kind {
            LossKind::CrossEntropy => Ok(softmax_hessian(&softmax_unchecked(u))),
            LossKind::Squared => Ok(DenseMatrix::identity(u.len())),
            LossKind::SquaredHinge => Err(GulfError::Unsupported(
                "squared hinge loss is not twice differentiable at the kink".into(),
            )),
        }
    }
}

/// `diag(p) − p pᵀ`.
pub fn softmax_hessian(p: &[f64]) -> DenseMatrix {
    let k = p.len();
    let mut h = DenseMatrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            let v = if i == j { p[i] - p[i] * p[i] } else { -p[i] * p[j] };
            h.set(i, j, v);
        }
    }
    h
}

/// Cross-entropy of logits `u` against a soft target distribution `q`.
pub fn soft_cross_entropy(u: &[f64], q: &[f64]) -> f64 {
    let lse = lse_unchecked(u);
    u.iter().zip(q).map(|(&ui, &qi)| qi * (lse - ui)).sum()
}

pub fn one_hot(y: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[y] = 1.0;
    v
}

#[inline]
pub(crate) fn hinge_sign(y: usize) -> f64 {
    if y == 0 {
        -1.0
    } else {
        1.0
    }
}
