//! Bregman generators, divergence evaluation and the function-space guide
//! steps.
//!
//! A guide step moves an output vector `f` by mirror descent on the loss:
//! `∇h(f*) = ∇h(f) − α ∇L_y(f)`. With `h = ½‖·‖²` this is a plain gradient
//! step on the logits. With `h = L_y` and a loss whose gradient is
//! `p(f) − y`, the step has the closed form `p(f*) = (1 − α) p(f) + α y`,
//! which [`guide_step_loss_generator`] returns directly as a probability
//! target.
//!
//! Cross-entropy logits are only identified up to adding a constant, so the
//! loss-as-generator case works on zero-mean representatives.

use serde::{Deserialize, Serialize};

use crate::error::{GulfError, Result};
use crate::losses::{softmax_hessian, Loss, LossKind};
use crate::numerics::{cholesky_solve, dot, norm_sq, softmax_unchecked, DenseMatrix};

/// Inner-solver stopping tolerance on `‖∇φ(q)‖`.
pub const MIRROR_GRAD_TOL: f64 = 1e-10;
/// Maximum inner-solver iterations.
pub const MIRROR_MAX_ITERS: usize = 10_000;
/// Tolerance on the mirror optimality condition `∇h(q*) = ∇h(f) − α∇L_y(f)`.
pub const MIRROR_OPTIMALITY_TOL: f64 = 1e-8;

/// Convex function `h` defining `D_h(u, v) = h(u) − h(v) − ∇h(v)ᵀ(u − v)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BregmanGenerator {
    HalfSquaredNorm,
    /// `h(u) = L(u, label)`.
    LossGenerator { loss: Loss, label: usize },
}

impl BregmanGenerator {
    pub fn value(&self, u: &[f64]) -> Result<f64> {
        match self {
            Self::HalfSquaredNorm => Ok(0.5 * norm_sq(u)),
            Self::LossGenerator { loss, label } => loss.value(u, *label),
        }
    }

    pub fn grad(&self, u: &[f64]) -> Result<Vec<f64>> {
        match self {
            Self::HalfSquaredNorm => Ok(u.to_vec()),
            Self::LossGenerator { loss, label } => loss.grad(u, *label),
        }
    }

    pub fn hessian(&self, u: &[f64]) -> Result<DenseMatrix> {
        match self {
            Self::HalfSquaredNorm => Ok(DenseMatrix::identity(u.len())),
            Self::LossGenerator { loss, label } => loss.hessian(u, *label),
        }
    }

    /// Solution `d` of `∇²h(u) d = −g`, or `None` when `h` has no usable
    /// Hessian. For cross-entropy the Hessian `diag(p) − ppᵀ` is singular
    /// along the ones vector; for zero-sum `g` the vector `−g ⊘ p` solves the
    /// system exactly, since `ppᵀ(g ⊘ p) = p·Σgᵢ = 0`.
    pub fn newton_direction(&self, u: &[f64], g: &[f64]) -> Result<Option<Vec<f64>>> {
        match self {
            Self::HalfSquaredNorm => Ok(Some(g.iter().map(|v| -v).collect())),
            Self::LossGenerator { loss, .. } => match loss.kind {
                LossKind::CrossEntropy => {
                    let p = softmax_unchecked(u);
                    if p.iter().any(|&pi| pi <= 0.0) {
                        return Ok(None);
                    }
                    Ok(Some(g.iter().zip(&p).map(|(gi, pi)| -gi / pi).collect()))
                }
                LossKind::Squared => Ok(Some(g.iter().map(|v| -v).collect())),
                LossKind::SquaredHinge => Ok(None),
            },
        }
    }

    /// `h(u + c·1) = h(u)` for every `c`.
    pub fn is_translation_invariant(&self) -> bool {
        matches!(
            self,
            Self::LossGenerator { loss, .. } if loss.kind == LossKind::CrossEntropy
        )
    }
}

/// Generator family selecting GULF1 (`½‖·‖²`) or GULF2 (`h = L_y`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    HalfSquaredNorm,
    LossGenerator,
}

impl GeneratorKind {
    /// The concrete generator for an example with label `y`.
    pub fn for_label(self, loss: Loss, y: usize) -> BregmanGenerator {
        match self {
            Self::HalfSquaredNorm => BregmanGenerator::HalfSquaredNorm,
            Self::LossGenerator => BregmanGenerator::LossGenerator { loss, label: y },
        }
    }
}

/// Bregman divergence `D_h(u, v)`.
pub fn bregman(h: &BregmanGenerator, u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(GulfError::InvalidDimension(format!(
            "bregman arguments have lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    match h {
        // quadratic generator: the expansion is exact
        BregmanGenerator::HalfSquaredNorm => Ok(0.5
            * u.iter()
                .zip(v)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()),
        _ => {
            let gv = h.grad(v)?;
            let lin: f64 = gv.iter().zip(u.iter().zip(v)).map(|(g, (a, b))| g * (a - b)).sum();
            Ok(h.value(u)? - h.value(v)? - lin)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuideRepr {
    Logits,
    Probability,
}

/// Per-example guide values, stored in their natural representation.
#[derive(Debug, Clone, PartialEq)]
pub struct GuideTarget {
    repr: GuideRepr,
    values: DenseMatrix,
}

/// Row-sum tolerance for probability targets.
pub const PROBABILITY_SUM_TOL: f64 = 1e-12;

impl GuideTarget {
    pub fn new(repr: GuideRepr, values: DenseMatrix) -> Result<Self> {
        if repr == GuideRepr::Probability {
            for (i, row) in values.row_iter().enumerate() {
                check_probability_row(row).map_err(|e| {
                    GulfError::InvalidInput(format!("guide row {i}: {e}"))
                })?;
            }
        } else if !values.is_finite() {
            return Err(GulfError::InvalidInput("non-finite guide logits".into()));
        }
        Ok(Self { repr, values })
    }

    fn single(repr: GuideRepr, row: Vec<f64>) -> Result<Self> {
        let k = row.len();
        Self::new(repr, DenseMatrix::new(1, k, row)?)
    }

    pub fn repr(&self) -> GuideRepr {
        self.repr
    }

    pub fn values(&self) -> &DenseMatrix {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.values.row(i)
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }
}

/// Checks that `row` is a probability vector: entries in `[0,1]`, sum 1
/// within [`PROBABILITY_SUM_TOL`].
pub fn check_probability_row(row: &[f64]) -> std::result::Result<(), String> {
    if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(format!("entry {v} outside [0,1]"));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > PROBABILITY_SUM_TOL {
        return Err(format!("row sums to {s}"));
    }
    Ok(())
}

/// `m` first-order functional gradient steps `f ← f − α∇L_y(f)`.
pub fn guide_step_l2(f: &[f64], y: usize, loss: &Loss, alpha: f64, m: usize) -> Result<GuideTarget> {
    if !(alpha >= 0.0) || m == 0 {
        return Err(GulfError::InvalidParameter(format!(
            "guide step needs alpha >= 0 and m >= 1, got alpha {alpha}, m {m}"
        )));
    }
    let mut cur = f.to_vec();
    let mut g = vec![0.0; f.len()];
    loss.value(&cur, y)?;
    for step in 0..m {
        loss.grad_into(&cur, y, &mut g);
        for (c, gi) in cur.iter_mut().zip(&g) {
            *c -= alpha * gi;
        }
        if cur.iter().any(|v| !v.is_finite()) {
            return Err(GulfError::Divergence {
                step: step + 1,
                detail: "non-finite guide logits".into(),
            });
        }
    }
    GuideTarget::single(GuideRepr::Logits, cur)
}

/// Closed-form result of `m` exact mirror steps with `h = L_y`:
/// `p(f*ₘ) = y + (1 − γ)ᵐ (p(f) − y)`.
///
/// Cross-entropy yields a probability target; squared loss (identity link)
/// yields logits.
pub fn guide_step_loss_generator(
    f: &[f64],
    y: usize,
    loss: &Loss,
    gamma: f64,
    m: usize,
) -> Result<GuideTarget> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(GulfError::InvalidParameter(format!(
            "gamma must lie in (0, 1], got {gamma}"
        )));
    }
    if m == 0 {
        return Err(GulfError::InvalidParameter("m must be at least 1".into()));
    }
    if !loss.has_link_gradient() {
        return Err(GulfError::Unsupported(format!(
            "{:?} does not have a gradient of the form p(f) − y",
            loss.kind
        )));
    }
    loss.value(f, y)?;
    let keep = (1.0 - gamma).powi(m as i32);
    let p = loss.link(f)?;
    let target = loss.target(y)?;
    let row: Vec<f64> = p
        .iter()
        .zip(&target)
        .map(|(&pk, &yk)| keep * pk + (1.0 - keep) * yk)
        .collect();
    let repr = match loss.kind {
        LossKind::CrossEntropy => GuideRepr::Probability,
        _ => GuideRepr::Logits,
    };
    GuideTarget::single(repr, row)
}

/// Subtracts the mean.
pub fn canonicalize_zero_mean(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    for x in v.iter_mut() {
        *x -= mean;
    }
}

/// One exact mirror step: `argmin_q D_h(q, f) + α ∇L_y(f)ᵀ q`.
///
/// For `h = ½‖·‖²` the minimiser `f − α∇L_y(f)` is returned directly. Other
/// generators are solved by damped, step-capped Newton iterations (gradient
/// steps when `h` has no Hessian) and then verified against the dual
/// optimality condition.
/// Translation-invariant generators are solved on the zero-sum subspace and
/// return a zero-mean representative.
pub fn guide_step_mirror_exact(
    h: &BregmanGenerator,
    f: &[f64],
    y: usize,
    loss: &Loss,
    alpha: f64,
) -> Result<Vec<f64>> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(GulfError::InvalidParameter(format!(
            "mirror step needs a finite alpha >= 0, got {alpha}"
        )));
    }
    let loss_grad = loss.grad(f, y)?;
    if *h == BregmanGenerator::HalfSquaredNorm {
        return Ok(f.iter().zip(&loss_grad).map(|(a, g)| a - alpha * g).collect());
    }
    let zero_sum = h.is_translation_invariant();
    let mut base = f.to_vec();
    if zero_sum {
        canonicalize_zero_mean(&mut base);
    }
    let grad_h_f = h.grad(&base)?;
    let dual_target: Vec<f64> = grad_h_f
        .iter()
        .zip(&loss_grad)
        .map(|(a, g)| a - alpha * g)
        .collect();
    // φ(q) = h(q) − ∇h(f)ᵀq + α∇L_y(f)ᵀq up to a constant
    let objective = |q: &[f64]| -> Result<f64> { Ok(h.value(q)? - dot(&dual_target, q)) };
    let gradient = |q: &[f64]| -> Result<Vec<f64>> {
        let mut g = h.grad(q)?;
        for (gi, d) in g.iter_mut().zip(&dual_target) {
            *gi -= d;
        }
        Ok(g)
    };

    let mut q = base.clone();
    let mut g = gradient(&q)?;
    let mut iters = 0;
    while norm_sq(&g).sqrt() >= MIRROR_GRAD_TOL {
        if iters >= MIRROR_MAX_ITERS {
            return Err(GulfError::ConvergenceFailure {
                iterations: iters,
                residual: norm_sq(&g).sqrt(),
            });
        }
        iters += 1;
        let newton = h.newton_direction(&q, &g)?;
        let steepest: Vec<f64> = g.iter().map(|v| -v).collect();
        let phi = objective(&q)?;
        let mut next = None;
        // a nearly singular Hessian can yield a non-descent direction; the
        // steepest-descent direction is tried whenever Newton makes no progress
        for dir in newton.iter().chain(std::iter::once(&steepest)) {
            let dir = cap_step(dir);
            let dir = &dir;
            let slope = dot(&g, dir);
            if !(slope < 0.0) {
                continue;
            }
            let mut t = 1.0;
            while t >= 1e-12 {
                let cand: Vec<f64> = q.iter().zip(dir).map(|(a, d)| a + t * d).collect();
                let phi_c = objective(&cand)?;
                let sufficient = phi_c < phi && phi_c <= phi + 1e-4 * t * slope;
                // once φ is flat to rounding, progress is judged on ‖∇φ‖
                let flat = phi_c <= phi + 1e-14 * phi.abs().max(1.0)
                    && norm_sq(&gradient(&cand)?) < 0.25 * norm_sq(&g);
                if sufficient || flat {
                    next = Some(cand);
                    break;
                }
                t *= 0.5;
            }
            if next.is_some() {
                break;
            }
        }
        let Some(mut next) = next else {
            // no representable decrease remains: accept the current point
            // and let the optimality check below decide
            break;
        };
        if zero_sum {
            canonicalize_zero_mean(&mut next);
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(GulfError::Divergence {
                step: iters,
                detail: "non-finite mirror iterate".into(),
            });
        }
        q = next;
        g = gradient(&q)?;
    }

    let residual = h
        .grad(&q)?
        .iter()
        .zip(&dual_target)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if residual > MIRROR_OPTIMALITY_TOL {
        return Err(GulfError::ConvergenceFailure {
            iterations: iters,
            residual,
        });
    }
    Ok(q)
}

/// Largest coordinate change per mirror-solver iteration.
const MIRROR_MAX_STEP: f64 = 2.0;

/// Scales `dir` so its largest coordinate is at most [`MIRROR_MAX_STEP`].
fn cap_step(dir: &[f64]) -> Vec<f64> {
    let big = dir.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if big > MIRROR_MAX_STEP { MIRROR_MAX_STEP / big } else { 1.0 };
    dir.iter().map(|v| v * scale).collect()
}

/// Relaxed-Newton approximation `f − α H⁺ ∇L_y(f)` for cross-entropy, with
/// the pseudo-inverse taken on the zero-sum subspace.
pub fn newton_guide_approx(f: &[f64], y: usize, loss: &Loss, alpha: f64) -> Result<Vec<f64>> {
    if loss.kind != LossKind::CrossEntropy {
        return Err(GulfError::Unsupported(
            "newton guide approximation is defined for cross-entropy".into(),
        ));
    }
    let mut base = f.to_vec();
    canonicalize_zero_mean(&mut base);
    let g = loss.grad(&base, y)?;
    let k = f.len();
    let mut h = softmax_hessian(&softmax_unchecked(&base));
    let c = 1.0 / k as f64;
    for i in 0..k {
        for j in 0..k {
            h.set(i, j, h.get(i, j) + c);
        }
    }
    let step = cholesky_solve(&h, &g)?;
    Ok(base.iter().zip(&step).map(|(b, s)| b - alpha * s).collect())
}
