//! Tabular functions: one row of outputs per training example, updated by
//! exact mirror steps with no parameterisation in between.

use serde::Serialize;

use crate::bregman::{canonicalize_zero_mean, guide_step_mirror_exact, GeneratorKind};
use crate::error::{GulfError, Result};
use crate::losses::{Loss, LossKind};
use crate::numerics::DenseMatrix;

/// Largest accepted deviation in [`prop21_functional_check`].
pub const PROP21_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct TabularFunction {
    values: DenseMatrix,
}

impl TabularFunction {
    /// Wraps a table of outputs. Cross-entropy tables are shifted to zero-mean
    /// rows.
    pub fn new(mut values: DenseMatrix, loss: &Loss) -> Result<Self> {
        if values.cols() != loss.output_dim() {
            return Err(GulfError::InvalidDimension(format!(
                "table has {} columns, loss expects {}",
                values.cols(),
                loss.output_dim()
            )));
        }
        if !values.is_finite() {
            return Err(GulfError::InvalidInput("table contains non-finite values".into()));
        }
        if loss.kind == LossKind::CrossEntropy {
            for r in 0..values.rows() {
                canonicalize_zero_mean(values.row_mut(r));
            }
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &DenseMatrix {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.values.row(i)
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        if labels.len() != self.len() {
            return Err(GulfError::InvalidDimension(format!(
                "{} labels for a table of {} rows",
                labels.len(),
                self.len()
            )));
        }
        Ok(())
    }
}

fn row_error(row: usize, e: GulfError) -> GulfError {
    GulfError::RowFailure {
        row,
        source: Box::new(e),
    }
}

/// `m` exact mirror steps applied independently to every row.
pub fn tabular_mirror_descent(
    f: &TabularFunction,
    labels: &[usize],
    h: GeneratorKind,
    loss: &Loss,
    alpha: f64,
    m: usize,
) -> Result<TabularFunction> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(GulfError::InvalidParameter(format!("alpha must be > 0, got {alpha}")));
    }
    if m == 0 {
        return Err(GulfError::InvalidParameter("m must be at least 1".into()));
    }
    f.check_labels(labels)?;
    let mut out = f.values.clone();
    for (i, &y) in labels.iter().enumerate() {
        let gen = h.for_label(*loss, y);
        let mut cur = out.row(i).to_vec();
        for _ in 0..m {
            cur = guide_step_mirror_exact(&gen, &cur, y, loss, alpha).map_err(|e| row_error(i, e))?;
        }
        out.row_mut(i).copy_from_slice(&cur);
    }
    TabularFunction::new(out, loss)
}

#[derive(Debug, Clone, Serialize)]
pub struct Prop21Report {
    pub gamma: f64,
    pub m: usize,
    /// `1 − (1 − γ)ᵐ`.
    pub effective_alpha: f64,
    pub max_deviation: f64,
    pub worst_row: usize,
    pub threshold: f64,
}

/// Runs `m` exact mirror steps with `h = L_y` (cross-entropy) and compares
/// `∇L_y(f*ₘ)` with `(1 − γ)ᵐ ∇L_y(f)` row by row.
pub fn prop21_functional_check(
    f: &TabularFunction,
    labels: &[usize],
    gamma: f64,
    m: usize,
) -> Result<Prop21Report> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(GulfError::InvalidParameter(format!("gamma must lie in (0, 1), got {gamma}")));
    }
    let k = f.values.cols();
    let loss = Loss::new(LossKind::CrossEntropy, k)?;
    let stepped = tabular_mirror_descent(f, labels, GeneratorKind::LossGenerator, &loss, gamma, m)?;
    let keep = (1.0 - gamma).powi(m as i32);
    let mut max_deviation = 0.0f64;
    let mut worst_row = 0;
    for (i, &y) in labels.iter().enumerate() {
        let g0 = loss.grad(f.row(i), y)?;
        let gm = loss.grad(stepped.row(i), y)?;
        let dev = g0
            .iter()
            .zip(&gm)
            .map(|(a, b)| (keep * a - b).abs())
            .fold(0.0, f64::max);
        if dev > max_deviation {
            max_deviation = dev;
            worst_row = i;
        }
    }
    let report = Prop21Report {
        gamma,
        m,
        effective_alpha: 1.0 - keep,
        max_deviation,
        worst_row,
        threshold: PROP21_TOL,
    };
    if !(max_deviation < PROP21_TOL) {
        return Err(GulfError::IdentityViolation {
            check: "guide gradient contraction".into(),
            deviation: max_deviation,
            threshold: PROP21_TOL,
            worst: worst_row,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bregman::guide_step_l2;
    use crate::numerics::{stable_softmax, RngStream};
    use proptest::prelude::*;

    fn random_table(n: usize, k: usize, scale: f64, seed: u64) -> (DenseMatrix, Vec<usize>) {
        let mut rng = RngStream::new(seed);
        let vals = (0..n * k).map(|_| scale * rng.next_normal()).collect();
        let labels = (0..n).map(|_| rng.below(k)).collect();
        (DenseMatrix::new(n, k, vals).unwrap(), labels)
    }

    #[test]
    fn construction_canonicalizes_cross_entropy_rows() {
        let (m, _) = random_table(20, 4, 3.0, 1);
        let t = TabularFunction::new(m.clone(), &Loss::cross_entropy(4)).unwrap();
        for r in t.values().row_iter() {
            assert!(r.iter().sum::<f64>().abs() < 1e-12);
        }
        let sq = TabularFunction::new(m.clone(), &Loss::squared(4)).unwrap();
        assert_eq!(sq.values(), &m);
        assert!(TabularFunction::new(m, &Loss::cross_entropy(3)).is_err());
    }

    #[test]
    fn l2_single_step_is_gradient_step() {
        let loss = Loss::squared(3);
        let (m, labels) = random_table(10, 3, 1.0, 2);
        let f = TabularFunction::new(m, &loss).unwrap();
        let out = tabular_mirror_descent(&f, &labels, GeneratorKind::HalfSquaredNorm, &loss, 0.25, 1).unwrap();
        for (i, &y) in labels.iter().enumerate() {
            let g = loss.grad(f.row(i), y).unwrap();
            let expect: Vec<f64> = f.row(i).iter().zip(&g).map(|(a, b)| a - 0.25 * b).collect();
            assert_eq!(out.row(i), expect.as_slice());
        }
    }

    #[test]
    fn l2_multi_step_equals_guide_step_l2() {
        let loss = Loss::squared(3);
        let (m, labels) = random_table(15, 3, 2.0, 3);
        let f = TabularFunction::new(m, &loss).unwrap();
        let out = tabular_mirror_descent(&f, &labels, GeneratorKind::HalfSquaredNorm, &loss, 0.3, 4).unwrap();
        for (i, &y) in labels.iter().enumerate() {
            let g = guide_step_l2(f.row(i), y, &loss, 0.3, 4).unwrap();
            assert_eq!(out.row(i), g.row(0));
        }
    }

    #[test]
    fn cross_entropy_matches_closed_form_probabilities() {
        let loss = Loss::cross_entropy(4);
        let (m, labels) = random_table(30, 4, 2.0, 4);
        let f = TabularFunction::new(m, &loss).unwrap();
        for steps in [1, 2, 5] {
            let out = tabular_mirror_descent(&f, &labels, GeneratorKind::LossGenerator, &loss, 0.3, steps).unwrap();
            let keep = 0.7f64.powi(steps as i32);
            for (i, &y) in labels.iter().enumerate() {
                let p0 = stable_softmax(f.row(i)).unwrap();
                let p = stable_softmax(out.row(i)).unwrap();
                for c in 0..4 {
                    let yc = if c == y { 1.0 } else { 0.0 };
                    assert!((p[c] - (yc + keep * (p0[c] - yc))).abs() < 1e-8);
                }
                assert!(out.row(i).iter().sum::<f64>().abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        let loss = Loss::cross_entropy(2);
        let f = TabularFunction::new(DenseMatrix::zeros(2, 2), &loss).unwrap();
        let kind = GeneratorKind::LossGenerator;
        assert!(tabular_mirror_descent(&f, &[0, 1], kind, &loss, 0.3, 0).is_err());
        assert!(tabular_mirror_descent(&f, &[0, 1], kind, &loss, 0.0, 1).is_err());
        assert!(tabular_mirror_descent(&f, &[0], kind, &loss, 0.3, 1).is_err());
        assert!(prop21_functional_check(&f, &[0, 1], 1.0, 1).is_err());
    }

    #[test]
    fn mirror_failure_carries_row_index() {
        let loss = Loss::cross_entropy(3);
        let f = TabularFunction::new(DenseMatrix::zeros(3, 3), &loss).unwrap();
        // α > 1 sends the dual target outside the simplex for every row
        let err = tabular_mirror_descent(&f, &[0, 1, 2], GeneratorKind::LossGenerator, &loss, 1.5, 1)
            .unwrap_err();
        assert!(matches!(err, GulfError::RowFailure { row: 0, .. }), "{err:?}");
    }

    #[test]
    fn effective_alpha_examples() {
        let loss = Loss::cross_entropy(3);
        let (m, labels) = random_table(10, 3, 1.0, 5);
        let f = TabularFunction::new(m, &loss).unwrap();
        let r = prop21_functional_check(&f, &labels, 0.3, 2).unwrap();
        assert!((r.effective_alpha - 0.51).abs() < 1e-15);
        let r1 = prop21_functional_check(&f, &labels, 0.3, 1).unwrap();
        assert!((r1.effective_alpha - 0.3).abs() < 1e-15);
        assert!(r1.max_deviation < PROP21_TOL);
    }

    #[test]
    fn random_table_passes_check() {
        let (m, labels) = random_table(50, 5, 2.0, 6);
        let f = TabularFunction::new(m, &Loss::cross_entropy(5)).unwrap();
        let r = prop21_functional_check(&f, &labels, 0.2, 3).unwrap();
        assert!(r.max_deviation < 1e-8);
    }

    #[test]
    fn functional_loss_descends_for_small_alpha() {
        let loss = Loss::cross_entropy(3);
        let (m, labels) = random_table(20, 3, 2.0, 7);
        let mut f = TabularFunction::new(m, &loss).unwrap();
        for _ in 0..5 {
            let next = tabular_mirror_descent(&f, &labels, GeneratorKind::LossGenerator, &loss, 0.2, 1).unwrap();
            for (i, &y) in labels.iter().enumerate() {
                assert!(loss.value(next.row(i), y).unwrap() <= loss.value(f.row(i), y).unwrap() + 1e-12);
            }
            f = next;
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn prop21_holds_on_random_tables(seed in 0u64..1000, gamma in 0.05f64..0.9, m in 1usize..5) {
            let (tab, labels) = random_table(6, 3, 3.0, seed);
            let f = TabularFunction::new(tab, &Loss::cross_entropy(3)).unwrap();
            let r = prop21_functional_check(&f, &labels, gamma, m).unwrap();
            prop_assert!(r.max_deviation < PROP21_TOL);
        }
    }
}
