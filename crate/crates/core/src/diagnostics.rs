//! Metrics, the α-regularised loss, the full-batch descent checker,
//! per-stage trajectories and softmax-averaged ensembles.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{GulfError, Result};
use crate::losses::{Loss, LossKind};
use crate::models::{init_random, MlpArchitecture, MlpModel};
use crate::numerics::{dot, norm_sq, softmax_unchecked, DenseMatrix, RngStream};
use crate::trainers::bregman_form_objective;

/// Smallest accepted per-stage slack in [`theorem21_descent_check`].
pub const DESCENT_SLACK_TOL: f64 = -1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub error: f64,
}

/// Predicted class per row: argmax with ties to the lowest index, or the
/// sign of the single output (`sign(0) = +1`, class 1).
pub fn predict_classes(out: &DenseMatrix) -> Vec<usize> {
    out.row_iter()
        .map(|r| {
            if r.len() == 1 {
                usize::from(r[0] >= 0.0)
            } else {
                let mut best = 0;
                for (c, &v) in r.iter().enumerate().skip(1) {
                    if v > r[best] {
                        best = c;
                    }
                }
                best
            }
        })
        .collect()
}

/// Fraction of rows whose prediction differs from the label.
pub fn error_rate(scores: &DenseMatrix, labels: &[usize]) -> f64 {
    let wrong = predict_classes(scores)
        .iter()
        .zip(labels)
        .filter(|(p, y)| p != y)
        .count();
    wrong as f64 / labels.len() as f64
}

/// Mean loss and error rate over `data`.
pub fn evaluate(model: &MlpModel, data: &Dataset, loss: &Loss) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(GulfError::InvalidInput("cannot evaluate on an empty dataset".into()));
    }
    let out = model.forward(data.features())?;
    let mut total = 0.0;
    for (i, &y) in data.labels().iter().enumerate() {
        total += loss.value(out.row(i), y)?;
    }
    Ok(Evaluation {
        loss: total / data.len() as f64,
        error: error_rate(&out, data.labels()),
    })
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(GulfError::InvalidParameter(format!("alpha must be > 0, got {alpha}")));
    }
    Ok(())
}

/// `ℓ_α(θ) = mean L_y(f_θ) + (λ/2)‖θ‖²/α`.
pub fn alpha_regularized_loss(model: &MlpModel, data: &Dataset, loss: &Loss, lambda: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let eval = evaluate(model, data, loss)?;
    Ok(eval.loss + 0.5 * lambda * model.param_norm_sq() / alpha)
}

fn mean_loss_gradient(model: &MlpModel, x: &DenseMatrix, labels: &[usize], loss: &Loss) -> Result<Vec<f64>> {
    let cache = model.forward_cached(x)?;
    let out = cache.output();
    let mut g = DenseMatrix::zeros(out.rows(), out.cols());
    let scale = 1.0 / labels.len() as f64;
    for (i, &y) in labels.iter().enumerate() {
        let gi = loss.grad(out.row(i), y)?;
        for (o, v) in g.row_mut(i).iter_mut().zip(gi) {
            *o = v * scale;
        }
    }
    model.backward_cached(&cache, &g)
}

/// `∇ℓ_α(θ) = mean ∇_θ L_y + λθ/α`.
pub fn alpha_regularized_gradient(model: &MlpModel, data: &Dataset, loss: &Loss, lambda: f64, alpha: f64) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    let mut g = mean_loss_gradient(model, data.features(), data.labels(), loss)?;
    for (gi, t) in g.iter_mut().zip(model.theta()) {
        *gi += lambda * t / alpha;
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescentCheckConfig {
    /// Step size `η`; estimated from the curvature at `θ_0` when absent.
    pub eta: Option<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub stages: usize,
    /// Extra monotone gradient steps after the mandatory first step.
    pub inner_steps: usize,
    pub seed: u64,
}

impl DescentCheckConfig {
    pub fn new(alpha: f64, stages: usize, seed: u64) -> Self {
        Self {
            eta: None,
            alpha,
            beta: 1.0,
            stages,
            inner_steps: 20,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if self.alpha > self.beta {
            return Err(GulfError::InvalidParameter(format!(
                "alpha {} exceeds beta {}",
                self.alpha, self.beta
            )));
        }
        if self.stages == 0 {
            return Err(GulfError::InvalidParameter("need at least one stage".into()));
        }
        if let Some(eta) = self.eta {
            if !(eta > 0.0) || !eta.is_finite() {
                return Err(GulfError::InvalidParameter(format!("eta must be > 0, got {eta}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DescentStage {
    pub stage: usize,
    pub reg_alpha_loss: f64,
    pub grad_norm_sq: f64,
    pub next_reg_alpha_loss: f64,
    /// `ℓ_α(θ_t) − (αη/2)‖∇ℓ_α(θ_t)‖² − ℓ_α(θ_{t+1})`.
    pub slack: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DescentReport {
    pub eta: f64,
    /// Largest Hessian eigenvalue estimate at `θ_0`, when `η` was estimated.
    pub curvature_estimate: Option<f64>,
    pub alpha: f64,
    pub lambda: f64,
    pub stages: Vec<DescentStage>,
    pub min_slack: f64,
    pub passed: bool,
    /// `(1/T) Σ ‖∇ℓ_α(θ_t)‖²`.
    pub mean_grad_norm_sq: f64,
    /// `2(ℓ_α(θ_0) − ℓ_α(θ_T)) / (αηT)`.
    pub mean_grad_bound: f64,
    pub mean_grad_bound_holds: bool,
}

/// Largest eigenvalue of the Hessian of `mean L + (λ/2)‖θ‖²` at `model`, by
/// power iteration on finite-difference Hessian-vector products.
pub fn estimate_curvature(model: &MlpModel, data: &Dataset, loss: &Loss, lambda: f64, seed: u64) -> Result<f64> {
    let grad = |theta: &[f64]| -> Result<Vec<f64>> {
        let m = model.with_theta(theta.to_vec())?;
        let mut g = mean_loss_gradient(&m, data.features(), data.labels(), loss)?;
        for (gi, t) in g.iter_mut().zip(theta) {
            *gi += lambda * t;
        }
        Ok(g)
    };
    let theta = model.theta();
    let mut rng = RngStream::new(seed);
    let mut v: Vec<f64> = (0..theta.len()).map(|_| rng.next_normal()).collect();
    let mut eig = 0.0;
    let eps = 1e-5;
    for _ in 0..100 {
        let n = norm_sq(&v).sqrt();
        for x in &mut v {
            *x /= n;
        }
        let plus: Vec<f64> = theta.iter().zip(&v).map(|(t, d)| t + eps * d).collect();
        let minus: Vec<f64> = theta.iter().zip(&v).map(|(t, d)| t - eps * d).collect();
        let (gp, gm) = (grad(&plus)?, grad(&minus)?);
        let hv: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
        let next = dot(&v, &hv);
        let converged = (next - eig).abs() <= 1e-10 * next.abs();
        eig = next;
        v = hv;
        if converged {
            break;
        }
    }
    if !(eig > 0.0) || !eig.is_finite() {
        return Err(GulfError::ConvergenceFailure {
            iterations: 100,
            residual: eig,
        });
    }
    Ok(eig)
}

/// Runs `T` GULF2 stages with full-batch gradient descent on the stage
/// objective `Q_t` and checks the per-stage descent inequality on `ℓ_α`.
///
/// Each stage takes the step `θ̃ = θ_t − η∇Q_t(θ_t)` and then only further
/// steps that lower `Q_t`, so `Q_t(θ_{t+1}) ≤ Q_t(θ̃)` holds by construction.
pub fn theorem21_descent_check(
    data: &Dataset,
    arch: &MlpArchitecture,
    loss: &Loss,
    cfg: &DescentCheckConfig,
    lambda: f64,
) -> Result<DescentReport> {
    cfg.validate()?;
    if loss.kind != LossKind::CrossEntropy && loss.kind != LossKind::Squared {
        return Err(GulfError::Unsupported("the descent check needs a twice-differentiable loss".into()));
    }
    let alpha = cfg.alpha;
    let x = data.features();
    let y = data.labels();
    let mut theta = init_random(arch, &mut RngStream::new(cfg.seed))?;
    let (eta, curvature_estimate) = match cfg.eta {
        Some(e) => (e, None),
        None => {
            let c = estimate_curvature(&theta, data, loss, lambda, cfg.seed ^ 0x5eed)?;
            (1.0 / (2.0 * c), Some(c))
        }
    };
    let q = |m: &MlpModel, frozen: &MlpModel| -> Result<f64> {
        Ok(bregman_form_objective(m, frozen, x, y, loss, alpha)? + 0.5 * lambda * m.param_norm_sq())
    };
    let q_grad = |m: &MlpModel, frozen: &MlpModel| -> Result<Vec<f64>> {
        // ∇ of D_L(f, f_t) + α∇L(f_t)ᵀf is ∇L(f) − (1 − α)∇L(f_t) in f
        let cache = m.forward_cached(x)?;
        let ft = frozen.forward(x)?;
        let out = cache.output();
        let n = y.len() as f64;
        let mut g = DenseMatrix::zeros(out.rows(), out.cols());
        for (i, &yi) in y.iter().enumerate() {
            let gf = loss.grad(out.row(i), yi)?;
            let gt = loss.grad(ft.row(i), yi)?;
            for (c, o) in g.row_mut(i).iter_mut().enumerate() {
                *o = (gf[c] - (1.0 - alpha) * gt[c]) / n;
            }
        }
        let mut gt = m.backward_cached(&cache, &g)?;
        for (gi, t) in gt.iter_mut().zip(m.theta()) {
            *gi += lambda * t;
        }
        Ok(gt)
    };
    let step = |m: &MlpModel, g: &[f64], size: f64| -> Result<MlpModel> {
        m.with_theta(m.theta().iter().zip(g).map(|(t, gi)| t - size * gi).collect())
    };

    let l0 = alpha_regularized_loss(&theta, data, loss, lambda, alpha)?;
    let mut stages = Vec::with_capacity(cfg.stages);
    let mut grad_sum = 0.0;
    let mut cur_l = l0;
    for t in 0..cfg.stages {
        let frozen = theta.clone();
        let grad_l = alpha_regularized_gradient(&theta, data, loss, lambda, alpha)?;
        let gnorm = norm_sq(&grad_l);
        let q0 = q(&frozen, &frozen)?;
        let g0 = q_grad(&frozen, &frozen)?;
        let mut next = step(&frozen, &g0, eta)?;
        let mut q_next = q(&next, &frozen)?;
        if q_next > q0 {
            return Err(GulfError::HypothesisViolation(format!(
                "stage {t}: Q_t increased from {q0:e} to {q_next:e} at the first step; reduce eta (currently {eta:e})"
            )));
        }
        for _ in 0..cfg.inner_steps {
            let g = q_grad(&next, &frozen)?;
            let mut size = eta;
            let mut accepted = false;
            for _ in 0..30 {
                let cand = step(&next, &g, size)?;
                let qc = q(&cand, &frozen)?;
                if qc <= q_next {
                    next = cand;
                    q_next = qc;
                    accepted = true;
                    break;
                }
                size *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        let next_l = alpha_regularized_loss(&next, data, loss, lambda, alpha)?;
        let slack = cur_l - 0.5 * alpha * eta * gnorm - next_l;
        stages.push(DescentStage {
            stage: t,
            reg_alpha_loss: cur_l,
            grad_norm_sq: gnorm,
            next_reg_alpha_loss: next_l,
            slack,
        });
        grad_sum += gnorm;
        theta = next;
        cur_l = next_l;
    }
    let big_t = cfg.stages as f64;
    let min_slack = stages.iter().map(|s| s.slack).fold(f64::INFINITY, f64::min);
    let mean_grad_norm_sq = grad_sum / big_t;
    let mean_grad_bound = 2.0 * (l0 - cur_l) / (alpha * eta * big_t);
    Ok(DescentReport {
        eta,
        curvature_estimate,
        alpha,
        lambda,
        stages,
        min_slack,
        passed: min_slack >= DESCENT_SLACK_TOL,
        mean_grad_norm_sq,
        mean_grad_bound,
        mean_grad_bound_holds: mean_grad_norm_sq <= mean_grad_bound,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub train_err: f64,
    pub test_err: f64,
    pub reg_alpha_loss: f64,
    pub param_norm_sq: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTrajectory {
    pub records: Vec<StageRecord>,
}

pub const TRAJECTORY_HEADER: &str = "stage,train_loss,test_loss,train_err,test_err,reg_alpha_loss,param_norm_sq";

impl StageTrajectory {
    pub fn new(records: Vec<StageRecord>) -> Result<Self> {
        let t = Self { records };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let mut prev: Option<usize> = None;
        for r in &self.records {
            if prev.is_some_and(|p| r.stage <= p) {
                return Err(GulfError::InvalidInput(format!("stage {} out of order", r.stage)));
            }
            prev = Some(r.stage);
            let scalars = [r.train_loss, r.test_loss, r.reg_alpha_loss, r.param_norm_sq];
            if scalars.iter().any(|v| !v.is_finite()) {
                return Err(GulfError::InvalidInput(format!("stage {} has a non-finite metric", r.stage)));
            }
            if ![r.train_err, r.test_err].iter().all(|e| (0.0..=1.0).contains(e)) {
                return Err(GulfError::InvalidInput(format!("stage {} has an error outside [0, 1]", r.stage)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// CSV with 17 significant digits per float and LF line endings.
    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(64 * (self.records.len() + 1));
        s.push_str(TRAJECTORY_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                r.stage, r.train_loss, r.test_loss, r.train_err, r.test_err, r.reg_alpha_loss, r.param_norm_sq
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.split('\n');
        let header = lines.next().unwrap_or_default();
        if header != TRAJECTORY_HEADER {
            return Err(GulfError::Parse {
                row: 0,
                column: String::new(),
                detail: format!("unexpected header {header:?}"),
            });
        }
        let columns: Vec<&str> = TRAJECTORY_HEADER.split(',').collect();
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let row = i + 1;
            if line.is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != columns.len() {
                return Err(GulfError::Parse {
                    row,
                    column: String::new(),
                    detail: format!("expected {} fields, found {}", columns.len(), cells.len()),
                });
            }
            let stage = cells[0].parse::<usize>().map_err(|_| GulfError::Parse {
                row,
                column: columns[0].into(),
                detail: format!("bad stage index {:?}", cells[0]),
            })?;
            let mut v = [0.0; 6];
            for (j, slot) in v.iter_mut().enumerate() {
                *slot = cells[j + 1].parse::<f64>().map_err(|_| GulfError::Parse {
                    row,
                    column: columns[j + 1].into(),
                    detail: format!("bad number {:?}", cells[j + 1]),
                })?;
            }
            records.push(StageRecord {
                stage,
                train_loss: v[0],
                test_loss: v[1],
                train_err: v[2],
                test_err: v[3],
                reg_alpha_loss: v[4],
                param_norm_sq: v[5],
            });
        }
        Self::new(records)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

/// One record per checkpoint, numbered from `first_stage`.
pub fn record_trajectory(
    checkpoints: &[MlpModel],
    first_stage: usize,
    train: &Dataset,
    test: &Dataset,
    loss: &Loss,
    lambda: f64,
    alpha: f64,
) -> Result<StageTrajectory> {
    if checkpoints.is_empty() {
        return Err(GulfError::InvalidInput("no checkpoints to record".into()));
    }
    check_alpha(alpha)?;
    let mut records = Vec::with_capacity(checkpoints.len());
    for (i, m) in checkpoints.iter().enumerate() {
        let tr = evaluate(m, train, loss)?;
        let te = evaluate(m, test, loss)?;
        let norm = m.param_norm_sq();
        records.push(StageRecord {
            stage: first_stage + i,
            train_loss: tr.loss,
            test_loss: te.loss,
            train_err: tr.error,
            test_err: te.error,
            reg_alpha_loss: tr.loss + 0.5 * lambda * norm / alpha,
            param_norm_sq: norm,
        });
    }
    StageTrajectory::new(records)
}

/// Mean of the models' softmax outputs.
pub fn ensemble_predict(models: &[MlpModel], x: &DenseMatrix) -> Result<DenseMatrix> {
    let first = models
        .first()
        .ok_or_else(|| GulfError::InvalidInput("ensemble needs at least one model".into()))?;
    let arch = first.architecture();
    if arch.output_dim < 2 {
        return Err(GulfError::InvalidInput("ensembling averages softmax outputs; need >= 2 outputs".into()));
    }
    for m in models {
        let a = m.architecture();
        if a.output_dim != arch.output_dim || a.input_dim != arch.input_dim {
            return Err(GulfError::InvalidInput("ensemble members disagree on input or output width".into()));
        }
    }
    let mut acc = DenseMatrix::zeros(x.rows(), arch.output_dim);
    for m in models {
        let out = m.forward(x)?;
        for r in 0..x.rows() {
            let p = softmax_unchecked(out.row(r));
            for (a, v) in acc.row_mut(r).iter_mut().zip(p) {
                *a += v;
            }
        }
    }
    let n = models.len() as f64;
    for v in acc.data_mut() {
        *v /= n;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticGenerator, SyntheticSpec};
    use crate::models::Activation;
    use crate::numerics::{finite_diff_grad, max_abs_diff, rng_normal, stable_softmax};

    fn blobs(k: usize, seed: u64) -> (Dataset, Dataset) {
        gen_synthetic(&SyntheticSpec {
            generator: SyntheticGenerator::GaussianBlobs,
            num_classes: k,
            examples_per_class: 50,
            test_examples_per_class: None,
            input_dim: 3,
            class_separation: 3.0,
            label_noise: 0.0,
            seed,
        })
        .unwrap()
    }

    fn random_model(arch: &MlpArchitecture, seed: u64) -> MlpModel {
        let theta = rng_normal(&mut RngStream::new(seed), arch.param_count(), 0.0, 0.5).unwrap();
        MlpModel::from_theta(arch.clone(), theta).unwrap()
    }

    fn mlp(k: usize) -> MlpArchitecture {
        MlpArchitecture::new(3, vec![5], k, Activation::Tanh).unwrap()
    }

    #[test]
    fn alpha_regularized_examples() {
        let (train, _) = blobs(3, 1);
        let loss = Loss::cross_entropy(3);
        let zero = MlpModel::zeros(mlp(3)).unwrap();
        let v = alpha_regularized_loss(&zero, &train, &loss, 0.1, 0.5).unwrap();
        assert!((v - 3f64.ln()).abs() < 1e-13);
        assert!(alpha_regularized_loss(&zero, &train, &loss, 0.1, 0.0).is_err());

        let m = random_model(&mlp(3), 2);
        let mean = evaluate(&m, &train, &loss).unwrap().loss;
        let r = 0.5 * 0.2 * m.param_norm_sq();
        let one = alpha_regularized_loss(&m, &train, &loss, 0.2, 1.0).unwrap();
        assert!((one - (mean + r)).abs() < 1e-12);
        for alpha in [0.01, 0.3, 0.9] {
            let la = alpha_regularized_loss(&m, &train, &loss, 0.2, alpha).unwrap();
            assert!(((la - one) - r * (1.0 / alpha - 1.0)).abs() < 1e-10);
        }
    }

    #[test]
    fn evaluate_matches_rowwise_losses() {
        let (train, _) = blobs(3, 3);
        let loss = Loss::cross_entropy(3);
        let m = random_model(&mlp(3), 4);
        let e = evaluate(&m, &train, &loss).unwrap();
        let out = m.forward(train.features()).unwrap();
        let direct: f64 = train
            .labels()
            .iter()
            .enumerate()
            .map(|(i, &y)| loss.value(out.row(i), y).unwrap())
            .sum::<f64>()
            / train.len() as f64;
        assert!((e.loss - direct).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&e.error));
    }

    #[test]
    fn uniform_logits_break_ties_low() {
        let (train, _) = blobs(4, 5);
        let zero = MlpModel::zeros(mlp(4)).unwrap();
        let e = evaluate(&zero, &train, &Loss::cross_entropy(4)).unwrap();
        // every row predicts class 0; balanced data gets 3/4 wrong
        assert!((e.error - 0.75).abs() < 1e-15);
        let s = DenseMatrix::from_rows(&[vec![1.0, 3.0, 3.0]]).unwrap();
        assert_eq!(predict_classes(&s), vec![1]);
        let h = DenseMatrix::from_rows(&[vec![0.0], vec![-0.1], vec![2.0]]).unwrap();
        assert_eq!(predict_classes(&h), vec![1, 0, 1]);
    }

    #[test]
    fn evaluate_rejects_empty() {
        let empty = Dataset::new(DenseMatrix::zeros(0, 3), vec![], 2).unwrap();
        let m = MlpModel::zeros(mlp(2)).unwrap();
        assert!(matches!(
            evaluate(&m, &empty, &Loss::cross_entropy(2)),
            Err(GulfError::InvalidInput(_))
        ));
    }

    #[test]
    fn alpha_gradient_matches_finite_differences() {
        let (train, _) = blobs(3, 6);
        let loss = Loss::cross_entropy(3);
        let m = random_model(&mlp(3), 7);
        let g = alpha_regularized_gradient(&m, &train, &loss, 0.05, 0.3).unwrap();
        let fd = finite_diff_grad(
            |t| alpha_regularized_loss(&m.with_theta(t.to_vec()).unwrap(), &train, &loss, 0.05, 0.3).unwrap(),
            m.theta(),
            1e-5,
        )
        .unwrap();
        assert!(max_abs_diff(&g, &fd) < 1e-8);
    }

    #[test]
    fn curvature_of_linear_least_squares() {
        // squared loss on a linear model: Hessian = XᵀX/n ⊗ I (+ bias terms)
        let x = DenseMatrix::from_rows(&[vec![2.0], vec![0.0]]).unwrap();
        let data = Dataset::new(x, vec![0, 1], 2).unwrap();
        let arch = MlpArchitecture::new(1, vec![], 2, Activation::Relu).unwrap();
        let m = MlpModel::zeros(arch).unwrap();
        let c = estimate_curvature(&m, &data, &Loss::squared(2), 0.0, 1).unwrap();
        // per output: [[mean x², mean x], [mean x, 1]] = [[2, 1], [1, 1]]
        let expect = (3.0 + 5f64.sqrt()) / 2.0;
        assert!((c - expect).abs() < 1e-6, "{c}");
    }

    fn logistic_setup() -> (Dataset, MlpArchitecture, Loss) {
        let (train, _) = gen_synthetic(&SyntheticSpec {
            generator: SyntheticGenerator::GaussianBlobs,
            num_classes: 3,
            examples_per_class: 60,
            test_examples_per_class: None,
            input_dim: 4,
            class_separation: 2.0,
            label_noise: 0.1,
            seed: 8,
        })
        .unwrap();
        let arch = MlpArchitecture::new(4, vec![], 3, Activation::Relu).unwrap();
        (train, arch, Loss::cross_entropy(3))
    }

    #[test]
    fn descent_check_passes_on_logistic_regression() {
        let (train, arch, loss) = logistic_setup();
        for alpha in [0.3, 1.0] {
            let cfg = DescentCheckConfig::new(alpha, 20, 3);
            let r = theorem21_descent_check(&train, &arch, &loss, &cfg, 1e-2).unwrap();
            assert!(r.passed, "alpha {alpha}: min slack {}", r.min_slack);
            assert!(r.mean_grad_bound_holds);
            assert_eq!(r.stages.len(), 20);
            for w in r.stages.windows(2) {
                assert!(w[1].reg_alpha_loss <= w[0].reg_alpha_loss);
            }
        }
    }

    #[test]
    fn descent_check_rejects_oversized_eta() {
        let (train, arch, loss) = logistic_setup();
        let mut cfg = DescentCheckConfig::new(0.3, 3, 3);
        cfg.eta = Some(1e4);
        assert!(matches!(
            theorem21_descent_check(&train, &arch, &loss, &cfg, 1e-2),
            Err(GulfError::HypothesisViolation(_))
        ));
        cfg.eta = None;
        cfg.alpha = 1.5;
        assert!(theorem21_descent_check(&train, &arch, &loss, &cfg, 1e-2).is_err());
    }

    #[test]
    fn trajectory_records_and_round_trips() {
        let (train, test) = blobs(3, 9);
        let loss = Loss::cross_entropy(3);
        let ms: Vec<MlpModel> = (0..3).map(|s| random_model(&mlp(3), 10 + s)).collect();
        let tr = record_trajectory(&ms, 1, &train, &test, &loss, 0.01, 1.0).unwrap();
        assert_eq!(tr.len(), 3);
        assert_eq!(tr.records[0].stage, 1);
        for r in &tr.records {
            assert!((r.reg_alpha_loss - (r.train_loss + 0.005 * r.param_norm_sq)).abs() < 1e-15);
        }
        let csv = tr.to_csv();
        assert!(csv.starts_with(TRAJECTORY_HEADER));
        assert!(!csv.contains('\r'));
        assert_eq!(StageTrajectory::from_csv(&csv).unwrap(), tr);

        let single = record_trajectory(&ms[..1], 0, &train, &test, &loss, 0.01, 0.3).unwrap();
        assert_eq!(single.len(), 1);
        assert!(record_trajectory(&[], 0, &train, &test, &loss, 0.01, 0.3).is_err());

        // metrics survive a checkpoint round trip
        let reloaded: Vec<MlpModel> = ms.iter().map(|m| MlpModel::from_json(&m.to_json().unwrap()).unwrap()).collect();
        assert_eq!(record_trajectory(&reloaded, 1, &train, &test, &loss, 0.01, 1.0).unwrap(), tr);
    }

    #[test]
    fn trajectory_csv_errors() {
        assert!(StageTrajectory::from_csv("nope\n").is_err());
        let bad = format!("{TRAJECTORY_HEADER}\n0,1,2,3,0,1,1\n");
        assert!(StageTrajectory::from_csv(&bad).is_err());
        let order = format!("{TRAJECTORY_HEADER}\n1,1,1,0,0,1,1\n1,1,1,0,0,1,1\n");
        assert!(StageTrajectory::from_csv(&order).is_err());
        match StageTrajectory::from_csv(&format!("{TRAJECTORY_HEADER}\n0,1,x,0,0,1,1\n")) {
            Err(GulfError::Parse { row, column, .. }) => {
                assert_eq!(row, 1);
                assert_eq!(column, "test_loss");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ensemble_examples() {
        let (train, _) = blobs(3, 11);
        let a = random_model(&mlp(3), 12);
        let b = random_model(&mlp(3), 13);
        let x = train.features();
        let single = ensemble_predict(std::slice::from_ref(&a), x).unwrap();
        let out = a.forward(x).unwrap();
        for r in 0..x.rows() {
            assert_eq!(single.row(r), stable_softmax(out.row(r)).unwrap().as_slice());
        }
        let twice = ensemble_predict(&[a.clone(), a.clone()], x).unwrap();
        assert_eq!(twice, single);
        let mixed = ensemble_predict(&[a.clone(), b], x).unwrap();
        for r in mixed.row_iter() {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let other = MlpModel::zeros(mlp(2)).unwrap();
        assert!(ensemble_predict(&[a, other], x).is_err());
        assert!(ensemble_predict(&[], x).is_err());
    }
}
