//! Fixed-seed numerical verification suites with machine-readable reports.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bregman::{bregman, guide_step_loss_generator, guide_step_mirror_exact, GeneratorKind};
use crate::data::{gen_synthetic, SyntheticGenerator, SyntheticSpec};
use crate::diagnostics::{theorem21_descent_check, DescentCheckConfig, DESCENT_SLACK_TOL};
use crate::error::{GulfError, Result};
use crate::funcspace::{prop21_functional_check, tabular_mirror_descent, TabularFunction, PROP21_TOL};
use crate::losses::{Loss, LossKind};
use crate::models::{init_random, Activation, MlpArchitecture, MlpModel};
use crate::numerics::{dot, finite_diff_directional, rng_normal, stable_softmax, DenseMatrix, RngStream};
use crate::trainers::{prop22_grad_identity_check, PROP22_TOL};

pub const GRADIENT_REL_TOL: f64 = 1e-6;
pub const GRADIENT_FD_EPS: f64 = 1e-5;
pub const GRADIENT_DIRECTIONS: usize = 20;
pub const BREGMAN_ZERO_TOL: f64 = 1e-12;
pub const MIRROR_CONDITION_TOL: f64 = 1e-8;
pub const PROP22_TUPLES: usize = 120;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Gradients,
    Prop21,
    Prop22,
    Theorem21,
    Bregman,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Gradients, Suite::Prop21, Suite::Prop22, Suite::Theorem21, Suite::Bregman];

    pub fn name(self) -> &'static str {
        match self {
            Self::Gradients => "gradients",
            Self::Prop21 => "prop21",
            Self::Prop22 => "prop22",
            Self::Theorem21 => "theorem21",
            Self::Bregman => "bregman",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = GulfError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| GulfError::InvalidInput(format!("unknown suite {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub max_deviation: f64,
    pub threshold: f64,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl CheckResult {
    fn below(name: impl Into<String>, deviation: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            max_deviation: deviation,
            threshold,
            passed: deviation < threshold,
            detail: None,
        }
    }

    fn at_most(name: impl Into<String>, deviation: f64, threshold: f64) -> Self {
        Self {
            passed: deviation <= threshold,
            ..Self::below(name, deviation, threshold)
        }
    }

    fn failed(name: impl Into<String>, threshold: f64, err: &GulfError) -> Self {
        let deviation = match err {
            GulfError::IdentityViolation { deviation, .. } => *deviation,
            _ => f64::INFINITY,
        };
        Self {
            name: name.into(),
            max_deviation: deviation,
            threshold,
            passed: false,
            detail: Some(err.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    fn new(suite: Suite, checks: Vec<CheckResult>) -> Self {
        Self {
            suite,
            passed: !checks.is_empty() && checks.iter().all(|c| c.passed),
            checks,
        }
    }

    pub fn max_deviation(&self) -> f64 {
        self.checks.iter().map(|c| c.max_deviation).fold(0.0, f64::max)
    }
}

pub fn run_suite(suite: Suite) -> SuiteReport {
    let checks = match suite {
        Suite::Gradients => gradient_checks(),
        Suite::Prop21 => prop21_checks(),
        Suite::Prop22 => prop22_checks(),
        Suite::Theorem21 => theorem21_checks(),
        Suite::Bregman => bregman_checks(),
    };
    SuiteReport::new(suite, checks)
}

/// Hidden-layer layouts × activations used by the gradient suite.
pub fn architecture_matrix(input: usize, output: usize) -> Vec<MlpArchitecture> {
    let mut out = Vec::new();
    for hidden in [vec![], vec![6], vec![5, 4]] {
        for act in [Activation::Relu, Activation::Tanh] {
            out.push(MlpArchitecture::new(input, hidden.clone(), output, act).expect("valid architecture"));
        }
    }
    out
}

fn random_matrix(rng: &mut RngStream, rows: usize, cols: usize, scale: f64) -> DenseMatrix {
    let v = rng_normal(rng, rows * cols, 0.0, scale).expect("valid normal parameters");
    DenseMatrix::new(rows, cols, v).expect("consistent shape")
}

fn mean_loss(model: &MlpModel, x: &DenseMatrix, labels: &[usize], loss: &Loss) -> Result<f64> {
    let out = model.forward(x)?;
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        total += loss.value(out.row(i), y)?;
    }
    Ok(total / labels.len() as f64)
}

fn mean_loss_grad(model: &MlpModel, x: &DenseMatrix, labels: &[usize], loss: &Loss) -> Result<Vec<f64>> {
    let out = model.forward(x)?;
    let mut g = DenseMatrix::zeros(out.rows(), out.cols());
    for (i, &y) in labels.iter().enumerate() {
        let gi = loss.grad(out.row(i), y)?;
        for (o, v) in g.row_mut(i).iter_mut().zip(gi) {
            *o = v / labels.len() as f64;
        }
    }
    model.backward(x, &g)
}

/// Largest relative error between `∇θ·d` and the central difference of the
/// mean loss along `d`, over `directions` random unit directions.
pub fn gradient_check(
    model: &MlpModel,
    x: &DenseMatrix,
    labels: &[usize],
    loss: &Loss,
    rng: &mut RngStream,
    directions: usize,
) -> Result<f64> {
    let grad = mean_loss_grad(model, x, labels, loss)?;
    let objective = |theta: &[f64]| {
        model
            .with_theta(theta.to_vec())
            .and_then(|m| mean_loss(&m, x, labels, loss))
            .unwrap_or(f64::NAN)
    };
    let mut worst = 0.0f64;
    for _ in 0..directions {
        let mut dir = rng_normal(rng, grad.len(), 0.0, 1.0)?;
        let n = dot(&dir, &dir).sqrt();
        dir.iter_mut().for_each(|v| *v /= n);
        let fd = finite_diff_directional(objective, model.theta(), &dir, GRADIENT_FD_EPS)?;
        let an = dot(&grad, &dir);
        let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn gradient_checks() -> Vec<CheckResult> {
    let mut rng = RngStream::new(101);
    let mut out = Vec::new();
    for loss in [Loss::cross_entropy(3), Loss::squared(3), Loss::squared_hinge()] {
        let k = loss.output_dim();
        let classes = if loss.kind == LossKind::SquaredHinge { 2 } else { 3 };
        for arch in architecture_matrix(4, k) {
            let name = format!(
                "{:?} hidden={:?} {:?}",
                loss.kind, arch.hidden_dims, arch.activation
            );
            let res = init_random(&arch, &mut rng).and_then(|m| {
                let x = random_matrix(&mut rng, 8, 4, 1.0);
                let labels: Vec<usize> = (0..8).map(|_| rng.below(classes)).collect();
                gradient_check(&m, &x, &labels, &loss, &mut rng, GRADIENT_DIRECTIONS)
            });
            out.push(match res {
                Ok(dev) => CheckResult::below(name, dev, GRADIENT_REL_TOL),
                Err(e) => CheckResult::failed(name, GRADIENT_REL_TOL, &e),
            });
        }
    }
    out
}

/// `(γ, m)` grid of the functional contraction suite.
pub const PROP21_GRID: [(f64, usize); 12] = [
    (0.1, 1),
    (0.1, 2),
    (0.1, 3),
    (0.1, 5),
    (0.3, 1),
    (0.3, 2),
    (0.3, 3),
    (0.3, 5),
    (0.5, 1),
    (0.5, 2),
    (0.5, 3),
    (0.5, 5),
];

/// Max-abs gap between `softmax` of `m` chained exact mirror steps and the
/// closed-form probability target, over all rows.
pub fn closed_form_target_deviation(f: &TabularFunction, labels: &[usize], gamma: f64, m: usize) -> Result<f64> {
    let k = f.values().cols();
    let loss = Loss::new(LossKind::CrossEntropy, k)?;
    let stepped = tabular_mirror_descent(f, labels, GeneratorKind::LossGenerator, &loss, gamma, m)?;
    let mut worst = 0.0f64;
    for (i, &y) in labels.iter().enumerate() {
        let closed = guide_step_loss_generator(f.row(i), y, &loss, gamma, m)?;
        let p = stable_softmax(stepped.row(i))?;
        for (a, b) in closed.row(0).iter().zip(&p) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

fn prop21_checks() -> Vec<CheckResult> {
    let (n, k) = (64, 5);
    let mut rng = RngStream::new(202);
    let values = random_matrix(&mut rng, n, k, 3.0);
    let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
    let table = match TabularFunction::new(values, &Loss::cross_entropy(k)) {
        Ok(t) => t,
        Err(e) => return vec![CheckResult::failed("table", PROP21_TOL, &e)],
    };
    let mut out = Vec::new();
    for (gamma, m) in PROP21_GRID {
        let name = format!("gradient contraction gamma={gamma} m={m}");
        out.push(match prop21_functional_check(&table, &labels, gamma, m) {
            Ok(r) => CheckResult::below(name, r.max_deviation, PROP21_TOL),
            Err(e) => CheckResult::failed(name, PROP21_TOL, &e),
        });
        let name = format!("closed-form target gamma={gamma} m={m}");
        out.push(match closed_form_target_deviation(&table, &labels, gamma, m) {
            Ok(d) => CheckResult::below(name, d, PROP21_TOL),
            Err(e) => CheckResult::failed(name, PROP21_TOL, &e),
        });
    }
    out
}

fn prop22_checks() -> Vec<CheckResult> {
    let mut rng = RngStream::new(303);
    let archs = architecture_matrix(4, 3);
    let loss = Loss::cross_entropy(3);
    let mut worst = 0.0f64;
    let mut failure = None;
    for i in 0..PROP22_TUPLES {
        let arch = &archs[i % archs.len()];
        let res = (|| {
            let theta = init_random(arch, &mut rng)?;
            let theta_t = init_random(arch, &mut rng)?;
            let rows = 1 + rng.below(16);
            let x = random_matrix(&mut rng, rows, 4, 2.0);
            let labels: Vec<usize> = (0..rows).map(|_| rng.below(3)).collect();
            let alpha = 0.01 + 0.99 * rng.next_f64();
            prop22_grad_identity_check(&theta, &theta_t, &x, &labels, &loss, alpha)
        })();
        match res {
            Ok(r) => worst = worst.max(r.max_deviation),
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    let name = format!("bregman vs distillation gradient over {PROP22_TUPLES} tuples");
    vec![match failure {
        None => CheckResult::below(name, worst, PROP22_TOL),
        Some(e) => CheckResult::failed(name, PROP22_TOL, &e),
    }]
}

/// The convex logistic-regression setup used by the descent suite.
pub fn theorem21_setup() -> Result<(crate::data::Dataset, MlpArchitecture, Loss, f64)> {
    let (train, _) = gen_synthetic(&SyntheticSpec {
        generator: SyntheticGenerator::GaussianBlobs,
        num_classes: 3,
        examples_per_class: 100,
        test_examples_per_class: Some(1),
        input_dim: 5,
        class_separation: 2.0,
        label_noise: 0.1,
        seed: 404,
    })?;
    let arch = MlpArchitecture::new(5, vec![], 3, Activation::Relu)?;
    Ok((train, arch, Loss::cross_entropy(3), 1e-2))
}

fn theorem21_checks() -> Vec<CheckResult> {
    let (train, arch, loss, lambda) = match theorem21_setup() {
        Ok(s) => s,
        Err(e) => return vec![CheckResult::failed("setup", 0.0, &e)],
    };
    let mut out = Vec::new();
    for alpha in [0.3, 1.0] {
        let cfg = DescentCheckConfig::new(alpha, 20, 404);
        match theorem21_descent_check(&train, &arch, &loss, &cfg, lambda) {
            Ok(r) => {
                let mut stage = CheckResult::at_most(
                    format!("per-stage descent alpha={alpha}"),
                    (-r.min_slack).max(0.0),
                    -DESCENT_SLACK_TOL,
                );
                stage.detail = Some(format!("eta={:e} min_slack={:e}", r.eta, r.min_slack));
                out.push(stage);
                let mut avg = CheckResult::at_most(
                    format!("averaged gradient bound alpha={alpha}"),
                    (r.mean_grad_norm_sq - r.mean_grad_bound).max(0.0),
                    0.0,
                );
                avg.detail = Some(format!(
                    "mean={:e} bound={:e}",
                    r.mean_grad_norm_sq, r.mean_grad_bound
                ));
                out.push(avg);
            }
            Err(e) => out.push(CheckResult::failed(format!("descent alpha={alpha}"), -DESCENT_SLACK_TOL, &e)),
        }
    }
    out
}

fn bregman_checks() -> Vec<CheckResult> {
    let mut rng = RngStream::new(505);
    let k = 3;
    let families = [
        ("half-squared-norm", GeneratorKind::HalfSquaredNorm, Loss::cross_entropy(k)),
        ("cross-entropy", GeneratorKind::LossGenerator, Loss::cross_entropy(k)),
        ("squared", GeneratorKind::LossGenerator, Loss::squared(k)),
        ("squared-hinge", GeneratorKind::LossGenerator, Loss::squared_hinge()),
    ];
    let grid = [-3.0, -0.5, 0.0, 0.5, 3.0];
    let mut out = Vec::new();
    for (name, kind, loss) in families {
        let d = loss.output_dim();
        let classes = if d == 1 { 2 } else { d };
        let res = (|| -> Result<(f64, f64, f64)> {
            let mut zero_dev = 0.0f64;
            let mut negativity = 0.0f64;
            let mut mirror = 0.0f64;
            for y in 0..classes {
                let h = kind.for_label(loss, y);
                for &a in &grid {
                    for &b in &grid {
                        let u: Vec<f64> = (0..d).map(|c| if c % 2 == 0 { a } else { b }).collect();
                        zero_dev = zero_dev.max(bregman(&h, &u, &u)?.abs());
                    }
                }
                for _ in 0..20 {
                    let u = rng_normal(&mut rng, d, 0.0, 2.0)?;
                    let v = rng_normal(&mut rng, d, 0.0, 2.0)?;
                    negativity = negativity.max(-bregman(&h, &u, &v)?);
                }
                if loss.kind != LossKind::SquaredHinge {
                    for _ in 0..10 {
                        let f = rng_normal(&mut rng, d, 0.0, 2.0)?;
                        let alpha = 0.05 + 0.9 * rng.next_f64();
                        let q = guide_step_mirror_exact(&h, &f, y, &loss, alpha)?;
                        let (gq, gf, gl) = (h.grad(&q)?, h.grad(&f)?, loss.grad(&f, y)?);
                        for c in 0..d {
                            mirror = mirror.max((gq[c] - (gf[c] - alpha * gl[c])).abs());
                        }
                    }
                }
            }
            Ok((zero_dev, negativity.max(0.0), mirror))
        })();
        match res {
            Ok((z, neg, mirror)) => {
                out.push(CheckResult::at_most(format!("{name}: D(u,u) = 0 on grid"), z, BREGMAN_ZERO_TOL));
                out.push(CheckResult::at_most(format!("{name}: D(u,v) >= 0"), neg, BREGMAN_ZERO_TOL));
                if loss.kind != LossKind::SquaredHinge {
                    out.push(CheckResult::below(
                        format!("{name}: mirror step optimality"),
                        mirror,
                        MIRROR_CONDITION_TOL,
                    ));
                }
            }
            Err(e) => out.push(CheckResult::failed(name, BREGMAN_ZERO_TOL, &e)),
        }
    }
    out
}
