//! Stage objectives and the outer training loops: regular training,
//! base-loop, base-λ/α, label smoothing and the two GULF variants.

use serde::{Deserialize, Serialize};

use crate::bregman::{check_probability_row, guide_step_l2, GeneratorKind, PROBABILITY_SUM_TOL};
use crate::data::Dataset;
use crate::error::{GulfError, Result};
use crate::losses::{soft_cross_entropy, Loss, LossKind};
use crate::models::{init_random, MlpArchitecture, MlpModel};
use crate::numerics::{max_abs_diff, softmax_unchecked, DenseMatrix, RngStream};

use super::sgd::{sgd_run_observed, SgdConfig, StepRecord};

/// Largest accepted deviation in [`prop22_grad_identity_check`].
pub const PROP22_TOL: f64 = 1e-8;

/// The data term minimised within one stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StageObjective {
    /// `mean L_y(f_θ)`.
    Regular,
    /// Cross-entropy against `1 − ε` on the true class and `ε/(K−1)`
    /// elsewhere.
    LabelSmoothing { epsilon: f64 },
    /// `mean ½‖f_θ − f*ₘ‖²` with `f*ₘ` from `m` first-order steps of size
    /// `alpha` on the frozen model's outputs.
    Gulf1 { alpha: f64, m: usize },
    /// `mean D_{L_y}(f_θ, f_t) + α∇L_y(f_t)ᵀf_θ`, evaluated in distillation
    /// form for cross-entropy.
    Gulf2 { alpha: f64 },
}

impl StageObjective {
    fn needs_frozen(&self) -> bool {
        matches!(self, Self::Gulf1 { .. } | Self::Gulf2 { .. })
    }
}

/// Validity record of the GULF2 probability targets seen during a stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuideStats {
    pub batches: usize,
    pub rows: usize,
    /// Largest `|Σₖ qₖ − 1|` over all rows.
    pub max_sum_deviation: f64,
    pub min_entry: f64,
    pub max_entry: f64,
}

impl Default for GuideStats {
    fn default() -> Self {
        Self {
            batches: 0,
            rows: 0,
            max_sum_deviation: 0.0,
            min_entry: f64::INFINITY,
            max_entry: f64::NEG_INFINITY,
        }
    }
}

impl GuideStats {
    fn record(&mut self, row: &[f64]) {
        self.rows += 1;
        let s: f64 = row.iter().sum();
        self.max_sum_deviation = self.max_sum_deviation.max((s - 1.0).abs());
        for &v in row {
            self.min_entry = self.min_entry.min(v);
            self.max_entry = self.max_entry.max(v);
        }
    }

    /// Whether every recorded row was a probability vector.
    pub fn is_valid(&self) -> bool {
        self.rows == 0
            || (self.max_sum_deviation <= PROBABILITY_SUM_TOL && self.min_entry >= 0.0 && self.max_entry <= 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    pub steps: usize,
    /// Present for GULF2 with cross-entropy.
    pub guide: Option<GuideStats>,
}

/// Snapshot `θ_t` that defines a stage's guide.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenReference {
    model: MlpModel,
}

impl FrozenReference {
    pub fn new(model: MlpModel) -> Self {
        Self { model }
    }

    pub fn model(&self) -> &MlpModel {
        &self.model
    }

    pub fn theta(&self) -> &[f64] {
        self.model.theta()
    }

    /// GULF1 guide targets `f*ₘ` for a batch.
    pub fn l2_targets(&self, x: &DenseMatrix, labels: &[usize], loss: &Loss, alpha: f64, m: usize) -> Result<DenseMatrix> {
        let out = self.model.forward(x)?;
        let mut t = DenseMatrix::zeros(out.rows(), out.cols());
        for (i, &y) in labels.iter().enumerate() {
            let g = guide_step_l2(out.row(i), y, loss, alpha, m)?;
            t.row_mut(i).copy_from_slice(g.row(0));
        }
        Ok(t)
    }
}

/// `dL/df` averaged over the batch, for the stage objective.
fn output_gradient(
    obj: StageObjective,
    loss: &Loss,
    out: &DenseMatrix,
    frozen_out: Option<&DenseMatrix>,
    labels: &[usize],
    stats: &mut GuideStats,
) -> Result<DenseMatrix> {
    let n = out.rows();
    let k = out.cols();
    let scale = 1.0 / n as f64;
    let mut g = DenseMatrix::zeros(n, k);
    let frozen = || frozen_out.ok_or_else(|| GulfError::Config("stage objective needs a frozen model".into()));
    match obj {
        StageObjective::Regular => {
            for (i, &y) in labels.iter().enumerate() {
                loss.grad_into(out.row(i), y, g.row_mut(i));
            }
        }
        StageObjective::LabelSmoothing { epsilon } => {
            let off = epsilon / (k - 1) as f64;
            for (i, &y) in labels.iter().enumerate() {
                let p = softmax_unchecked(out.row(i));
                for (c, gc) in g.row_mut(i).iter_mut().enumerate() {
                    let q = if c == y { 1.0 - epsilon } else { off };
                    *gc = p[c] - q;
                }
            }
        }
        StageObjective::Gulf1 { alpha, m } => {
            let ft = frozen()?;
            for (i, &y) in labels.iter().enumerate() {
                let target = guide_step_l2(ft.row(i), y, loss, alpha, m)?;
                for ((gc, f), t) in g.row_mut(i).iter_mut().zip(out.row(i)).zip(target.row(0)) {
                    *gc = f - t;
                }
            }
        }
        StageObjective::Gulf2 { alpha } => {
            let ft = frozen()?;
            stats.batches += 1;
            if loss.kind == LossKind::CrossEntropy {
                let mut q = vec![0.0; k];
                for (i, &y) in labels.iter().enumerate() {
                    let pt = softmax_unchecked(ft.row(i));
                    for (c, qc) in q.iter_mut().enumerate() {
                        let yc = if c == y { 1.0 } else { 0.0 };
                        *qc = (1.0 - alpha) * pt[c] + alpha * yc;
                    }
                    stats.record(&q);
                    if let Err(msg) = check_probability_row(&q) {
                        return Err(GulfError::HypothesisViolation(format!(
                            "guide target for batch row {i} is not a distribution: {msg}"
                        )));
                    }
                    let p = softmax_unchecked(out.row(i));
                    for (c, gc) in g.row_mut(i).iter_mut().enumerate() {
                        *gc = p[c] - q[c];
                    }
                }
            } else {
                let mut gt = vec![0.0; k];
                for (i, &y) in labels.iter().enumerate() {
                    loss.grad_into(ft.row(i), y, &mut gt);
                    let row = g.row_mut(i);
                    loss.grad_into(out.row(i), y, row);
                    for (gc, t) in row.iter_mut().zip(&gt) {
                        *gc = *gc - t + alpha * t;
                    }
                }
            }
        }
    }
    for v in g.data_mut() {
        *v *= scale;
    }
    Ok(g)
}

/// Gradient of the stage's data term with respect to `θ` on one batch.
pub fn objective_gradient(
    obj: StageObjective,
    model: &MlpModel,
    frozen: Option<&FrozenReference>,
    x: &DenseMatrix,
    labels: &[usize],
    loss: &Loss,
) -> Result<Vec<f64>> {
    let mut stats = GuideStats::default();
    objective_gradient_tracked(obj, model, frozen, x, labels, loss, &mut stats)
}

fn objective_gradient_tracked(
    obj: StageObjective,
    model: &MlpModel,
    frozen: Option<&FrozenReference>,
    x: &DenseMatrix,
    labels: &[usize],
    loss: &Loss,
    stats: &mut GuideStats,
) -> Result<Vec<f64>> {
    let cache = model.forward_cached(x)?;
    let frozen_out = match frozen {
        Some(f) if obj.needs_frozen() => Some(f.model.forward(x)?),
        _ => None,
    };
    let g = output_gradient(obj, loss, cache.output(), frozen_out.as_ref(), labels, stats)?;
    model.backward_cached(&cache, &g)
}

fn check_compat(data: &Dataset, arch: &MlpArchitecture, loss: &Loss) -> Result<()> {
    arch.validate()?;
    if data.is_empty() {
        return Err(GulfError::InvalidInput("training set is empty".into()));
    }
    if data.input_dim() != arch.input_dim {
        return Err(GulfError::InvalidDimension(format!(
            "data has {} features, architecture expects {}",
            data.input_dim(),
            arch.input_dim
        )));
    }
    if data.num_classes() != loss.num_classes {
        return Err(GulfError::InvalidDimension(format!(
            "data has {} classes, loss expects {}",
            data.num_classes(),
            loss.num_classes
        )));
    }
    if arch.output_dim != loss.output_dim() {
        return Err(GulfError::InvalidDimension(format!(
            "architecture has {} outputs, loss needs {}",
            arch.output_dim,
            loss.output_dim()
        )));
    }
    Ok(())
}

/// One stage: warm start at `model`, fresh momentum, full lr schedule,
/// shuffles from stream `stage`.
#[allow(clippy::too_many_arguments)]
fn run_stage(
    model: MlpModel,
    frozen: Option<&FrozenReference>,
    data: &Dataset,
    loss: &Loss,
    obj: StageObjective,
    sgd: &SgdConfig,
    stage: usize,
    observer: &mut dyn FnMut(usize, &StepRecord<'_>),
) -> Result<(MlpModel, StageReport)> {
    check_compat(data, model.architecture(), loss)?;
    let mut stats = GuideStats::default();
    let mut steps = 0;
    let trained = sgd_run_observed(
        model,
        data.len(),
        sgd,
        sgd.stage_stream(stage),
        |m, idx| {
            let (x, y) = data.batch(idx);
            objective_gradient_tracked(obj, m, frozen, &x, &y, loss, &mut stats)
        },
        |rec| {
            steps = rec.step;
            observer(stage, rec);
        },
    )?;
    let guide = (matches!(obj, StageObjective::Gulf2 { .. }) && loss.kind == LossKind::CrossEntropy).then_some(stats);
    Ok((trained, StageReport { stage, steps, guide }))
}

fn no_observer() -> impl FnMut(usize, &StepRecord<'_>) {
    |_, _| {}
}

/// Regular training from `init_random(arch, seed)`: the base model.
pub fn train_regular(data: &Dataset, arch: &MlpArchitecture, loss: &Loss, cfg: &SgdConfig) -> Result<MlpModel> {
    let init = init_random(arch, &mut RngStream::new(cfg.seed))?;
    let (m, _) = run_stage(init, None, data, loss, StageObjective::Regular, cfg, 0, &mut no_observer())?;
    Ok(m)
}

/// `T` rounds of regular training, each warm-started from the previous
/// round with a restarted schedule.
pub fn base_loop(data: &Dataset, theta0: &MlpModel, loss: &Loss, cfg: &SgdConfig, stages: usize) -> Result<Vec<MlpModel>> {
    base_loop_observed(data, theta0, loss, cfg, stages, &mut no_observer())
}

pub fn base_loop_observed(
    data: &Dataset,
    theta0: &MlpModel,
    loss: &Loss,
    cfg: &SgdConfig,
    stages: usize,
    observer: &mut dyn FnMut(usize, &StepRecord<'_>),
) -> Result<Vec<MlpModel>> {
    if stages == 0 {
        return Err(GulfError::InvalidParameter("base-loop needs T >= 1".into()));
    }
    let mut cur = theta0.clone();
    let mut out = Vec::with_capacity(stages);
    for t in 0..stages {
        let (next, _) = run_stage(cur, None, data, loss, StageObjective::Regular, cfg, t, observer)?;
        out.push(next.clone());
        cur = next;
    }
    Ok(out)
}

/// Regular training with weight decay `λ/α`.
pub fn train_base_lambda_alpha(
    data: &Dataset,
    arch: &MlpArchitecture,
    loss: &Loss,
    cfg: &SgdConfig,
    alpha: f64,
) -> Result<MlpModel> {
    check_alpha(alpha)?;
    let mut scaled = cfg.clone();
    scaled.weight_decay = cfg.weight_decay / alpha;
    train_regular(data, arch, loss, &scaled)
}

/// Cross-entropy training against label-smoothed targets.
pub fn train_label_smoothing(data: &Dataset, arch: &MlpArchitecture, cfg: &SgdConfig, epsilon: f64) -> Result<MlpModel> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(GulfError::InvalidParameter(format!("epsilon must lie in [0, 1), got {epsilon}")));
    }
    let loss = Loss::new(LossKind::CrossEntropy, data.num_classes())?;
    let init = init_random(arch, &mut RngStream::new(cfg.seed))?;
    let obj = StageObjective::LabelSmoothing { epsilon };
    let (m, _) = run_stage(init, None, data, &loss, obj, cfg, 0, &mut no_observer())?;
    Ok(m)
}

/// Smoothed target row: `1 − ε` on `y`, `ε/(K−1)` elsewhere.
pub fn smoothed_target(y: usize, k: usize, epsilon: f64) -> Vec<f64> {
    let off = epsilon / (k - 1) as f64;
    (0..k).map(|c| if c == y { 1.0 - epsilon } else { off }).collect()
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(GulfError::InvalidParameter(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitStrategy {
    Random,
    Base,
    /// Base model with its last layer divided by `v`.
    BaseShrunk { v: f64 },
}

impl InitStrategy {
    pub fn label(&self) -> String {
        match self {
            Self::Random => "ini:random".into(),
            Self::Base => "ini:base".into(),
            Self::BaseShrunk { v } => format!("ini:base/{v}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GulfConfig {
    pub alpha: f64,
    /// Functional steps per guide (GULF1 only).
    #[serde(default = "one")]
    pub m: usize,
    pub stages: usize,
    pub generator: GeneratorKind,
    pub init: InitStrategy,
    pub sgd: SgdConfig,
}

fn one() -> usize {
    1
}

impl GulfConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if self.m == 0 {
            return Err(GulfError::InvalidParameter("m must be at least 1".into()));
        }
        if self.stages == 0 {
            return Err(GulfError::InvalidParameter("stage count T must be at least 1".into()));
        }
        if let InitStrategy::BaseShrunk { v } = self.init {
            if !(v > 0.0) || !v.is_finite() {
                return Err(GulfError::InvalidParameter(format!("shrink factor must be positive, got {v}")));
            }
        }
        self.sgd.validate()
    }

    pub fn objective(&self) -> StageObjective {
        match self.generator {
            GeneratorKind::HalfSquaredNorm => StageObjective::Gulf1 { alpha: self.alpha, m: self.m },
            GeneratorKind::LossGenerator => StageObjective::Gulf2 { alpha: self.alpha },
        }
    }
}

/// One GULF stage from `θ_t`.
pub fn gulf_stage(
    model: &MlpModel,
    data: &Dataset,
    loss: &Loss,
    generator: GeneratorKind,
    alpha: f64,
    m: usize,
    sgd: &SgdConfig,
    stage: usize,
) -> Result<(MlpModel, StageReport)> {
    check_alpha(alpha)?;
    let obj = match generator {
        GeneratorKind::HalfSquaredNorm => StageObjective::Gulf1 { alpha, m },
        GeneratorKind::LossGenerator => StageObjective::Gulf2 { alpha },
    };
    let frozen = FrozenReference::new(model.clone());
    run_stage(model.clone(), Some(&frozen), data, loss, obj, sgd, stage, &mut no_observer())
}

#[derive(Debug, Clone)]
pub struct GulfRun {
    pub initial: MlpModel,
    /// `θ_1, …, θ_T`.
    pub checkpoints: Vec<MlpModel>,
    pub reports: Vec<StageReport>,
}

pub fn gulf_train(
    data: &Dataset,
    arch: &MlpArchitecture,
    loss: &Loss,
    cfg: &GulfConfig,
    base: Option<&MlpModel>,
) -> Result<GulfRun> {
    gulf_train_observed(data, arch, loss, cfg, base, &mut no_observer())
}

pub fn gulf_train_observed(
    data: &Dataset,
    arch: &MlpArchitecture,
    loss: &Loss,
    cfg: &GulfConfig,
    base: Option<&MlpModel>,
    observer: &mut dyn FnMut(usize, &StepRecord<'_>),
) -> Result<GulfRun> {
    cfg.validate()?;
    let require_base = || {
        let b = base.ok_or_else(|| GulfError::Config(format!("{} requires a base model", cfg.init.label())))?;
        if b.architecture() != arch {
            return Err(GulfError::Config("base model architecture does not match".into()));
        }
        Ok(b)
    };
    let initial = match cfg.init {
        InitStrategy::Random => init_random(arch, &mut RngStream::new(cfg.sgd.seed))?,
        InitStrategy::Base => require_base()?.clone(),
        InitStrategy::BaseShrunk { v } => require_base()?.shrink_last_layer(v)?,
    };
    let obj = cfg.objective();
    let mut cur = initial.clone();
    let mut checkpoints = Vec::with_capacity(cfg.stages);
    let mut reports = Vec::with_capacity(cfg.stages);
    for t in 0..cfg.stages {
        let frozen = FrozenReference::new(cur.clone());
        let (next, report) = run_stage(cur, Some(&frozen), data, loss, obj, &cfg.sgd, t, observer)?;
        checkpoints.push(next.clone());
        reports.push(report);
        cur = next;
    }
    Ok(GulfRun {
        initial,
        checkpoints,
        reports,
    })
}

/// `mean[D_{L_y}(f_θ, f_t) + α∇L_y(f_t)ᵀ f_θ]`.
pub fn bregman_form_objective(
    model: &MlpModel,
    frozen: &MlpModel,
    x: &DenseMatrix,
    labels: &[usize],
    loss: &Loss,
    alpha: f64,
) -> Result<f64> {
    let f = model.forward(x)?;
    let ft = frozen.forward(x)?;
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let (u, v) = (f.row(i), ft.row(i));
        let gv = loss.grad(v, y)?;
        let lin: f64 = gv.iter().zip(u).zip(v).map(|((g, a), b)| g * (a - b)).sum();
        let d = loss.value(u, y)? - loss.value(v, y)? - lin;
        total += d + alpha * gv.iter().zip(u).map(|(g, a)| g * a).sum::<f64>();
    }
    Ok(total / labels.len() as f64)
}

/// `mean[(1 − α) CE(f_θ, p(f_t)) + α L_y(f_θ)]` (cross-entropy only).
pub fn distillation_form_objective(
    model: &MlpModel,
    frozen: &MlpModel,
    x: &DenseMatrix,
    labels: &[usize],
    loss: &Loss,
    alpha: f64,
) -> Result<f64> {
    require_cross_entropy(loss)?;
    let f = model.forward(x)?;
    let ft = frozen.forward(x)?;
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let pt = softmax_unchecked(ft.row(i));
        total += (1.0 - alpha) * soft_cross_entropy(f.row(i), &pt) + alpha * loss.value(f.row(i), y)?;
    }
    Ok(total / labels.len() as f64)
}

fn require_cross_entropy(loss: &Loss) -> Result<()> {
    if loss.kind != LossKind::CrossEntropy {
        return Err(GulfError::Unsupported("the distillation form needs cross-entropy".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct Prop22Report {
    pub alpha: f64,
    pub max_deviation: f64,
    pub worst_coordinate: usize,
    pub gradient_norm: f64,
    pub threshold: f64,
}

/// Compares `∇_θ` of the Bregman form and the distillation form on one
/// batch. The two output gradients are assembled independently:
/// `∇L(f) − ∇L(f_t) + α∇L(f_t)` against `(1 − α)(p − p_t) + α(p − y)`.
pub fn prop22_grad_identity_check(
    theta: &MlpModel,
    theta_t: &MlpModel,
    x: &DenseMatrix,
    labels: &[usize],
    loss: &Loss,
    alpha: f64,
) -> Result<Prop22Report> {
    require_cross_entropy(loss)?;
    check_alpha(alpha)?;
    if labels.len() != x.rows() || labels.is_empty() {
        return Err(GulfError::InvalidDimension("batch and labels disagree".into()));
    }
    let cache = theta.forward_cached(x)?;
    let f = cache.output();
    let ft = theta_t.forward(x)?;
    let n = labels.len() as f64;
    let k = f.cols();
    let mut g7 = DenseMatrix::zeros(f.rows(), k);
    let mut g8 = DenseMatrix::zeros(f.rows(), k);
    for (i, &y) in labels.iter().enumerate() {
        let gf = loss.grad(f.row(i), y)?;
        let gt = loss.grad(ft.row(i), y)?;
        for c in 0..k {
            g7.set(i, c, (gf[c] - gt[c] + alpha * gt[c]) / n);
        }
        let p = softmax_unchecked(f.row(i));
        let pt = softmax_unchecked(ft.row(i));
        for c in 0..k {
            let yc = if c == y { 1.0 } else { 0.0 };
            g8.set(i, c, ((1.0 - alpha) * (p[c] - pt[c]) + alpha * (p[c] - yc)) / n);
        }
    }
    let a = theta.backward_cached(&cache, &g7)?;
    let b = theta.backward_cached(&cache, &g8)?;
    let (worst_coordinate, max_deviation) = a
        .iter()
        .zip(&b)
        .map(|(u, v)| (u - v).abs())
        .enumerate()
        .fold((0, 0.0f64), |acc, (i, d)| if d > acc.1 { (i, d) } else { acc });
    debug_assert_eq!(max_deviation, max_abs_diff(&a, &b));
    let report = Prop22Report {
        alpha,
        max_deviation,
        worst_coordinate,
        gradient_norm: a.iter().map(|v| v * v).sum::<f64>().sqrt(),
        threshold: PROP22_TOL,
    };
    if !(max_deviation < PROP22_TOL) {
        return Err(GulfError::IdentityViolation {
            check: "bregman vs distillation gradient".into(),
            deviation: max_deviation,
            threshold: PROP22_TOL,
            worst: worst_coordinate,
        });
    }
    Ok(report)
}
