//! Mini-batch SGD with heavy-ball momentum, coupled weight decay and a
//! piecewise-constant learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{GulfError, Result};
use crate::models::MlpModel;
use crate::numerics::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSegment {
    pub epochs: usize,
    pub lr_multiplier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    #[serde(default = "default_schedule")]
    pub schedule: Vec<ScheduleSegment>,
    pub seed: u64,
}

/// 50 epochs at `η`, 10 at `0.1η`, 10 at `0.01η`.
pub fn default_schedule() -> Vec<ScheduleSegment> {
    vec![
        ScheduleSegment { epochs: 50, lr_multiplier: 1.0 },
        ScheduleSegment { epochs: 10, lr_multiplier: 0.1 },
        ScheduleSegment { epochs: 10, lr_multiplier: 0.01 },
    ]
}

impl SgdConfig {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64, batch_size: usize, seed: u64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            batch_size,
            schedule: default_schedule(),
            seed,
        }
    }

    pub fn with_schedule(mut self, schedule: Vec<ScheduleSegment>) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(GulfError::InvalidParameter(msg));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return bad(format!("weight decay must be >= 0, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        if self.schedule.is_empty() {
            return bad("schedule must have at least one segment".into());
        }
        let mut prev = f64::INFINITY;
        for seg in &self.schedule {
            if !(seg.lr_multiplier > 0.0) || seg.lr_multiplier > prev {
                return bad("schedule multipliers must be positive and non-increasing".into());
            }
            prev = seg.lr_multiplier;
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.schedule.iter().map(|s| s.epochs).sum()
    }

    /// Shuffling stream for stage `stage`. Stream index 0 is reserved for
    /// initialisation.
    pub fn stage_stream(&self, stage: usize) -> RngStream {
        RngStream::new(self.seed).child(1 + stage as u64)
    }
}

/// Passed to an observer after every update.
#[derive(Debug)]
pub struct StepRecord<'a> {
    /// 1-based step index within the run.
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    /// Full update gradient including the weight-decay term.
    pub gradient: &'a [f64],
    pub theta: &'a [f64],
}

/// Runs the full schedule. `grad` maps `(model, batch indices)` to the
/// gradient of the data term; `λθ` is added here.
pub fn sgd_run<G>(model: MlpModel, num_examples: usize, cfg: &SgdConfig, stream: RngStream, grad: G) -> Result<MlpModel>
where
    G: FnMut(&MlpModel, &[usize]) -> Result<Vec<f64>>,
{
    sgd_run_observed(model, num_examples, cfg, stream, grad, |_| {})
}

pub fn sgd_run_observed<G, O>(
    mut model: MlpModel,
    num_examples: usize,
    cfg: &SgdConfig,
    mut stream: RngStream,
    mut grad: G,
    mut observer: O,
) -> Result<MlpModel>
where
    G: FnMut(&MlpModel, &[usize]) -> Result<Vec<f64>>,
    O: FnMut(&StepRecord<'_>),
{
    cfg.validate()?;
    if num_examples == 0 {
        return Err(GulfError::InvalidInput("no training examples".into()));
    }
    let p = model.theta().len();
    let mut velocity = vec![0.0; p];
    let mut order: Vec<usize> = (0..num_examples).collect();
    let mut step = 0;
    let mut epoch = 0;
    for seg in &cfg.schedule {
        let lr = cfg.lr * seg.lr_multiplier;
        for _ in 0..seg.epochs {
            stream.shuffle(&mut order);
            for batch in order.chunks(cfg.batch_size) {
                step += 1;
                let mut g = grad(&model, batch)?;
                if g.len() != p {
                    return Err(GulfError::InvalidDimension(format!(
                        "gradient has {} entries, model has {p}",
                        g.len()
                    )));
                }
                if cfg.weight_decay != 0.0 {
                    for (gi, t) in g.iter_mut().zip(model.theta()) {
                        *gi += cfg.weight_decay * t;
                    }
                }
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(GulfError::Divergence {
                        step,
                        detail: "non-finite gradient".into(),
                    });
                }
                let theta = model.theta_mut();
                for ((v, t), gi) in velocity.iter_mut().zip(theta.iter_mut()).zip(&g) {
                    *v = cfg.momentum * *v - lr * gi;
                    *t += *v;
                }
                if theta.iter().any(|v| !v.is_finite()) {
                    return Err(GulfError::Divergence {
                        step,
                        detail: "non-finite parameters".into(),
                    });
                }
                observer(&StepRecord {
                    step,
                    epoch,
                    lr,
                    gradient: &g,
                    theta: model.theta(),
                });
            }
            epoch += 1;
        }
    }
    Ok(model)
}
