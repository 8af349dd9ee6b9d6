//! Experiment orchestration: per-seed training, checkpoints, trajectories
//! and a median summary on disk.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bregman::GeneratorKind;
use crate::config::{ExperimentConfig, Method};
use crate::data::Dataset;
use crate::diagnostics::{record_trajectory, StageTrajectory};
use crate::error::{GulfError, Result};
use crate::models::{init_random, MlpModel};
use crate::numerics::RngStream;
use crate::trainers::{
    base_loop_observed, gulf_train_observed, train_base_lambda_alpha, train_label_smoothing, train_regular,
    GulfConfig, InitStrategy, SgdConfig, StageReport, StepRecord,
};

/// Models produced by one method for one seed.
#[derive(Debug, Clone)]
pub struct MethodRun {
    /// `θ_0` for multi-stage methods.
    pub initial: Option<MlpModel>,
    /// `θ_1, …, θ_T`.
    pub checkpoints: Vec<MlpModel>,
    pub reports: Vec<StageReport>,
}

impl MethodRun {
    /// Initial model (if any) followed by the checkpoints, with the stage
    /// index of the first entry.
    pub fn trajectory_models(&self) -> (Vec<MlpModel>, usize) {
        match &self.initial {
            Some(m) => {
                let mut all = Vec::with_capacity(self.checkpoints.len() + 1);
                all.push(m.clone());
                all.extend(self.checkpoints.iter().cloned());
                (all, 0)
            }
            None => (self.checkpoints.clone(), 1),
        }
    }
}

fn seeded(sgd: &SgdConfig, seed: u64) -> SgdConfig {
    SgdConfig { seed, ..sgd.clone() }
}

pub fn gulf_config(cfg: &ExperimentConfig, seed: u64) -> Result<GulfConfig> {
    let g = cfg
        .gulf
        .as_ref()
        .ok_or_else(|| GulfError::Config(format!("method {} requires gulf settings", cfg.method.name())))?;
    let generator = match cfg.method {
        Method::Gulf1 => GeneratorKind::HalfSquaredNorm,
        Method::Gulf2 => GeneratorKind::LossGenerator,
        other => return Err(GulfError::Config(format!("{} is not a GULF method", other.name()))),
    };
    Ok(GulfConfig {
        alpha: g.alpha,
        m: g.m,
        stages: g.stages,
        generator,
        init: g.init,
        sgd: seeded(&cfg.sgd, seed),
    })
}

/// Trains `cfg.method` on `train` with `seed`, reporting every SGD step as
/// `(stage, record)`.
pub fn train_method_observed(
    cfg: &ExperimentConfig,
    train: &Dataset,
    seed: u64,
    observer: &mut dyn FnMut(usize, &StepRecord<'_>),
) -> Result<MethodRun> {
    let arch = &cfg.architecture;
    let loss = cfg.loss_fn()?;
    let sgd = seeded(&cfg.sgd, seed);
    let single = |m: MlpModel| MethodRun {
        initial: None,
        checkpoints: vec![m],
        reports: Vec::new(),
    };
    match cfg.method {
        Method::Base => Ok(single(train_regular(train, arch, &loss, &sgd)?)),
        Method::BaseLambdaAlpha => {
            let alpha = cfg.alpha.ok_or_else(|| GulfError::Config("missing alpha".into()))?;
            Ok(single(train_base_lambda_alpha(train, arch, &loss, &sgd, alpha)?))
        }
        Method::LabelSmooth => {
            let eps = cfg.epsilon.ok_or_else(|| GulfError::Config("missing epsilon".into()))?;
            Ok(single(train_label_smoothing(train, arch, &sgd, eps)?))
        }
        Method::BaseLoop => {
            let stages = cfg.stages.ok_or_else(|| GulfError::Config("missing stages".into()))?;
            let init = init_random(arch, &mut RngStream::new(seed))?;
            let checkpoints = base_loop_observed(train, &init, &loss, &sgd, stages, observer)?;
            Ok(MethodRun {
                initial: Some(init),
                checkpoints,
                reports: Vec::new(),
            })
        }
        Method::Gulf1 | Method::Gulf2 => {
            let gcfg = gulf_config(cfg, seed)?;
            let base = match gcfg.init {
                InitStrategy::Random => None,
                _ => Some(train_regular(train, arch, &loss, &sgd)?),
            };
            let run = gulf_train_observed(train, arch, &loss, &gcfg, base.as_ref(), observer)?;
            Ok(MethodRun {
                initial: Some(run.initial),
                checkpoints: run.checkpoints,
                reports: run.reports,
            })
        }
    }
}

pub fn train_method(cfg: &ExperimentConfig, train: &Dataset, seed: u64) -> Result<MethodRun> {
    train_method_observed(cfg, train, seed, &mut |_, _| {})
}

pub fn run_trajectory(cfg: &ExperimentConfig, run: &MethodRun, train: &Dataset, test: &Dataset) -> Result<StageTrajectory> {
    let (models, first) = run.trajectory_models();
    record_trajectory(
        &models,
        first,
        train,
        test,
        &cfg.loss_fn()?,
        cfg.sgd.weight_decay,
        cfg.reporting_alpha(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub final_train_loss: f64,
    pub final_test_loss: f64,
    pub final_test_error: f64,
    /// Stage (among `1..=T`) with the lowest test error; ties go to the
    /// earliest.
    pub best_stage: usize,
    pub best_test_error: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guide_valid: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<SeedMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedianSummary {
    pub final_train_loss: f64,
    pub final_test_loss: f64,
    pub final_test_error: f64,
    pub best_test_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub method: Method,
    pub seeds: Vec<SeedSummary>,
    pub failures: usize,
    /// Medians over successful seeds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub median: Option<MedianSummary>,
}

/// Median; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

pub fn seed_metrics(traj: &StageTrajectory, reports: &[StageReport]) -> Result<SeedMetrics> {
    let last = traj
        .records
        .last()
        .ok_or_else(|| GulfError::InvalidInput("empty trajectory".into()))?;
    let mut best = None::<(usize, f64)>;
    for r in traj.records.iter().filter(|r| r.stage >= 1) {
        if best.is_none_or(|(_, e)| r.test_err < e) {
            best = Some((r.stage, r.test_err));
        }
    }
    let (best_stage, best_test_error) = best.unwrap_or((last.stage, last.test_err));
    let guides: Vec<bool> = reports.iter().filter_map(|r| r.guide.as_ref().map(|g| g.is_valid())).collect();
    Ok(SeedMetrics {
        final_train_loss: last.train_loss,
        final_test_loss: last.test_loss,
        final_test_error: last.test_err,
        best_stage,
        best_test_error,
        guide_valid: (!guides.is_empty()).then(|| guides.iter().all(|&v| v)),
    })
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

pub fn checkpoint_name(stage: usize) -> String {
    format!("stage_{stage}.json")
}

fn write_seed(dir: &Path, run: &MethodRun, traj: &StageTrajectory) -> Result<()> {
    fs::create_dir_all(dir)?;
    if let Some(init) = &run.initial {
        init.save(dir.join("initial.json"))?;
    }
    for (i, m) in run.checkpoints.iter().enumerate() {
        m.save(dir.join(checkpoint_name(i + 1)))?;
    }
    traj.write_csv(dir.join("trajectory.csv"))
}

fn prepare_output(out: &Path, seeds: &[u64], force: bool) -> Result<()> {
    if out.exists() {
        let non_empty = fs::read_dir(out)?.next().is_some();
        if non_empty && !force {
            return Err(GulfError::Config(format!(
                "output directory {} is not empty; pass --force to overwrite",
                out.display()
            )));
        }
        for s in seeds {
            let d = seed_dir(out, *s);
            if d.exists() {
                fs::remove_dir_all(d)?;
            }
        }
    }
    fs::create_dir_all(out)?;
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Replaces `cfg.output_dir`.
    pub output_dir: Option<PathBuf>,
    pub force: bool,
    /// Directory against which relative dataset paths resolve.
    pub base_dir: PathBuf,
}

/// Runs every seed, writing `seed_{s}/stage_{t}.json`, `trajectory.csv`,
/// `config.json` and `summary.json`. A failing seed is recorded and the
/// remaining seeds still run.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let out = opts.output_dir.clone().unwrap_or_else(|| cfg.output_dir.clone());
    let (train, test) = cfg.dataset.load(&opts.base_dir)?;
    if train.input_dim() != cfg.architecture.input_dim {
        return Err(GulfError::Config(format!(
            "dataset has {} features, architecture expects {}",
            train.input_dim(),
            cfg.architecture.input_dim
        )));
    }
    prepare_output(&out, &cfg.seeds, opts.force)?;
    fs::write(out.join("config.json"), cfg.to_json()? + "\n")?;
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let res = (|| -> Result<SeedMetrics> {
            let run = train_method(cfg, &train, seed)?;
            let traj = run_trajectory(cfg, &run, &train, &test)?;
            write_seed(&seed_dir(&out, seed), &run, &traj)?;
            seed_metrics(&traj, &run.reports)
        })();
        seeds.push(match res {
            Ok(m) => SeedSummary {
                seed,
                ok: true,
                metrics: Some(m),
                error: None,
            },
            Err(e) => SeedSummary {
                seed,
                ok: false,
                metrics: None,
                error: Some(e.to_string()),
            },
        });
    }
    let ok: Vec<&SeedMetrics> = seeds.iter().filter_map(|s| s.metrics.as_ref()).collect();
    let med = |f: fn(&SeedMetrics) -> f64| median(&ok.iter().map(|m| f(m)).collect::<Vec<_>>());
    let median = match (
        med(|m| m.final_train_loss),
        med(|m| m.final_test_loss),
        med(|m| m.final_test_error),
        med(|m| m.best_test_error),
    ) {
        (Some(a), Some(b), Some(c), Some(d)) => Some(MedianSummary {
            final_train_loss: a,
            final_test_loss: b,
            final_test_error: c,
            best_test_error: d,
        }),
        _ => None,
    };
    let summary = ExperimentSummary {
        method: cfg.method,
        failures: seeds.iter().filter(|s| !s.ok).count(),
        seeds,
        median,
    };
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}
