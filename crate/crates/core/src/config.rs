//! Experiment configuration (JSON).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{gen_synthetic, load_csv_split, Dataset, SyntheticSpec};
use crate::error::{GulfError, Result};
use crate::losses::{Loss, LossKind};
use crate::models::MlpArchitecture;
use crate::trainers::{InitStrategy, SgdConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Base,
    BaseLoop,
    BaseLambdaAlpha,
    LabelSmooth,
    Gulf1,
    Gulf2,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Self::Base => "base",
            Self::BaseLoop => "base-loop",
            Self::BaseLambdaAlpha => "base-lambda-alpha",
            Self::LabelSmooth => "label-smooth",
            Self::Gulf1 => "gulf1",
            Self::Gulf2 => "gulf2",
        }
    }

    pub fn is_gulf(self) -> bool {
        matches!(self, Self::Gulf1 | Self::Gulf2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DatasetSource {
    #[serde(rename_all = "snake_case")]
    Csv {
        train: PathBuf,
        test: PathBuf,
        label_column: String,
        #[serde(default)]
        standardize: bool,
    },
    Synthetic(SyntheticSpec),
}

impl DatasetSource {
    /// Loads both splits. Relative CSV paths resolve against `base_dir`.
    pub fn load(&self, base_dir: &Path) -> Result<(Dataset, Dataset)> {
        match self {
            Self::Csv {
                train,
                test,
                label_column,
                standardize,
            } => load_csv_split(base_dir.join(train), base_dir.join(test), label_column, *standardize),
            Self::Synthetic(spec) => gen_synthetic(spec),
        }
    }
}

/// Settings shared by GULF1 and GULF2; the generator follows from the method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GulfSettings {
    pub alpha: f64,
    #[serde(default = "one")]
    pub m: usize,
    pub stages: usize,
    pub init: InitStrategy,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub dataset: DatasetSource,
    pub architecture: MlpArchitecture,
    pub loss: LossKind,
    /// GULF1 and GULF2 settings.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gulf: Option<GulfSettings>,
    /// `α` for base-λ/α.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Round count for base-loop.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stages: Option<usize>,
    /// Smoothing weight for label-smooth.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    /// Base training and per-stage inner optimisation. The seed is replaced
    /// by each entry of `seeds`.
    pub sgd: SgdConfig,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn loss_fn(&self) -> Result<Loss> {
        let k = match self.loss {
            LossKind::SquaredHinge => 2,
            _ => self.architecture.output_dim,
        };
        Loss::new(self.loss, k)
    }

    /// `α` used for the trajectory's `ℓ_α` column.
    pub fn reporting_alpha(&self) -> f64 {
        match self.method {
            Method::Gulf1 | Method::Gulf2 => self.gulf.as_ref().map_or(1.0, |g| g.alpha),
            Method::BaseLambdaAlpha => self.alpha.unwrap_or(1.0),
            _ => 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(GulfError::Config(msg));
        let m = self.method.name();
        let uses_gulf = self.method.is_gulf();
        let uses_alpha = self.method == Method::BaseLambdaAlpha;
        let uses_stages = self.method == Method::BaseLoop;
        let uses_eps = self.method == Method::LabelSmooth;
        for (present, used, field) in [
            (self.gulf.is_some(), uses_gulf, "gulf"),
            (self.alpha.is_some(), uses_alpha, "alpha"),
            (self.stages.is_some(), uses_stages, "stages"),
            (self.epsilon.is_some(), uses_eps, "epsilon"),
        ] {
            if present && !used {
                return err(format!("field {field:?} is not used by method {m}"));
            }
            if used && !present {
                return err(format!("method {m} requires field {field:?}"));
            }
        }
        if self.seeds.is_empty() {
            return err("at least one seed is required".into());
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return err("seeds must be distinct".into());
        }
        self.architecture.validate()?;
        let loss = self.loss_fn()?;
        if loss.output_dim() != self.architecture.output_dim {
            return err(format!(
                "loss {:?} needs {} outputs, architecture has {}",
                self.loss,
                loss.output_dim(),
                self.architecture.output_dim
            ));
        }
        if uses_eps && self.loss != LossKind::CrossEntropy {
            return err("label smoothing needs the cross-entropy loss".into());
        }
        if let DatasetSource::Synthetic(spec) = &self.dataset {
            spec.validate()?;
            if spec.input_dim != self.architecture.input_dim {
                return err(format!(
                    "synthetic input_dim {} differs from architecture input_dim {}",
                    spec.input_dim, self.architecture.input_dim
                ));
            }
            if self.loss != LossKind::SquaredHinge && spec.num_classes != self.architecture.output_dim {
                return err(format!(
                    "synthetic data has {} classes, architecture has {} outputs",
                    spec.num_classes, self.architecture.output_dim
                ));
            }
            if self.loss == LossKind::SquaredHinge && spec.num_classes != 2 {
                return err("the squared hinge loss needs two classes".into());
            }
        }
        self.sgd.validate()?;
        let bad_alpha = |a: f64| !(a > 0.0 && a <= 1.0);
        if let Some(g) = &self.gulf {
            if bad_alpha(g.alpha) {
                return err(format!("gulf alpha must lie in (0, 1], got {}", g.alpha));
            }
            if g.stages == 0 || g.m == 0 {
                return err("gulf stages and m must be at least 1".into());
            }
            if let InitStrategy::BaseShrunk { v } = g.init {
                if !(v > 0.0) || !v.is_finite() {
                    return err(format!("shrink factor must be positive, got {v}"));
                }
            }
        }
        if let Some(a) = self.alpha {
            if bad_alpha(a) {
                return err(format!("alpha must lie in (0, 1], got {a}"));
            }
        }
        if self.stages == Some(0) {
            return err("stages must be at least 1".into());
        }
        if let Some(e) = self.epsilon {
            if !(0.0..1.0).contains(&e) {
                return err(format!("epsilon must lie in [0, 1), got {e}"));
            }
        }
        Ok(())
    }
}
