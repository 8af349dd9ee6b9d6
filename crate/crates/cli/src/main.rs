//! `gulf-opt`: train, evaluate and verify GULF models from JSON configs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use gulf_core::config::ExperimentConfig;
use gulf_core::data::{gen_synthetic, Dataset, SyntheticSpec};
use gulf_core::diagnostics::{ensemble_predict, error_rate, evaluate, Evaluation};
use gulf_core::experiment::{run_experiment, RunOptions};
use gulf_core::models::MlpModel;
use gulf_core::verify::{run_suite, Suite, SuiteReport};

#[derive(Debug, Parser)]
#[command(name = "gulf-opt", version, about = "Guided functional-gradient training toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    force: bool,
    /// Run this seed only.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Baselines: base, base-loop, base-lambda-alpha, label-smooth.
    Train(RunArgs),
    /// GULF1 or GULF2.
    Gulf(RunArgs),
    /// Loss and error of a checkpoint on the config's train and test splits.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Test metrics of the softmax average of several checkpoints.
    Ensemble {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "checkpoint", required = true, num_args = 1..)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Writes `train.csv` and `test.csv` from a synthetic spec (JSON).
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Runs a verification suite; exits nonzero when any check fails.
    Verify {
        /// gradients, prop21, prop22, theorem21, bregman or all.
        suite: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn config_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("reading config {}", path.display()))
}

fn emit(value: &impl Serialize, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run(args: &RunArgs, gulf: bool) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    if cfg.method.is_gulf() != gulf {
        let (want, other) = if gulf { ("gulf", "train") } else { ("train", "gulf") };
        bail!("method {} is not handled by `{want}`; use `{other}`", cfg.method.name());
    }
    if let Some(s) = args.seed {
        cfg.seeds = vec![s];
    }
    let opts = RunOptions {
        output_dir: args.out.clone(),
        force: args.force,
        base_dir: config_dir(&args.config),
    };
    let summary = run_experiment(&cfg, &opts)?;
    emit(&summary, None)?;
    if summary.failures == summary.seeds.len() {
        bail!("every seed failed");
    }
    Ok(())
}

fn load_splits(config: &Path) -> Result<(ExperimentConfig, Dataset, Dataset)> {
    let cfg = load_config(config)?;
    let (train, test) = cfg.dataset.load(&config_dir(config))?;
    Ok((cfg, train, test))
}

fn load_model(path: &Path, cfg: &ExperimentConfig) -> Result<MlpModel> {
    let m = MlpModel::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    if m.architecture() != &cfg.architecture {
        bail!("checkpoint {} does not match the config's architecture", path.display());
    }
    Ok(m)
}

#[derive(Serialize)]
struct EvalReport {
    checkpoint: PathBuf,
    train: Evaluation,
    test: Evaluation,
}

#[derive(Serialize)]
struct EnsembleReport {
    members: usize,
    test_error: f64,
    /// Mean `−log p_y` of the averaged probabilities.
    test_loss: f64,
    member_test_errors: Vec<f64>,
}

fn ensemble(config: &Path, checkpoints: &[PathBuf]) -> Result<EnsembleReport> {
    let (cfg, _, test) = load_splits(config)?;
    let loss = cfg.loss_fn()?;
    let models = checkpoints.iter().map(|p| load_model(p, &cfg)).collect::<Result<Vec<_>>>()?;
    let probs = ensemble_predict(&models, test.features())?;
    let test_loss = test
        .labels()
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs.get(i, y).max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / test.len() as f64;
    let member_test_errors = models
        .iter()
        .map(|m| evaluate(m, &test, &loss).map(|e| e.error))
        .collect::<gulf_core::Result<Vec<_>>>()?;
    Ok(EnsembleReport {
        members: models.len(),
        test_error: error_rate(&probs, test.labels()),
        test_loss,
        member_test_errors,
    })
}

fn gen_data(config: &Path, out: &Path, force: bool, seed: Option<u64>) -> Result<()> {
    let text = std::fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let mut spec: SyntheticSpec = serde_json::from_str(&text).context("parsing synthetic spec")?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let (train, test) = gen_synthetic(&spec)?;
    if out.exists() && std::fs::read_dir(out)?.next().is_some() && !force {
        bail!("output directory {} is not empty; pass --force to overwrite", out.display());
    }
    std::fs::create_dir_all(out)?;
    train.write_csv(out.join("train.csv"))?;
    test.write_csv(out.join("test.csv"))?;
    eprintln!("wrote {} train and {} test rows to {}", train.len(), test.len(), out.display());
    Ok(())
}

fn verify(suite: &str, out: Option<&Path>) -> Result<bool> {
    let suites: Vec<Suite> = if suite == "all" {
        Suite::ALL.to_vec()
    } else {
        vec![suite.parse()?]
    };
    let reports: Vec<SuiteReport> = suites.into_iter().map(run_suite).collect();
    for r in &reports {
        for c in &r.checks {
            let tag = if c.passed { "PASS" } else { "FAIL" };
            eprintln!("{tag} {} {}: {:e} (threshold {:e})", r.suite, c.name, c.max_deviation, c.threshold);
        }
    }
    emit(&reports, out)?;
    Ok(reports.iter().all(|r| r.passed))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Train(a) => run(a, false).map(|_| true),
        Command::Gulf(a) => run(a, true).map(|_| true),
        Command::Eval { config, checkpoint, out } => (|| {
            let (cfg, train, test) = load_splits(config)?;
            let loss = cfg.loss_fn()?;
            let m = load_model(checkpoint, &cfg)?;
            let report = EvalReport {
                checkpoint: checkpoint.clone(),
                train: evaluate(&m, &train, &loss)?,
                test: evaluate(&m, &test, &loss)?,
            };
            emit(&report, out.as_deref())
        })()
        .map(|_| true),
        Command::Ensemble { config, checkpoints, out } => {
            ensemble(config, checkpoints).and_then(|r| emit(&r, out.as_deref())).map(|_| true)
        }
        Command::GenData { config, out, force, seed } => gen_data(config, out, *force, *seed).map(|_| true),
        Command::Verify { suite, out } => verify(suite, out.as_deref()),
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
