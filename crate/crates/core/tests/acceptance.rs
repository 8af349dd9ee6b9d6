//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use gulf_core::bregman::GeneratorKind;
use gulf_core::config::{DatasetSource, ExperimentConfig, GulfSettings, Method};
use gulf_core::data::{gen_synthetic, Dataset, SyntheticGenerator, SyntheticSpec};
use gulf_core::diagnostics::{record_trajectory, StageTrajectory};
use gulf_core::experiment::{median, run_experiment, RunOptions};
use gulf_core::losses::{Loss, LossKind};
use gulf_core::models::{init_random, Activation, MlpArchitecture, MlpModel};
use gulf_core::numerics::RngStream;
use gulf_core::trainers::{
    base_loop_observed, gulf_train_observed, train_base_lambda_alpha, train_regular, GulfConfig, GulfRun,
    InitStrategy, ScheduleSegment, SgdConfig,
};
use gulf_core::verify::{run_suite, Suite, SuiteReport, PROP22_TUPLES};

struct Outcome {
    passed: bool,
    detail: String,
}

fn check(id: u32, title: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let mut out = f();
    let elapsed = start.elapsed();
    if let Some(limit) = limit {
        if elapsed > limit {
            out.passed = false;
            out.detail.push_str(&format!("; runtime {:.1}s exceeds {:.0}s", elapsed.as_secs_f64(), limit.as_secs_f64()));
        }
    }
    let tag = if out.passed { "PASS" } else { "FAIL" };
    println!("{tag} [{id:2}] {title} ({:.1}s): {}", elapsed.as_secs_f64(), out.detail);
    out.passed
}

fn suite_outcome(report: &SuiteReport) -> Outcome {
    let failing: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    let worst = report
        .checks
        .iter()
        .max_by(|a, b| (a.max_deviation / a.threshold.max(f64::MIN_POSITIVE)).total_cmp(&(b.max_deviation / b.threshold.max(f64::MIN_POSITIVE))))
        .expect("non-empty suite");
    let mut detail = format!(
        "{} checks, worst {:e} vs {:e} ({})",
        report.checks.len(),
        worst.max_deviation,
        worst.threshold,
        worst.name
    );
    if !failing.is_empty() {
        detail.push_str(&format!("; failing: {failing:?}"));
    }
    Outcome {
        passed: report.passed,
        detail,
    }
}

// Desk-scale noisy binary task shared by criteria 5, 6, 7 and 9.
const SEEDS: [u64; 3] = [0, 1, 2];
const STAGES: usize = 15;

fn noisy_task() -> (Dataset, Dataset) {
    gen_synthetic(&SyntheticSpec {
        generator: SyntheticGenerator::TwoArcs,
        num_classes: 2,
        examples_per_class: 1000,
        test_examples_per_class: Some(1000),
        input_dim: 20,
        class_separation: 5.0,
        label_noise: 0.1,
        seed: 100,
    })
    .expect("valid synthetic spec")
}

fn task_arch() -> MlpArchitecture {
    MlpArchitecture::new(20, vec![128], 2, Activation::Tanh).expect("valid architecture")
}

fn task_sgd(seed: u64) -> SgdConfig {
    SgdConfig::new(0.1, 0.9, 3e-3, 128, seed).with_schedule(vec![
        ScheduleSegment { epochs: 40, lr_multiplier: 1.0 },
        ScheduleSegment { epochs: 30, lr_multiplier: 0.1 },
        ScheduleSegment { epochs: 30, lr_multiplier: 0.01 },
    ])
}

fn gulf2(alpha: f64, init: InitStrategy, seed: u64) -> GulfConfig {
    GulfConfig {
        alpha,
        m: 1,
        stages: STAGES,
        generator: GeneratorKind::LossGenerator,
        init,
        sgd: task_sgd(seed),
    }
}

/// Steps per stage for `n` examples under `task_sgd`.
fn steps_per_stage(n: usize, sgd: &SgdConfig) -> usize {
    sgd.total_epochs() * n.div_ceil(sgd.batch_size)
}

struct SeedRuns {
    base: MlpModel,
    from_base: GulfRun,
    from_random: GulfRun,
    traj_base: StageTrajectory,
    traj_random: StageTrajectory,
}

fn trajectory(run: &GulfRun, train: &Dataset, test: &Dataset, alpha: f64) -> StageTrajectory {
    let mut models = vec![run.initial.clone()];
    models.extend(run.checkpoints.iter().cloned());
    record_trajectory(&models, 0, train, test, &Loss::cross_entropy(2), 3e-3, alpha).expect("trajectory")
}

fn criterion5_runs(train: &Dataset, test: &Dataset) -> Result<Vec<SeedRuns>, String> {
    let arch = task_arch();
    let loss = Loss::cross_entropy(2);
    let mut out = Vec::new();
    for seed in SEEDS {
        let base = train_regular(train, &arch, &loss, &task_sgd(seed)).map_err(|e| format!("base seed {seed}: {e}"))?;
        let mut noop = |_: usize, _: &gulf_core::trainers::StepRecord<'_>| {};
        let from_base = gulf_train_observed(train, &arch, &loss, &gulf2(0.3, InitStrategy::Base, seed), Some(&base), &mut noop)
            .map_err(|e| format!("ini:base seed {seed}: {e}"))?;
        let from_random = gulf_train_observed(train, &arch, &loss, &gulf2(0.3, InitStrategy::Random, seed), None, &mut noop)
            .map_err(|e| format!("ini:random seed {seed}: {e}"))?;
        let traj_base = trajectory(&from_base, train, test, 0.3);
        let traj_random = trajectory(&from_random, train, test, 0.3);
        out.push(SeedRuns {
            base,
            from_base,
            from_random,
            traj_base,
            traj_random,
        });
    }
    Ok(out)
}

/// Stagewise median of one column across seeds.
fn median_column(trajs: &[&StageTrajectory], col: impl Fn(&gulf_core::diagnostics::StageRecord) -> f64) -> Vec<f64> {
    let n = trajs[0].len();
    (0..n)
        .map(|i| median(&trajs.iter().map(|t| col(&t.records[i])).collect::<Vec<_>>()).expect("non-empty"))
        .collect()
}

fn criterion5(runs: &[SeedRuns]) -> Outcome {
    let tb: Vec<&StageTrajectory> = runs.iter().map(|r| &r.traj_base).collect();
    let tr: Vec<&StageTrajectory> = runs.iter().map(|r| &r.traj_random).collect();
    let base_train = median_column(&tb, |r| r.train_loss);
    let base_test = median_column(&tb, |r| r.test_loss);
    let rand_train = median_column(&tr, |r| r.train_loss);

    let increasing = base_train.windows(2).all(|w| w[1] > w[0]);
    let min_test = base_test[1..].iter().copied().fold(f64::INFINITY, f64::min);
    let below_base = min_test < base_test[0];
    let decreasing = rand_train.windows(2).all(|w| w[1] < w[0]);
    let gap = (base_train[STAGES] - rand_train[STAGES]).abs();
    let close = gap <= 0.05;
    Outcome {
        passed: increasing && below_base && decreasing && close,
        detail: format!(
            "(a) ini:base train loss strictly increasing={increasing} [{:.4} -> {:.4}], min test loss {:.4} < base {:.4}: {below_base}; \
             (b) ini:random train loss decreasing={decreasing} [{:.4} -> {:.4}]; (c) terminal train-loss gap {:.4} <= 0.05: {close}",
            base_train[0], base_train[STAGES], min_test, base_test[0], rand_train[0], rand_train[STAGES], gap
        ),
    }
}

fn criterion6(train: &Dataset, test: &Dataset, runs: &[SeedRuns]) -> Outcome {
    let arch = task_arch();
    let loss = Loss::cross_entropy(2);
    let mut bla_train = Vec::new();
    let mut bla_err = Vec::new();
    let mut gulf_train = Vec::new();
    let mut gulf_err = Vec::new();
    for (seed, r) in SEEDS.iter().zip(runs) {
        let res = (|| -> gulf_core::Result<()> {
            let bla = train_base_lambda_alpha(train, &arch, &loss, &task_sgd(*seed), 0.01)?;
            let mut noop = |_: usize, _: &gulf_core::trainers::StepRecord<'_>| {};
            let g = gulf_train_observed(train, &arch, &loss, &gulf2(0.01, InitStrategy::Base, *seed), Some(&r.base), &mut noop)?;
            let last = g.checkpoints.last().expect("stages >= 1").clone();
            let t = record_trajectory(&[bla, last], 1, train, test, &loss, 3e-3, 0.01)?;
            bla_train.push(t.records[0].train_loss);
            bla_err.push(t.records[0].test_err);
            gulf_train.push(t.records[1].train_loss);
            gulf_err.push(t.records[1].test_err);
            Ok(())
        })();
        if let Err(e) = res {
            return Outcome {
                passed: false,
                detail: format!("seed {seed}: {e}"),
            };
        }
    }
    let m = |v: &[f64]| median(v).expect("three seeds");
    let (bt, be, gt, ge) = (m(&bla_train), m(&bla_err), m(&gulf_train), m(&gulf_err));
    let higher_loss = bt > gt;
    let no_better = be >= ge;
    Outcome {
        passed: higher_loss && no_better,
        detail: format!(
            "median final train loss base-λ/α {bt:.4} > GULF2 ini:base {gt:.4}: {higher_loss}; \
             median test error base-λ/α {be:.4} >= GULF2 {ge:.4}: {no_better}"
        ),
    }
}

fn criterion7(runs: &[SeedRuns]) -> Outcome {
    let mut worst = f64::NEG_INFINITY;
    let mut at = (0, 0);
    for (seed, r) in SEEDS.iter().zip(runs) {
        for w in r.traj_base.records.windows(2) {
            let rise = w[1].reg_alpha_loss - w[0].reg_alpha_loss;
            if rise > worst {
                worst = rise;
                at = (*seed, w[1].stage);
            }
        }
    }
    Outcome {
        passed: worst <= 1e-3,
        detail: format!(
            "largest per-stage rise of ℓ_α {worst:.3e} (seed {}, stage {}) vs slack 1e-3, checked on every seed",
            at.0, at.1
        ),
    }
}

fn criterion8() -> Outcome {
    let (train, _) = gen_synthetic(&SyntheticSpec {
        generator: SyntheticGenerator::GaussianBlobs,
        num_classes: 3,
        examples_per_class: 60,
        test_examples_per_class: Some(1),
        input_dim: 5,
        class_separation: 3.0,
        label_noise: 0.1,
        seed: 8,
    })
    .expect("valid spec");
    let arch = MlpArchitecture::new(5, vec![16], 3, Activation::Relu).expect("valid architecture");
    let loss = Loss::cross_entropy(3);
    let sgd = SgdConfig::new(0.05, 0.9, 1e-3, 32, 21).with_schedule(vec![
        ScheduleSegment { epochs: 6, lr_multiplier: 1.0 },
        ScheduleSegment { epochs: 2, lr_multiplier: 0.1 },
    ]);
    let stages = 3;
    let mut loop_grads: Vec<Vec<f64>> = Vec::new();
    let mut gulf_grads: Vec<Vec<f64>> = Vec::new();
    let res = (|| -> gulf_core::Result<(Vec<MlpModel>, GulfRun)> {
        let init = init_random(&arch, &mut RngStream::new(sgd.seed))?;
        let looped = base_loop_observed(&train, &init, &loss, &sgd, stages, &mut |_, r| loop_grads.push(r.gradient.to_vec()))?;
        let cfg = GulfConfig {
            alpha: 1.0,
            m: 1,
            stages,
            generator: GeneratorKind::LossGenerator,
            init: InitStrategy::Random,
            sgd: sgd.clone(),
        };
        let g = gulf_train_observed(&train, &arch, &loss, &cfg, None, &mut |_, r| gulf_grads.push(r.gradient.to_vec()))?;
        Ok((looped, g))
    })();
    let (looped, g) = match res {
        Ok(v) => v,
        Err(e) => {
            return Outcome {
                passed: false,
                detail: e.to_string(),
            }
        }
    };
    let same_count = loop_grads.len() == gulf_grads.len() && !loop_grads.is_empty();
    let max_dev = loop_grads
        .iter()
        .zip(&gulf_grads)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
        .fold(0.0f64, f64::max);
    let bitwise = looped.len() == g.checkpoints.len()
        && looped
            .iter()
            .zip(&g.checkpoints)
            .all(|(a, b)| a.theta().iter().zip(b.theta()).all(|(x, y)| x.to_bits() == y.to_bits()));
    Outcome {
        passed: same_count && max_dev < 1e-12 && bitwise,
        detail: format!(
            "{} steps each, max per-step gradient deviation {max_dev:e} (< 1e-12), checkpoints bitwise equal: {bitwise}",
            loop_grads.len()
        ),
    }
}

fn criterion9(train: &Dataset, runs: &[SeedRuns]) -> Outcome {
    let sgd = task_sgd(0);
    let expected_steps = steps_per_stage(train.len(), &sgd);
    let expected_rows = sgd.total_epochs() * train.len();
    let mut batches = 0;
    let mut worst_sum = 0.0f64;
    let mut min_entry = f64::INFINITY;
    let mut max_entry = f64::NEG_INFINITY;
    let mut problems = Vec::new();
    for (seed, r) in SEEDS.iter().zip(runs) {
        for (label, run) in [("ini:base", &r.from_base), ("ini:random", &r.from_random)] {
            for rep in &run.reports {
                let Some(g) = &rep.guide else {
                    problems.push(format!("seed {seed} {label} stage {}: no guide record", rep.stage));
                    continue;
                };
                if !g.is_valid() || g.batches != rep.steps || g.batches != expected_steps || g.rows != expected_rows {
                    problems.push(format!("seed {seed} {label} stage {}: {g:?}", rep.stage));
                }
                batches += g.batches;
                worst_sum = worst_sum.max(g.max_sum_deviation);
                min_entry = min_entry.min(g.min_entry);
                max_entry = max_entry.max(g.max_entry);
            }
        }
    }
    let mut detail = format!(
        "{batches} batches checked ({expected_steps} per stage), max |sum - 1| {worst_sum:e}, entries in [{min_entry:e}, {max_entry}]"
    );
    if !problems.is_empty() {
        detail.push_str(&format!("; {problems:?}"));
    }
    Outcome {
        passed: problems.is_empty() && worst_sum <= 1e-12 && min_entry >= 0.0 && max_entry <= 1.0,
        detail,
    }
}

fn small_config(method: Method) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        method,
        dataset: DatasetSource::Synthetic(SyntheticSpec {
            generator: SyntheticGenerator::TwoArcs,
            num_classes: 2,
            examples_per_class: 40,
            test_examples_per_class: Some(20),
            input_dim: 4,
            class_separation: 3.0,
            label_noise: 0.1,
            seed: 3,
        }),
        architecture: MlpArchitecture::new(4, vec![8], 2, Activation::Relu).expect("valid architecture"),
        loss: LossKind::CrossEntropy,
        gulf: None,
        alpha: None,
        stages: None,
        epsilon: None,
        sgd: SgdConfig::new(0.1, 0.9, 1e-3, 16, 0).with_schedule(vec![
            ScheduleSegment { epochs: 4, lr_multiplier: 1.0 },
            ScheduleSegment { epochs: 1, lr_multiplier: 0.1 },
        ]),
        output_dir: "unused".into(),
        seeds: vec![1, 2],
    };
    match method {
        Method::Gulf1 | Method::Gulf2 => {
            c.gulf = Some(GulfSettings {
                alpha: 0.3,
                m: 2,
                stages: 3,
                init: InitStrategy::BaseShrunk { v: 2.0 },
            })
        }
        Method::BaseLoop => c.stages = Some(3),
        Method::BaseLambdaAlpha => c.alpha = Some(0.1),
        Method::LabelSmooth => c.epsilon = Some(0.1),
        Method::Base => {}
    }
    c
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).expect("readable dir") {
            let p = e.expect("entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).expect("inside").display().to_string();
                out.push((rel, fs::read(&p).expect("readable file")));
            }
        }
    }
    out.sort();
    out
}

fn criterion10() -> Outcome {
    let methods = [
        Method::Base,
        Method::BaseLoop,
        Method::BaseLambdaAlpha,
        Method::LabelSmooth,
        Method::Gulf1,
        Method::Gulf2,
    ];
    let mut compared = 0;
    for m in methods {
        let cfg = small_config(m);
        let dirs = [tempfile::tempdir().expect("tempdir"), tempfile::tempdir().expect("tempdir")];
        for d in &dirs {
            let opts = RunOptions {
                output_dir: Some(d.path().to_path_buf()),
                force: true,
                ..RunOptions::default()
            };
            match run_experiment(&cfg, &opts) {
                Ok(s) if s.failures == 0 => {}
                Ok(s) => {
                    return Outcome {
                        passed: false,
                        detail: format!("{}: {} failed seeds", m.name(), s.failures),
                    }
                }
                Err(e) => {
                    return Outcome {
                        passed: false,
                        detail: format!("{}: {e}", m.name()),
                    }
                }
            }
        }
        let (a, b) = (files(dirs[0].path()), files(dirs[1].path()));
        let names: Vec<&String> = a.iter().map(|(n, _)| n).collect();
        let has_csv = names.iter().any(|n| n.ends_with("trajectory.csv"));
        let has_ck = names.iter().any(|n| n.contains("stage_"));
        if a != b || !has_csv || !has_ck {
            let differing: Vec<&String> = a.iter().zip(&b).filter(|(x, y)| x != y).map(|(x, _)| &x.0).collect();
            return Outcome {
                passed: false,
                detail: format!("{}: outputs differ {differing:?}", m.name()),
            };
        }
        compared += a.len();
    }
    Outcome {
        passed: true,
        detail: format!("{compared} files bitwise identical across reruns for all six methods"),
    }
}

fn main() -> ExitCode {
    let mut ok = true;
    ok &= check(1, "backprop vs central finite differences", Some(Duration::from_secs(10)), || {
        suite_outcome(&run_suite(Suite::Gradients))
    });
    ok &= check(2, &format!("Bregman-form vs distillation-form gradients over {PROP22_TUPLES} tuples"), Some(Duration::from_secs(30)), || {
        suite_outcome(&run_suite(Suite::Prop22))
    });
    ok &= check(3, "functional contraction and closed-form guide targets", Some(Duration::from_secs(60)), || {
        suite_outcome(&run_suite(Suite::Prop21))
    });
    ok &= check(4, "per-stage descent of the α-regularised loss", Some(Duration::from_secs(120)), || {
        suite_outcome(&run_suite(Suite::Theorem21))
    });

    let (train, test) = noisy_task();
    let start = Instant::now();
    let runs = criterion5_runs(&train, &test);
    let shared = start.elapsed();
    match runs {
        Ok(runs) => {
            ok &= check(5, "U-shaped path from base and smooth path from random", Some(Duration::from_secs(600)), || {
                let mut o = criterion5(&runs);
                if shared > Duration::from_secs(600) {
                    o.passed = false;
                }
                o.detail.push_str(&format!("; training {:.1}s", shared.as_secs_f64()));
                o
            });
            ok &= check(6, "base-λ/α underfits relative to GULF2 at α = 0.01", None, || criterion6(&train, &test, &runs));
            ok &= check(7, "ℓ_α non-increasing along the ini:base run", None, || criterion7(&runs));
            ok &= check(8, "base-loop matches GULF2 with α = 1", None, criterion8);
            ok &= check(9, "every GULF2 probability target is a distribution", None, || criterion9(&train, &runs));
        }
        Err(e) => {
            for (id, title) in [(5, "U-shaped path"), (6, "base-λ/α contrast"), (7, "ℓ_α trend"), (9, "guide validity")] {
                println!("FAIL [{id:2}] {title}: {e}");
            }
            ok = false;
            ok &= check(8, "base-loop matches GULF2 with α = 1", None, criterion8);
        }
    }
    ok &= check(10, "bitwise-identical reruns", None, criterion10);
    if ok {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: some criteria failed");
        ExitCode::FAILURE
    }
}
