use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gulf_opt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gulf-opt"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn text(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SPEC: &str = r#"{
  "generator": "two-arcs",
  "num_classes": 2,
  "examples_per_class": 20,
  "test_examples_per_class": 10,
  "input_dim": 3,
  "class_separation": 3.0,
  "label_noise": 0.1,
  "seed": 11
}"#;

fn experiment(method: &str, extra: &str, dataset: &str, out: &Path) -> String {
    format!(
        r#"{{
  "method": "{method}",
  "dataset": {dataset},
  "architecture": {{"input_dim": 3, "hidden_dims": [6], "output_dim": 2, "activation": "tanh"}},
  "loss": "cross-entropy",
  {extra}
  "sgd": {{
    "lr": 0.1, "momentum": 0.9, "weight_decay": 0.001, "batch_size": 8, "seed": 0,
    "schedule": [{{"epochs": 3, "lr_multiplier": 1.0}}, {{"epochs": 1, "lr_multiplier": 0.1}}]
  }},
  "output_dir": "{}",
  "seeds": [1, 2]
}}"#,
        out.display()
    )
}

fn synthetic() -> String {
    let mut s = String::from(r#"{"source": "synthetic", "#);
    s.push_str(&SPEC[1..]);
    s
}

#[test]
fn gen_data_then_train_eval_and_ensemble_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(&spec, SPEC).unwrap();
    let data = dir.path().join("data");
    let o = gulf_opt(&["gen-data", "--config", text(&spec), "--out", text(&data)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let train_csv = fs::read_to_string(data.join("train.csv")).unwrap();
    assert!(train_csv.starts_with("x0,x1,x2,label\n"));
    assert_eq!(train_csv.lines().count(), 41);

    let again = gulf_opt(&["gen-data", "--config", text(&spec), "--out", text(&data)]);
    assert!(!again.status.success());

    let out = dir.path().join("run");
    let dataset = r#"{"source": "csv", "train": "data/train.csv", "test": "data/test.csv", "label_column": "label", "standardize": true}"#;
    let cfg = dir.path().join("base.json");
    fs::write(&cfg, experiment("base-loop", r#""stages": 2,"#, dataset, &out)).unwrap();
    let o = gulf_opt(&["train", "--config", text(&cfg)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["failures"], 0);
    assert_eq!(summary["seeds"].as_array().unwrap().len(), 2);
    let s1 = out.join("seed_1");
    for f in ["initial.json", "stage_1.json", "stage_2.json", "trajectory.csv"] {
        assert!(s1.join(f).exists(), "{f}");
    }
    let traj = fs::read_to_string(s1.join("trajectory.csv")).unwrap();
    assert_eq!(traj.lines().count(), 4);

    let ck = s1.join("stage_2.json");
    let o = gulf_opt(&["eval", "--config", text(&cfg), "--checkpoint", text(&ck)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ev: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let err = ev["test"]["error"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&err));

    let ck1 = s1.join("stage_1.json");
    let o = gulf_opt(&["ensemble", "--config", text(&cfg), "--checkpoint", text(&ck), "--checkpoint", text(&ck1)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let en: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(en["members"], 2);
    assert_eq!(en["member_test_errors"].as_array().unwrap().len(), 2);
}

#[test]
fn subcommands_check_method_family_and_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = dir.path().join("gulf.json");
    let gulf = r#""gulf": {"alpha": 0.3, "stages": 2, "init": {"kind": "base"}},"#;
    fs::write(&cfg, experiment("gulf2", gulf, &synthetic(), &out)).unwrap();
    let o = gulf_opt(&["train", "--config", text(&cfg)]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("use `gulf`"));

    let o = gulf_opt(&["gulf", "--config", text(&cfg), "--seed", "5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("seed_5").join("stage_2.json").exists());
    assert!(!out.join("seed_1").exists());

    let o = gulf_opt(&["gulf", "--config", text(&cfg), "--seed", "5"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("--force"));
    let o = gulf_opt(&["gulf", "--config", text(&cfg), "--seed", "5", "--force"]);
    assert!(o.status.success());
}

#[test]
fn reruns_produce_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gulf.json");
    let gulf = r#""gulf": {"alpha": 0.5, "stages": 2, "init": {"kind": "random"}},"#;
    fs::write(&cfg, experiment("gulf2", gulf, &synthetic(), Path::new("unused"))).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = gulf_opt(&["gulf", "--config", text(&cfg), "--out", text(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for rel in ["summary.json", "seed_1/trajectory.csv", "seed_2/stage_2.json", "seed_2/initial.json"] {
        assert_eq!(fs::read(a.join(rel)).unwrap(), fs::read(b.join(rel)).unwrap(), "{rel}");
    }
}

#[test]
fn verify_reports_and_sets_exit_status() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("prop22.json");
    let o = gulf_opt(&["verify", "prop22", "--out", text(&report)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v[0]["suite"], "prop22");
    assert_eq!(v[0]["passed"], true);
    let dev = v[0]["checks"][0]["max_deviation"].as_f64().unwrap();
    assert!(dev < 1e-8);
    assert!(String::from_utf8_lossy(&o.stderr).contains("PASS prop22"));

    let o = gulf_opt(&["verify", "bregman"]);
    assert!(o.status.success());

    let o = gulf_opt(&["verify", "nonsense"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn malformed_config_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, "{\"method\": \"gulf2\"").unwrap();
    let o = gulf_opt(&["gulf", "--config", text(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("reading config"));
}
