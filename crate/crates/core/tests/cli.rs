use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use proptest::prelude::*;
use ratefair::config::ExperimentConfig;

const TINY: &str = r#"
seed = 5
output_dir = "out/run"

[dataset]
kind = "synthetic"
correlation = 0.9
num_classes = 4
samples_per_class = 30
test_samples_per_class = 15
feature_dim = 6
seed = 1

[plan]
classes_per_stage = 2
order = "natural"

[model]
exemplars_per_class = 5

[model.encoder]
hidden = [8]
output = 4

[model.discriminator]
hidden = [6]
output = 3

[model.train]
epochs = 2
batch_size = 16

[model.probe]
epochs = 20
"#;

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("exp.toml"), config).unwrap();
        Sandbox { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn ratefair(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_ratefair"))
            .args(args)
            .current_dir(self.dir.path())
            .env("RATEFAIR_CACHE_DIR", self.path("cache"))
            .output()
            .unwrap()
    }
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn stderr_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stderr).unwrap_or_else(|_| panic!("stderr: {}", String::from_utf8_lossy(&out.stderr)))
}

fn lines(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn validate_config_accepts_and_rejects() {
    let ok = Sandbox::new(TINY);
    assert_eq!(stdout_json(&ok.ratefair(&["validate-config", "exp.toml"]))["status"], "ok");

    let bad = Sandbox::new(&TINY.replace("exemplars_per_class = 5", "exemplars_per_class = 5\nbeta = -1.0"));
    let out = bad.ratefair(&["validate-config", "exp.toml"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_json(&out);
    assert!(err.to_string().contains("beta"), "{err}");

    let missing = ok.ratefair(&["validate-config", "nope.toml"]);
    assert_eq!(missing.status.code(), Some(1));
    stderr_json(&missing);

    let unknown = Sandbox::new(&TINY.replace("seed = 5", "seed = 5\ncolour = 1"));
    assert_eq!(unknown.ratefair(&["validate-config", "exp.toml"]).status.code(), Some(1));
}

#[test]
fn runs_are_reproducible_and_never_overwrite() {
    let sb = Sandbox::new(TINY);
    let first = stdout_json(&sb.ratefair(&["run", "exp.toml"]));
    let second = stdout_json(&sb.ratefair(&["run", "exp.toml"]));
    let a = PathBuf::from(first["run_dir"].as_str().unwrap());
    let b = PathBuf::from(second["run_dir"].as_str().unwrap());
    assert_ne!(a, b);
    let (a, b) = (sb.dir.path().join(a), sb.dir.path().join(b));
    assert_eq!(fs::read(a.join("report.json")).unwrap(), fs::read(b.join("report.json")).unwrap());
    for f in ["config.json", "config.toml", "metrics.csv", "meta.json", "stage_0/report.json", "stage_1/telemetry.jsonl", "checkpoints/encoder_stage_1.json", "checkpoints/discriminator_stage_0.json"] {
        assert!(a.join(f).is_file(), "{f}");
    }
    let cfg = ExperimentConfig::load(&a.join("config.toml")).unwrap();
    assert_eq!(cfg.seed, 5);

    // 60 training samples per stage, batch 16 → 4 steps per epoch, 2 epochs
    assert_eq!(lines(&a.join("stage_0/telemetry.jsonl")), 8);
    let files = stdout_json(&sb.ratefair(&["export-plots", a.to_str().unwrap()]));
    assert_eq!(files["files"].as_array().unwrap().len(), 5);
    assert_eq!(lines(&a.join("plots/rz.csv")), 1 + 16);
    for f in ["accuracy.csv", "gap_rms.csv", "dp.csv", "leakage.csv"] {
        assert_eq!(lines(&a.join("plots").join(f)), 1 + 2, "{f}");
    }
}

#[test]
fn output_dir_flag_wins() {
    let sb = Sandbox::new(TINY);
    let out = stdout_json(&sb.ratefair(&["run", "exp.toml", "--output-dir", "elsewhere"]));
    assert_eq!(out["run_dir"], "elsewhere");
    assert!(sb.path("elsewhere/report.json").is_file());
}

#[test]
fn export_without_a_run_fails() {
    let sb = Sandbox::new(TINY);
    fs::create_dir(sb.path("empty")).unwrap();
    let out = sb.ratefair(&["export-plots", "empty"]);
    assert_eq!(out.status.code(), Some(1));
    stderr_json(&out);
}

#[test]
fn ablation_grid() {
    let sb = Sandbox::new(TINY);
    let out = stdout_json(&sb.ratefair(&["ablate", "exp.toml", "--grid", "model.beta=0,1", "--grid", "model.eta=0,1"]));
    assert_eq!(out["cells"], 4);
    assert_eq!(out["failed"], 0);
    let root = sb.dir.path().join(out["root"].as_str().unwrap());
    let mut rd = csv::Reader::from_path(root.join("comparison.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(&rows[1][1], "model.beta=0;model.eta=1");
    assert!(rows.iter().all(|r| &r[2] == "ok"));
    assert!(root.join("summary.json").is_file());
}

#[test]
fn empty_grid_is_one_run() {
    let sb = Sandbox::new(TINY);
    let out = stdout_json(&sb.ratefair(&["ablate", "exp.toml"]));
    assert_eq!(out["cells"], 1);
}

#[test]
fn failing_cells_are_recorded() {
    let sb = Sandbox::new(TINY);
    let out = sb.ratefair(&["ablate", "exp.toml", "--grid", "model.eta=1,-1"]);
    assert_eq!(out.status.code(), Some(1));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["failed"], 1);
    let root = sb.dir.path().join(v["root"].as_str().unwrap());
    let text = fs::read_to_string(root.join("comparison.csv")).unwrap();
    assert!(text.lines().nth(1).unwrap().contains(",ok,"));
    assert!(text.lines().nth(2).unwrap().contains(",failed,"));

    let unknown = sb.ratefair(&["ablate", "exp.toml", "--grid", "model.nope=1"]);
    assert_eq!(unknown.status.code(), Some(1));
    assert!(stderr_json(&unknown).to_string().contains("model.nope"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_round_trips(seed in 0u64..1 << 40, beta in 0.0f64..5.0, p in 0.0f64..=1.0, r in 1usize..50, epochs in 0usize..100) {
        let text = TINY
            .replace("seed = 5", &format!("seed = {seed}"))
            .replace("correlation = 0.9", &format!("correlation = {p:?}"))
            .replace("exemplars_per_class = 5", &format!("exemplars_per_class = {r}\nbeta = {beta:?}"))
            .replace("epochs = 2\n", &format!("epochs = {epochs}\n"));
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        let again = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        prop_assert_eq!(&cfg, &again);
        let via_json: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        prop_assert_eq!(&cfg, &via_json);
    }
}
