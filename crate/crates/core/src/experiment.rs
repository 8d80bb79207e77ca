//! Run directories, dataset loading and caching, ablation grids and plot
//! series export.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{grid_cells, parse_literal, set_path, ConfigError, DatasetSpec, ExperimentConfig, GridAxis, Mode};
use crate::data::{colorize, generate_synthetic, read_csv_with_vocab, read_idx, ColorizeSpec, DataError, Dataset, LabelVocab, Split};
use crate::debias::{TelemetryRecord, TrainError};
use crate::incremental::{run_experiment, ExperimentReport, StagePlan};

/// Environment variable naming the dataset cache directory.
pub const CACHE_ENV: &str = "RATEFAIR_CACHE_DIR";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("no telemetry found under {0}")]
    MissingTelemetry(String),
    #[error("malformed run file {path}: {message}")]
    Malformed { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

impl ExperimentError {
    /// 1 for problems with the user's inputs, 2 for internal failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Train(
                TrainError::Rate(_) | TrainError::Nn(_) | TrainError::Metric(_) | TrainError::SamplerFailure(_),
            ) => 2,
            ExperimentError::Io { .. } => 2,
            _ => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ExperimentError::Config(_) => "config",
            ExperimentError::Data(_) => "data",
            ExperimentError::Train(_) => "train",
            ExperimentError::Io { .. } => "io",
            ExperimentError::MissingTelemetry(_) => "missing_telemetry",
            ExperimentError::Malformed { .. } => "malformed",
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({ "error": self.kind(), "message": self.to_string() })
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_file(path, text.as_bytes())
}

/// Creates `base`, or `base-1`, `base-2`, ... if it already exists.
pub fn fresh_dir(base: &Path) -> Result<PathBuf> {
    if let Some(parent) = base.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut candidate = base.to_path_buf();
    let mut index = 0;
    loop {
        match fs::create_dir(&candidate) {
            Ok(()) => return Ok(candidate),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                index += 1;
                let mut name = base.file_name().unwrap_or_default().to_os_string();
                name.push(format!("-{index}"));
                candidate = base.with_file_name(name);
            }
            Err(e) => return Err(io_err(&candidate)(e)),
        }
    }
}

fn cache_dir() -> PathBuf {
    std::env::var_os(CACHE_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("ratefair-cache"))
}

#[derive(Serialize, Deserialize)]
struct CachedPair {
    train_hash: String,
    test_hash: String,
    train: Dataset,
    test: Dataset,
}

/// Synthetic splits, reused from the cache when an entry for the same spec
/// exists and its content hashes check out.
fn synthetic_cached(spec: &crate::data::BiasSpec) -> Result<(Dataset, Dataset)> {
    let key = hex::encode(Sha256::digest(serde_json::to_vec(spec).expect("spec serializes")));
    let dir = cache_dir();
    let path = dir.join(format!("synthetic-{key}.json"));
    if let Ok(bytes) = fs::read(&path) {
        if let Ok(c) = serde_json::from_slice::<CachedPair>(&bytes) {
            if c.train.content_hash() == c.train_hash && c.test.content_hash() == c.test_hash {
                return Ok((c.train, c.test));
            }
        }
    }
    let (train, test) = generate_synthetic(spec)?;
    if fs::create_dir_all(&dir).is_ok() {
        let entry = CachedPair {
            train_hash: train.content_hash(),
            test_hash: test.content_hash(),
            train,
            test,
        };
        let tmp = dir.join(format!("synthetic-{key}.{}.tmp", std::process::id()));
        if fs::write(&tmp, serde_json::to_vec(&entry).expect("dataset serializes")).is_ok() {
            let _ = fs::rename(&tmp, &path);
        }
        return Ok((entry.train, entry.test));
    }
    Ok((train, test))
}

/// Keeps the first `n` samples of each class, in file order.
fn first_per_class(labels: &[usize], n: usize) -> Vec<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    (0..labels.len())
        .filter(|&i| {
            let c = counts.entry(labels[i]).or_default();
            *c += 1;
            *c <= n
        })
        .collect()
}

fn load_idx_split(cfg: &ExperimentConfig, images: &Path, labels: &Path, split: Split, spec: &crate::config::IdxSpec) -> Result<Dataset> {
    let images_path = cfg.input_path(images);
    let labels_path = cfg.input_path(labels);
    let mut img = read_idx(&images_path)?;
    let lab = read_idx(&labels_path)?;
    let mut y: Vec<usize> = lab.to_f64().into_iter().map(|v| v as usize).collect();
    if let Some(n) = spec.samples_per_class {
        let keep = first_per_class(&y, n);
        let per = img.dims[1..].iter().product::<usize>() * img.dtype.width();
        img.payload = keep.iter().flat_map(|&i| img.payload[i * per..(i + 1) * per].to_vec()).collect();
        img.dims[0] = keep.len();
        y = keep.iter().map(|&i| y[i]).collect();
    }
    let seed = match split {
        Split::Train => spec.seed,
        Split::Test => spec.seed.wrapping_add(1),
    };
    let mut ds = colorize(
        &img,
        &y,
        &ColorizeSpec {
            correlation: spec.correlation,
            threshold: spec.threshold,
            split,
            seed,
        },
    )?;
    ds.num_classes = 10.max(ds.num_classes);
    ds.class_group = Some((0..ds.num_classes).map(|c| c % 10).collect());
    ds.provenance.insert("images_sha256".into(), crate::data::file_hash(&images_path)?);
    ds.provenance.insert("labels_sha256".into(), crate::data::file_hash(&labels_path)?);
    Ok(ds)
}

/// Loads the train and test splits described by the config.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.dataset {
        DatasetSpec::Synthetic(spec) => synthetic_cached(spec),
        DatasetSpec::Idx(spec) => {
            let train = load_idx_split(cfg, &spec.train_images, &spec.train_labels, Split::Train, spec)?;
            let mut test = load_idx_split(cfg, &spec.test_images, &spec.test_labels, Split::Test, spec)?;
            test.num_classes = train.num_classes.max(test.num_classes);
            Ok((train, test))
        }
        DatasetSpec::Csv(spec) => {
            let mut vocab = LabelVocab::default();
            let mut train = read_csv_with_vocab(&cfg.input_path(&spec.train), &spec.y_col, &spec.g_col, &mut vocab, Split::Train)?;
            let mut test = read_csv_with_vocab(&cfg.input_path(&spec.test), &spec.y_col, &spec.g_col, &mut vocab, Split::Test)?;
            for ds in [&mut train, &mut test] {
                ds.num_classes = vocab.classes.len();
                ds.num_groups = vocab.groups.len();
                ds.provenance.insert("classes".into(), vocab.classes.join(","));
                ds.provenance.insert("groups".into(), vocab.groups.join(","));
            }
            Ok((train, test))
        }
    }
}

pub fn build_plan(cfg: &ExperimentConfig, train: &Dataset) -> Result<StagePlan> {
    let sizes = train.class_sizes();
    let plan = match cfg.mode {
        Mode::Joint => StagePlan::new(vec![(0..train.num_classes).collect()], train.num_classes)?,
        Mode::Incremental => StagePlan::build(cfg.plan.order, &sizes, cfg.plan.classes_per_stage, cfg.seed)?,
    };
    Ok(plan)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub version: String,
    pub seed: u64,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub train_hash: String,
    pub test_hash: String,
    pub train_provenance: BTreeMap<String, String>,
    pub test_provenance: BTreeMap<String, String>,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub report: ExperimentReport,
}

fn telemetry_jsonl(records: &[TelemetryRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// One row per (stage, metric).
pub fn metrics_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("stage,metric,value\n");
    for s in &report.stages {
        let m = &s.metrics;
        for (name, v) in [
            ("accuracy", m.accuracy),
            ("dp", m.dp),
            ("gap_rms", m.gap_rms),
            ("leakage", m.leakage.accuracy),
            ("rate_test", m.rate_test),
        ] {
            out.push_str(&format!("{},{name},{v}\n", s.stage));
        }
    }
    out
}

/// Validates, trains and writes a complete run directory under
/// `cfg.output_dir` (suffixed if it already exists).
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let started = unix_now();
    let (train, test) = load_datasets(cfg)?;
    let plan = build_plan(cfg, &train)?;
    let result = run_experiment(&train, &test, &plan, &cfg.model)?;

    let dir = fresh_dir(&cfg.output_dir)?;
    write_json(&dir.join("config.json"), cfg)?;
    write_file(&dir.join("config.toml"), cfg.to_toml_string().as_bytes())?;
    write_json(&dir.join("report.json"), &result.report)?;
    write_file(&dir.join("metrics.csv"), metrics_csv(&result.report).as_bytes())?;
    let ckpt = dir.join("checkpoints");
    fs::create_dir_all(&ckpt).map_err(io_err(&ckpt))?;
    for (t, stage) in result.report.stages.iter().enumerate() {
        let sdir = dir.join(format!("stage_{t}"));
        fs::create_dir_all(&sdir).map_err(io_err(&sdir))?;
        write_json(&sdir.join("report.json"), stage)?;
        write_file(&sdir.join("telemetry.jsonl"), telemetry_jsonl(&result.telemetry[t]).as_bytes())?;
        let (phi, disc) = &result.snapshots[t];
        phi.save_checkpoint(&ckpt.join(format!("encoder_stage_{t}.json")))
            .map_err(TrainError::from)?;
        disc.save_checkpoint(&ckpt.join(format!("discriminator_stage_{t}.json")))
            .map_err(TrainError::from)?;
    }
    let meta = RunMeta {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        started_unix: started,
        finished_unix: unix_now(),
        train_hash: train.content_hash(),
        test_hash: test.content_hash(),
        train_provenance: train.provenance.clone(),
        test_provenance: test.provenance.clone(),
    };
    write_json(&dir.join("meta.json"), &meta)?;
    Ok(RunOutcome {
        run_dir: dir,
        report: result.report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: usize,
    pub overrides: Vec<(String, String)>,
    pub run_dir: Option<PathBuf>,
    pub error: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub root: PathBuf,
    pub cells: Vec<CellResult>,
}

impl AblationSummary {
    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| c.error.is_some()).count()
    }
}

fn cell_label(overrides: &[(String, String)]) -> String {
    if overrides.is_empty() {
        return "base".into();
    }
    overrides
        .iter()
        .map(|(k, v)| {
            let key = k.rsplit('.').next().unwrap_or(k);
            format!("{key}={v}")
        })
        .collect::<Vec<_>>()
        .join("_")
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "=._-".contains(c) { c } else { '-' })
        .collect()
}

/// Runs every cell of the override grid in its own subdirectory and writes
/// `comparison.csv` and `summary.json`. A failing cell is recorded and the
/// rest still run. Unknown grid paths fail before anything runs.
pub fn ablate(base: &ExperimentConfig, axes: &[GridAxis]) -> Result<AblationSummary> {
    let value = base.to_value();
    for axis in axes {
        let mut probe = value.clone();
        set_path(&mut probe, &axis.path, parse_literal(&axis.values[0]))?;
    }
    let root = fresh_dir(&base.output_dir)?;
    let mut cells = Vec::new();
    let mut csv_out = csv::Writer::from_writer(Vec::new());
    csv_out
        .write_record([
            "cell",
            "overrides",
            "status",
            "accuracy_last",
            "accuracy_average",
            "dp_last",
            "dp_average",
            "gap_rms_last",
            "gap_rms_average",
            "leakage_last",
            "leakage_average",
            "error",
        ])
        .expect("in-memory csv");
    for (i, overrides) in grid_cells(axes).into_iter().enumerate() {
        let outcome = (|| -> Result<RunOutcome> {
            let mut v = value.clone();
            for (path, raw) in &overrides {
                set_path(&mut v, path, parse_literal(raw))?;
            }
            let mut cfg = ExperimentConfig::from_value(v)?;
            cfg.base_dir = base.base_dir.clone();
            cfg.output_dir = root.join(format!("cell_{i}_{}", cell_label(&overrides)));
            run(&cfg)
        })();
        let desc = overrides.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";");
        let row: Vec<String> = match &outcome {
            Ok(o) => {
                let s = &o.report.summary;
                let mut r = vec![i.to_string(), desc, "ok".into()];
                for m in [s.accuracy, s.dp, s.gap_rms, s.leakage] {
                    r.push(m.last.to_string());
                    r.push(m.average.to_string());
                }
                r.push(String::new());
                r
            }
            Err(e) => {
                let mut r = vec![i.to_string(), desc, "failed".into()];
                r.extend(std::iter::repeat_n(String::new(), 8));
                r.push(e.to_string());
                r
            }
        };
        csv_out.write_record(&row).expect("in-memory csv");
        cells.push(CellResult {
            cell: i,
            overrides,
            run_dir: outcome.as_ref().ok().map(|o| o.run_dir.clone()),
            error: outcome.as_ref().err().map(ExperimentError::to_json),
        });
    }
    let bytes = csv_out.into_inner().expect("in-memory csv");
    write_file(&root.join("comparison.csv"), &bytes)?;
    let summary = AblationSummary { root, cells };
    write_json(&summary.root.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Files written by [`export_plots`].
pub const PLOT_FILES: [&str; 5] = ["rz.csv", "accuracy.csv", "gap_rms.csv", "dp.csv", "leakage.csv"];

/// Writes plot-ready CSV series under `run_dir/plots` and returns their paths.
pub fn export_plots(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let report_path = run_dir.join("report.json");
    let report_text = fs::read_to_string(&report_path).map_err(|_| ExperimentError::MissingTelemetry(run_dir.display().to_string()))?;
    let report: ExperimentReport = serde_json::from_str(&report_text).map_err(|e| ExperimentError::Malformed {
        path: report_path.display().to_string(),
        message: e.to_string(),
    })?;
    let mut records = Vec::new();
    for t in 0..report.stages.len() {
        let path = run_dir.join(format!("stage_{t}")).join("telemetry.jsonl");
        let text = fs::read_to_string(&path).map_err(|_| ExperimentError::MissingTelemetry(path.display().to_string()))?;
        for (line_no, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let r: TelemetryRecord = serde_json::from_str(line).map_err(|e| ExperimentError::Malformed {
                path: format!("{}:{}", path.display(), line_no + 1),
                message: e.to_string(),
            })?;
            records.push(r);
        }
    }
    if report.stages.is_empty() {
        return Err(ExperimentError::MissingTelemetry(run_dir.display().to_string()));
    }
    let out = run_dir.join("plots");
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let mut written = Vec::new();
    let mut emit = |name: &str, header: &str, rows: Vec<String>| -> Result<()> {
        let path = out.join(name);
        let mut f = fs::File::create(&path).map_err(io_err(&path))?;
        writeln!(f, "{header}").map_err(io_err(&path))?;
        for row in rows {
            writeln!(f, "{row}").map_err(io_err(&path))?;
        }
        written.push(path);
        Ok(())
    };
    emit(
        PLOT_FILES[0],
        "iter,stage,R_z,R_z_old",
        records.iter().map(|r| format!("{},{},{},{}", r.iter, r.stage, r.r_z, r.r_z_old)).collect(),
    )?;
    let per_stage = |f: fn(&crate::incremental::StageReport) -> f64| -> Vec<String> {
        report.stages.iter().map(|s| format!("{},{}", s.stage, f(s))).collect()
    };
    emit(PLOT_FILES[1], "stage,accuracy", per_stage(|s| s.metrics.accuracy))?;
    emit(PLOT_FILES[2], "stage,gap_rms", per_stage(|s| s.metrics.gap_rms))?;
    emit(PLOT_FILES[3], "stage,dp", per_stage(|s| s.metrics.dp))?;
    emit(PLOT_FILES[4], "stage,leakage", per_stage(|s| s.metrics.leakage.accuracy))?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_dir_appends_index() {
        let tmp = tempfile::tempdir().unwrap();
        let base = tmp.path().join("run");
        assert_eq!(fresh_dir(&base).unwrap(), base);
        assert_eq!(fresh_dir(&base).unwrap(), tmp.path().join("run-1"));
        assert_eq!(fresh_dir(&base).unwrap(), tmp.path().join("run-2"));
    }

    #[test]
    fn labels_are_path_safe() {
        let o = vec![("model.beta".to_string(), "0.5".to_string()), ("seed".to_string(), "a/b".to_string())];
        assert_eq!(cell_label(&o), "beta=0.5_seed=a-b");
        assert_eq!(cell_label(&[]), "base");
    }

    #[test]
    fn per_class_subsample() {
        assert_eq!(first_per_class(&[0, 1, 0, 0, 1, 2], 2), vec![0, 1, 2, 4, 5]);
    }
}
