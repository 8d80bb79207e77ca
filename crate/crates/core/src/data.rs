//! Datasets: a synthetic biased-feature generator, the IDX binary format with
//! background colorization, and labeled CSV ingestion.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::linalg::Matrix;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid bias spec: {0}")]
    InvalidSpec(String),
    #[error("bad IDX magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("IDX file truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("IDX file has {0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("unsupported IDX dtype 0x{0:02x}")]
    UnsupportedDtype(u8),
    #[error("parse error at row {row}, column {column:?}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },
    #[error("missing column {0:?}")]
    MissingColumn(String),
    #[error("empty dataset")]
    Empty,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Labeled samples with features stored one sample per column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: Matrix,
    pub y: Vec<usize>,
    pub g: Vec<usize>,
    pub num_classes: usize,
    pub num_groups: usize,
    pub split: Split,
    /// Protected group each target class is biased toward, when the data
    /// was generated with a class-to-group assignment.
    pub class_group: Option<Vec<usize>>,
    pub provenance: BTreeMap<String, String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.rows()
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_classes];
        for &y in &self.y {
            sizes[y] += 1;
        }
        sizes
    }

    /// Indices of samples whose class is in `classes`, ascending.
    pub fn indices_of_classes(&self, classes: &[usize]) -> Vec<usize> {
        (0..self.len()).filter(|&i| classes.contains(&self.y[i])).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_columns(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            g: idx.iter().map(|&i| self.g[i]).collect(),
            num_classes: self.num_classes,
            num_groups: self.num_groups,
            split: self.split,
            class_group: self.class_group.clone(),
            provenance: self.provenance.clone(),
        }
    }

    /// Binary protected attribute used by the group fairness metrics. With a
    /// class-to-group assignment, 1 marks bias-aligned samples (`g` equals the
    /// class's assigned group) and 0 bias-conflicting ones. Otherwise a binary
    /// `g` is used as is, and a wider `g` is split as group 0 versus the rest.
    pub fn binary_groups(&self) -> Vec<usize> {
        match &self.class_group {
            Some(assign) => self
                .y
                .iter()
                .zip(&self.g)
                .map(|(&y, &g)| usize::from(assign[y] == g))
                .collect(),
            None if self.num_groups <= 2 => self.g.clone(),
            None => self.g.iter().map(|&g| usize::from(g != 0)).collect(),
        }
    }

    /// SHA-256 over features and labels.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.features.rows() as u64).to_le_bytes());
        h.update((self.features.cols() as u64).to_le_bytes());
        for v in self.features.as_slice() {
            h.update(v.to_le_bytes());
        }
        for (&y, &g) in self.y.iter().zip(&self.g) {
            h.update((y as u64).to_le_bytes());
            h.update((g as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Parameters of the synthetic biased dataset: class signal in the first half
/// of the features, protected-group signal in the second half.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasSpec {
    /// Probability a training sample carries its class's assigned group.
    pub correlation: f64,
    pub num_classes: usize,
    /// Protected groups; defaults to one per class.
    #[serde(default)]
    pub num_groups: Option<usize>,
    pub samples_per_class: usize,
    #[serde(default)]
    pub test_samples_per_class: Option<usize>,
    pub feature_dim: usize,
    /// Norm of the class mean vectors.
    #[serde(default = "default_class_separation")]
    pub class_separation: f64,
    /// Norm of the group mean vectors.
    #[serde(default = "default_group_separation")]
    pub group_separation: f64,
    #[serde(default = "default_noise")]
    pub noise: f64,
    pub seed: u64,
}

fn default_class_separation() -> f64 {
    2.0
}

fn default_group_separation() -> f64 {
    4.0
}

fn default_noise() -> f64 {
    1.0
}

impl BiasSpec {
    pub fn groups(&self) -> usize {
        self.num_groups.unwrap_or(self.num_classes)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DataError::InvalidSpec(m.to_string()));
        if !(0.0..=1.0).contains(&self.correlation) {
            return bad("correlation must lie in [0, 1]");
        }
        if self.num_classes < 2 {
            return bad("need at least two classes");
        }
        if self.groups() < 2 {
            return bad("need at least two protected groups");
        }
        if self.samples_per_class == 0 || self.test_samples_per_class == Some(0) {
            return bad("samples per class must be positive");
        }
        if self.feature_dim < 2 || self.feature_dim % 2 != 0 {
            return bad("feature_dim must be even and at least 2");
        }
        if self.noise < 0.0 || self.class_separation < 0.0 || self.group_separation < 0.0 {
            return bad("scales must be non-negative");
        }
        Ok(())
    }
}

/// Draws `g` for a sample of class `y`: the assigned group with probability
/// `p`, otherwise one of the other groups uniformly.
fn biased_group(rng: &mut impl Rng, assigned: usize, groups: usize, p: f64) -> usize {
    if rng.gen::<f64>() < p {
        assigned
    } else {
        let other = rng.gen_range(0..groups - 1);
        if other >= assigned {
            other + 1
        } else {
            other
        }
    }
}

fn random_direction(rng: &mut impl Rng, dim: usize, norm: f64) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let len = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x * norm / len).collect()
}

/// Generates the train split (biased with `correlation`) and the test split
/// (group independent of class).
pub fn generate_synthetic(spec: &BiasSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let half = spec.feature_dim / 2;
    let groups = spec.groups();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let class_means: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| random_direction(&mut rng, half, spec.class_separation))
        .collect();
    let group_means: Vec<Vec<f64>> = (0..groups)
        .map(|_| random_direction(&mut rng, half, spec.group_separation))
        .collect();
    let assign: Vec<usize> = (0..spec.num_classes).map(|y| y % groups).collect();

    let mut provenance = BTreeMap::new();
    provenance.insert("generator".to_string(), "synthetic".to_string());
    provenance.insert(
        "spec".to_string(),
        serde_json::to_string(spec).expect("spec serializes"),
    );

    let make = |split: Split, per_class: usize, rng: &mut ChaCha8Rng| {
        let n = per_class * spec.num_classes;
        let mut features = Matrix::zeros(spec.feature_dim, n);
        let mut y = Vec::with_capacity(n);
        let mut g = Vec::with_capacity(n);
        let mut col = 0;
        for class in 0..spec.num_classes {
            for _ in 0..per_class {
                let group = match split {
                    Split::Train => biased_group(rng, assign[class], groups, spec.correlation),
                    Split::Test => rng.gen_range(0..groups),
                };
                for i in 0..half {
                    let e: f64 = rng.sample(StandardNormal);
                    features[(i, col)] = class_means[class][i] + spec.noise * e;
                }
                for i in 0..half {
                    let e: f64 = rng.sample(StandardNormal);
                    features[(half + i, col)] = group_means[group][i] + spec.noise * e;
                }
                y.push(class);
                g.push(group);
                col += 1;
            }
        }
        let mut prov = provenance.clone();
        prov.insert("split".into(), format!("{split:?}").to_lowercase());
        Dataset {
            features,
            y,
            g,
            num_classes: spec.num_classes,
            num_groups: groups,
            split,
            class_group: Some(assign.clone()),
            provenance: prov,
        }
    };
    let train = make(Split::Train, spec.samples_per_class, &mut rng);
    let test = make(
        Split::Test,
        spec.test_samples_per_class.unwrap_or(spec.samples_per_class),
        &mut rng,
    );
    Ok((train, test))
}

/// Element type byte of an IDX header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IdxDtype {
    U8,
    I8,
    I16,
    I32,
    F32,
    F64,
}

impl IdxDtype {
    pub fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0x08 => IdxDtype::U8,
            0x09 => IdxDtype::I8,
            0x0B => IdxDtype::I16,
            0x0C => IdxDtype::I32,
            0x0D => IdxDtype::F32,
            0x0E => IdxDtype::F64,
            other => return Err(DataError::UnsupportedDtype(other)),
        })
    }

    pub fn code(self) -> u8 {
        match self {
            IdxDtype::U8 => 0x08,
            IdxDtype::I8 => 0x09,
            IdxDtype::I16 => 0x0B,
            IdxDtype::I32 => 0x0C,
            IdxDtype::F32 => 0x0D,
            IdxDtype::F64 => 0x0E,
        }
    }

    pub fn width(self) -> usize {
        match self {
            IdxDtype::U8 | IdxDtype::I8 => 1,
            IdxDtype::I16 => 2,
            IdxDtype::I32 | IdxDtype::F32 => 4,
            IdxDtype::F64 => 8,
        }
    }
}

/// A parsed IDX tensor. `payload` holds the raw big-endian element bytes in
/// row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxTensor {
    pub dtype: IdxDtype,
    pub dims: Vec<usize>,
    pub payload: Vec<u8>,
}

impl IdxTensor {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Element `i` decoded to `f64`.
    pub fn get(&self, i: usize) -> f64 {
        let w = self.dtype.width();
        let b = &self.payload[i * w..(i + 1) * w];
        match self.dtype {
            IdxDtype::U8 => b[0] as f64,
            IdxDtype::I8 => b[0] as i8 as f64,
            IdxDtype::I16 => i16::from_be_bytes([b[0], b[1]]) as f64,
            IdxDtype::I32 => i32::from_be_bytes([b[0], b[1], b[2], b[3]]) as f64,
            IdxDtype::F32 => f32::from_be_bytes([b[0], b[1], b[2], b[3]]) as f64,
            IdxDtype::F64 => f64::from_be_bytes(b.try_into().unwrap()),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![0, 0, self.dtype.code(), self.dims.len() as u8];
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
        out.extend_from_slice(&self.payload);
        out
    }
}

/// Parses an IDX byte buffer: magic `00 00 <dtype> <ndim>`, `ndim` big-endian
/// `u32` sizes, then the payload.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxTensor> {
    if bytes.len() < 4 {
        return Err(DataError::Truncated {
            expected: 4,
            found: bytes.len(),
        });
    }
    let magic = [bytes[0], bytes[1], bytes[2], bytes[3]];
    if magic[0] != 0 || magic[1] != 0 || magic[3] == 0 {
        return Err(DataError::BadMagic(magic));
    }
    let dtype = IdxDtype::from_code(magic[2])?;
    let ndim = magic[3] as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(DataError::Truncated {
            expected: header,
            found: bytes.len(),
        });
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| {
            let o = 4 + 4 * i;
            u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect();
    let expected = header + dims.iter().product::<usize>() * dtype.width();
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(DataError::TrailingBytes(bytes.len() - expected));
    }
    Ok(IdxTensor {
        dtype,
        dims,
        payload: bytes[header..].to_vec(),
    })
}

pub fn read_idx(path: &Path) -> Result<IdxTensor> {
    parse_idx(&fs::read(path).map_err(io_err(path))?)
}

pub fn write_idx(path: &Path, tensor: &IdxTensor) -> Result<()> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&tensor.to_bytes()).map_err(io_err(path))
}

/// SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path).map_err(io_err(path))?)))
}

/// Background colors, indexed by protected group.
pub const PALETTE: [[f64; 3]; 10] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.60, 0.10],
    [0.10, 0.20, 0.90],
    [0.95, 0.85, 0.10],
    [0.60, 0.10, 0.70],
    [0.10, 0.80, 0.80],
    [0.95, 0.50, 0.05],
    [0.55, 0.35, 0.15],
    [0.98, 0.55, 0.75],
    [0.50, 0.50, 0.50],
];

/// Grayscale intensity below which a pixel counts as background.
pub const DEFAULT_BACKGROUND_THRESHOLD: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorizeSpec {
    pub correlation: f64,
    pub threshold: f64,
    pub split: Split,
    pub seed: u64,
}

/// Colors the background of grayscale images (`n × rows × cols`, `u8`).
/// Digit class `y` is assigned palette color `y mod 10`; in the train split a
/// sample keeps that color with probability `correlation`, otherwise takes
/// one of the other nine, and in the test split colors are uniform. Features
/// are channel-major RGB in `[0, 1]`; foreground pixels keep their gray level
/// in every channel.
pub fn colorize(images: &IdxTensor, labels: &[usize], spec: &ColorizeSpec) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&spec.correlation) {
        return Err(DataError::InvalidSpec("correlation must lie in [0, 1]".into()));
    }
    if images.dims.len() != 3 {
        return Err(DataError::InvalidSpec(format!(
            "expected n×rows×cols images, got dims {:?}",
            images.dims
        )));
    }
    let n = images.dims[0];
    if n == 0 {
        return Err(DataError::Empty);
    }
    if labels.len() != n {
        return Err(DataError::InvalidSpec(format!("{} labels for {n} images", labels.len())));
    }
    let pixels = images.dims[1] * images.dims[2];
    let max = match images.dtype {
        IdxDtype::U8 => 255.0,
        _ => images.to_f64().into_iter().fold(f64::MIN_POSITIVE, f64::max),
    };
    let groups = PALETTE.len();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    let assign: Vec<usize> = (0..num_classes).map(|y| y % groups).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut features = Matrix::zeros(3 * pixels, n);
    let mut g = Vec::with_capacity(n);
    for (s, &y) in labels.iter().enumerate() {
        let color = match spec.split {
            Split::Train => biased_group(&mut rng, assign[y], groups, spec.correlation),
            Split::Test => rng.gen_range(0..groups),
        };
        for p in 0..pixels {
            let v = images.get(s * pixels + p) / max;
            for ch in 0..3 {
                features[(ch * pixels + p, s)] = if v < spec.threshold { PALETTE[color][ch] } else { v };
            }
        }
        g.push(color);
    }
    let mut provenance = BTreeMap::new();
    provenance.insert("generator".into(), "colorized-idx".into());
    provenance.insert("correlation".into(), spec.correlation.to_string());
    Ok(Dataset {
        features,
        y: labels.to_vec(),
        g,
        num_classes,
        num_groups: groups,
        split: spec.split,
        class_group: Some(assign),
        provenance,
    })
}

/// Label vocabularies shared between CSV files, in first-appearance order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelVocab {
    pub classes: Vec<String>,
    pub groups: Vec<String>,
}

fn index_of(vocab: &mut Vec<String>, map: &mut HashMap<String, usize>, key: &str) -> usize {
    *map.entry(key.to_string()).or_insert_with(|| {
        vocab.push(key.to_string());
        vocab.len() - 1
    })
}

/// Reads a headered CSV whose `y_col` and `g_col` hold categorical labels and
/// whose remaining columns are numeric features.
pub fn read_csv_labeled(path: &Path, y_col: &str, g_col: &str) -> Result<Dataset> {
    let mut vocab = LabelVocab::default();
    read_csv_with_vocab(path, y_col, g_col, &mut vocab, Split::Train)
}

/// Like [`read_csv_labeled`], extending `vocab` so several files share label
/// indices.
pub fn read_csv_with_vocab(path: &Path, y_col: &str, g_col: &str, vocab: &mut LabelVocab, split: Split) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| DataError::Parse {
            row: 0,
            column: String::new(),
            message: e.to_string(),
        })?
        .clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let yi = find(y_col)?;
    let gi = find(g_col)?;
    let feature_cols: Vec<usize> = (0..headers.len()).filter(|&c| c != yi && c != gi).collect();
    if feature_cols.is_empty() {
        return Err(DataError::InvalidSpec("no feature columns".into()));
    }

    let mut class_map: HashMap<String, usize> = vocab.classes.iter().cloned().zip(0..).collect();
    let mut group_map: HashMap<String, usize> = vocab.groups.iter().cloned().zip(0..).collect();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut y = Vec::new();
    let mut g = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| DataError::Parse {
            row,
            column: String::new(),
            message: e.to_string(),
        })?;
        let mut col = Vec::with_capacity(feature_cols.len());
        for &c in &feature_cols {
            let raw = record.get(c).unwrap_or("").trim();
            let v: f64 = raw.parse().map_err(|_| DataError::Parse {
                row,
                column: headers[c].to_string(),
                message: format!("not a number: {raw:?}"),
            })?;
            if !v.is_finite() {
                return Err(DataError::Parse {
                    row,
                    column: headers[c].to_string(),
                    message: "non-finite value".into(),
                });
            }
            col.push(v);
        }
        columns.push(col);
        y.push(index_of(&mut vocab.classes, &mut class_map, record.get(yi).unwrap_or("").trim()));
        g.push(index_of(&mut vocab.groups, &mut group_map, record.get(gi).unwrap_or("").trim()));
    }
    if columns.is_empty() {
        return Err(DataError::Empty);
    }
    let features = Matrix::from_columns(&columns).map_err(|e| DataError::InvalidSpec(e.to_string()))?;
    let mut provenance = BTreeMap::new();
    provenance.insert("source".into(), path.display().to_string());
    provenance.insert("sha256".into(), file_hash(path)?);
    Ok(Dataset {
        features,
        y,
        g,
        num_classes: vocab.classes.len().max(1),
        num_groups: vocab.groups.len().max(1),
        split,
        class_group: None,
        provenance,
    })
}
