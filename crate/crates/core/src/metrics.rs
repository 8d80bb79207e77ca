//! Group fairness metrics and probing.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::nn::{argmax_columns, softmax_cross_entropy, Activation, AdamConfig, Network, NnError};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("prediction log is empty")]
    EmptyLog,
    #[error("label {label} outside the universe of {universe} {what}")]
    LabelOutOfRange {
        what: &'static str,
        label: usize,
        universe: usize,
    },
    #[error("column lengths differ: {0}")]
    LengthMismatch(String),
    #[error("protected group {0} has no samples")]
    MissingGroup(usize),
    #[error("true positive rate of class {class} is undefined for group {group}")]
    UndefinedTpr { class: usize, group: usize },
    #[error("probing needs at least two protected groups")]
    SingleGroup,
    #[error("no values to aggregate")]
    Empty,
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// Per-sample `(true_y, pred_y, g)` with binary `g ∈ {0, 1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionLog {
    true_y: Vec<usize>,
    pred_y: Vec<usize>,
    group: Vec<usize>,
    num_classes: usize,
}

impl PredictionLog {
    pub fn new(true_y: Vec<usize>, pred_y: Vec<usize>, group: Vec<usize>, num_classes: usize) -> Result<Self> {
        if true_y.len() != pred_y.len() || true_y.len() != group.len() {
            return Err(MetricError::LengthMismatch(format!(
                "{} true, {} predicted, {} groups",
                true_y.len(),
                pred_y.len(),
                group.len()
            )));
        }
        if true_y.is_empty() {
            return Err(MetricError::EmptyLog);
        }
        for (what, values, universe) in [
            ("classes", &true_y, num_classes),
            ("classes", &pred_y, num_classes),
            ("groups", &group, 2),
        ] {
            if let Some(&label) = values.iter().find(|&&v| v >= universe) {
                return Err(MetricError::LabelOutOfRange { what, label, universe });
            }
        }
        Ok(PredictionLog {
            true_y,
            pred_y,
            group,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.true_y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.true_y.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn accuracy(&self) -> f64 {
        let hits = self.true_y.iter().zip(&self.pred_y).filter(|(a, b)| a == b).count();
        hits as f64 / self.len() as f64
    }

    /// Same log with the two protected groups exchanged.
    pub fn swap_groups(&self) -> PredictionLog {
        PredictionLog {
            group: self.group.iter().map(|g| 1 - g).collect(),
            ..self.clone()
        }
    }

    /// Applies a permutation to both true and predicted class ids.
    pub fn relabel_classes(&self, perm: &[usize]) -> PredictionLog {
        PredictionLog {
            true_y: self.true_y.iter().map(|&y| perm[y]).collect(),
            pred_y: self.pred_y.iter().map(|&y| perm[y]).collect(),
            ..self.clone()
        }
    }

    fn tpr(&self, class: usize, group: usize) -> Option<f64> {
        let mut total = 0usize;
        let mut hits = 0usize;
        for i in 0..self.len() {
            if self.true_y[i] == class && self.group[i] == group {
                total += 1;
                hits += usize::from(self.pred_y[i] == class);
            }
        }
        (total > 0).then(|| hits as f64 / total as f64)
    }
}

/// `TPR(g, y) − TPR(ḡ, y)` for the ordered group pair `(g, ḡ)`.
pub fn tpr_gap(log: &PredictionLog, class: usize, groups: (usize, usize)) -> Result<f64> {
    let (g, gbar) = groups;
    let a = log.tpr(class, g).ok_or(MetricError::UndefinedTpr { class, group: g })?;
    let b = log.tpr(class, gbar).ok_or(MetricError::UndefinedTpr { class, group: gbar })?;
    Ok(a - b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapSummary {
    pub gap_rms: f64,
    /// `Gap(1, 0)` per class of the universe; 0 where undefined.
    pub per_class: Vec<f64>,
    /// Classes whose gap was undefined because a group had no true samples.
    pub undefined_count: usize,
}

impl GapSummary {
    pub fn recompute_rms(&self) -> f64 {
        rms(&self.per_class)
    }
}

fn rms(values: &[f64]) -> f64 {
    (values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt()
}

/// Root-mean-square TPR gap over the class universe. Undefined gaps count as
/// zero and are tallied in `undefined_count`.
pub fn gap_rms(log: &PredictionLog) -> Result<GapSummary> {
    if log.is_empty() {
        return Err(MetricError::EmptyLog);
    }
    let mut undefined_count = 0;
    let per_class: Vec<f64> = (0..log.num_classes)
        .map(|y| match tpr_gap(log, y, (1, 0)) {
            Ok(v) => v,
            Err(_) => {
                undefined_count += 1;
                0.0
            }
        })
        .collect();
    Ok(GapSummary {
        gap_rms: rms(&per_class),
        per_class,
        undefined_count,
    })
}

/// `Σ_y |p(ŷ = y | g) − p(ŷ = y | ḡ)|`.
pub fn demographic_parity(log: &PredictionLog) -> Result<f64> {
    let mut counts = [vec![0usize; log.num_classes], vec![0usize; log.num_classes]];
    let mut sizes = [0usize; 2];
    for (&p, &g) in log.pred_y.iter().zip(&log.group) {
        counts[g][p] += 1;
        sizes[g] += 1;
    }
    for (g, &s) in sizes.iter().enumerate() {
        if s == 0 {
            return Err(MetricError::MissingGroup(g));
        }
    }
    Ok((0..log.num_classes)
        .map(|y| (counts[0][y] as f64 / sizes[0] as f64 - counts[1][y] as f64 / sizes[1] as f64).abs())
        .sum())
}

/// `(last, mean)` of a per-stage series.
pub fn last_and_average(values: &[f64]) -> Result<(f64, f64)> {
    let last = *values.last().ok_or(MetricError::Empty)?;
    Ok((last, values.iter().sum::<f64>() / values.len() as f64))
}

/// Budget of the probing classifier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "default_probe_hidden")]
    pub hidden: usize,
    #[serde(default = "default_probe_epochs")]
    pub epochs: usize,
    #[serde(default = "default_probe_lr")]
    pub lr: f64,
    /// Fraction of samples used to fit the leakage probe.
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
}

fn default_probe_hidden() -> usize {
    32
}

fn default_probe_epochs() -> usize {
    200
}

fn default_probe_lr() -> f64 {
    1e-2
}

fn default_train_fraction() -> f64 {
    0.8
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: default_probe_hidden(),
            epochs: default_probe_epochs(),
            lr: default_probe_lr(),
            train_fraction: default_train_fraction(),
        }
    }
}

/// A trained two-layer classifier on frozen features.
#[derive(Debug, Clone)]
pub struct Probe {
    net: Network,
}

impl Probe {
    /// Full-batch Adam on softmax cross-entropy.
    pub fn fit(features: &Matrix, labels: &[usize], num_classes: usize, cfg: &ProbeConfig, seed: u64) -> Result<Self> {
        if labels.len() != features.cols() {
            return Err(MetricError::LengthMismatch(format!(
                "{} labels for {} samples",
                labels.len(),
                features.cols()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(MetricError::LabelOutOfRange {
                what: "classes",
                label,
                universe: num_classes,
            });
        }
        let mut net = Network::mlp(&[features.rows(), cfg.hidden, num_classes.max(1)], Activation::Relu, seed)?;
        let adam = AdamConfig::with_lr(cfg.lr);
        for _ in 0..cfg.epochs {
            let (logits, trace) = net.forward(features)?;
            let (_, grad) = softmax_cross_entropy(&logits, labels);
            let (grads, _) = net.backward(&trace, &grad)?;
            net.adam_step(&grads, &adam)?;
        }
        Ok(Probe { net })
    }

    pub fn predict(&self, features: &Matrix) -> Result<Vec<usize>> {
        Ok(argmax_columns(&self.net.infer(features)?))
    }

    pub fn accuracy(&self, features: &Matrix, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(features)?;
        Ok(pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    /// Held-out accuracy of the protected-attribute probe.
    pub accuracy: f64,
    /// Held-out accuracy of always predicting the most frequent training group.
    pub majority_baseline: f64,
    pub train_size: usize,
    pub test_size: usize,
}

/// Trains a probe for the protected attribute on a seeded split of `reps`
/// (`d×n`) and reports its held-out accuracy.
pub fn probe_leakage(reps: &Matrix, groups: &[usize], num_groups: usize, split_seed: u64, cfg: &ProbeConfig) -> Result<LeakageReport> {
    let n = reps.cols();
    if groups.len() != n {
        return Err(MetricError::LengthMismatch(format!("{} groups for {n} samples", groups.len())));
    }
    let mut present = groups.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(MetricError::SingleGroup);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(split_seed));
    let n_train = ((n as f64 * cfg.train_fraction).round() as usize).clamp(1, n - 1);
    let (train_idx, test_idx) = order.split_at(n_train);

    let train_y: Vec<usize> = train_idx.iter().map(|&i| groups[i]).collect();
    let test_y: Vec<usize> = test_idx.iter().map(|&i| groups[i]).collect();
    let probe = Probe::fit(&reps.select_columns(train_idx), &train_y, num_groups, cfg, split_seed ^ 0x9e37_79b9)?;
    let accuracy = probe.accuracy(&reps.select_columns(test_idx), &test_y)?;

    let mut freq = vec![0usize; num_groups];
    for &g in &train_y {
        freq[g] += 1;
    }
    let majority = (0..num_groups).max_by(|&a, &b| freq[a].cmp(&freq[b]).then(b.cmp(&a))).unwrap();
    let majority_baseline = test_y.iter().filter(|&&g| g == majority).count() as f64 / test_y.len() as f64;
    Ok(LeakageReport {
        accuracy,
        majority_baseline,
        train_size: train_idx.len(),
        test_size: test_idx.len(),
    })
}
