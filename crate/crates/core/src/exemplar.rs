//! Exemplar selection: uniform random, eigenvector prototypes, and greedy
//! facility location.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{sym_eig, LinalgError, Matrix};

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("class has no samples")]
    EmptyClass,
    #[error("subset is empty")]
    EmptySubset,
    #[error("index {0} out of range")]
    IndexOutOfRange(usize),
    #[error("all representations are identical; {k_eigen} eigenvectors are not identifiable")]
    DegenerateClass { k_eigen: usize },
    #[error("invalid sampler: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, SelectError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Random,
    Prototype,
    Submodular,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSpec {
    pub kind: SamplerKind,
    /// Eigenvectors used by the prototype sampler.
    #[serde(default = "default_k_eigen")]
    pub k_eigen: usize,
    /// Center the class representations before the prototype eigendecomposition.
    #[serde(default)]
    pub centered: bool,
}

fn default_k_eigen() -> usize {
    4
}

impl Default for SamplerSpec {
    fn default() -> Self {
        SamplerSpec {
            kind: SamplerKind::Random,
            k_eigen: default_k_eigen(),
            centered: false,
        }
    }
}

impl SamplerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kind == SamplerKind::Prototype && self.k_eigen == 0 {
            return Err(SelectError::InvalidSpec("k_eigen must be at least 1".into()));
        }
        Ok(())
    }
}

/// Indices chosen for one class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub indices: Vec<usize>,
    /// Set when the prototype sampler hit a degenerate class and random
    /// selection was used instead.
    pub fell_back_to_random: bool,
}

/// Selects `min(r, n)` distinct exemplars from a `d×n` class batch.
pub fn select(spec: &SamplerSpec, class_reps: &Matrix, r: usize, seed: u64) -> Result<Selection> {
    spec.validate()?;
    let n = class_reps.cols();
    let indices = match spec.kind {
        SamplerKind::Random => sample_random(n, r, seed)?,
        SamplerKind::Submodular => sample_submodular(class_reps, r)?,
        SamplerKind::Prototype => match sample_prototype_with(class_reps, r, spec.k_eigen, spec.centered) {
            Ok(idx) => idx,
            Err(SelectError::DegenerateClass { .. }) => {
                return Ok(Selection {
                    indices: sample_random(n, r, seed)?,
                    fell_back_to_random: true,
                })
            }
            Err(e) => return Err(e),
        },
    };
    Ok(Selection {
        indices,
        fell_back_to_random: false,
    })
}

/// Uniform sample of `min(r, n)` distinct indices, returned ascending.
pub fn sample_random(n: usize, r: usize, seed: u64) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(SelectError::EmptyClass);
    }
    if r >= n {
        return Ok((0..n).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, r).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Prototype sampling on the uncentered second moment `ZZᵀ/n`.
pub fn sample_prototype(class_reps: &Matrix, r: usize, k_eigen: usize) -> Result<Vec<usize>> {
    sample_prototype_with(class_reps, r, k_eigen, false)
}

/// Top-`k` eigenvectors of the class second moment (or covariance when
/// `centered`), each claiming its `q = r/k` highest-scoring samples. Leading
/// eigenvectors take the `r mod k` remainder slots; a sample already claimed
/// is skipped and the next-ranked one fills the slot. Each eigenvector is
/// oriented so that its scores sum to a non-negative value.
pub fn sample_prototype_with(class_reps: &Matrix, r: usize, k_eigen: usize, centered: bool) -> Result<Vec<usize>> {
    let (d, n) = class_reps.shape();
    if n == 0 {
        return Err(SelectError::EmptyClass);
    }
    if k_eigen == 0 {
        return Err(SelectError::InvalidSpec("k_eigen must be at least 1".into()));
    }
    if r >= n {
        return Ok((0..n).collect());
    }
    if r == 0 {
        return Ok(Vec::new());
    }
    if k_eigen > 1 {
        let first = class_reps.column(0);
        let identical = (1..n).all(|c| {
            class_reps
                .column(c)
                .iter()
                .zip(&first)
                .all(|(a, b)| (a - b).abs() <= 1e-12)
        });
        if identical {
            return Err(SelectError::DegenerateClass { k_eigen });
        }
    }

    let basis = if centered {
        let mean: Vec<f64> = (0..d).map(|i| class_reps.row(i).iter().sum::<f64>() / n as f64).collect();
        Matrix::from_fn(d, n, |i, j| class_reps[(i, j)] - mean[i])
    } else {
        class_reps.clone()
    };
    let second_moment = basis.gram_rows().scale(1.0 / n as f64);
    let eig = sym_eig(&second_moment)?;

    let k = k_eigen.min(d).min(r);
    let base = r / k;
    let extra = r % k;
    let mut taken = vec![false; n];
    let mut chosen = Vec::with_capacity(r);
    for i in 0..k {
        let v = eig.vectors.column(i);
        let mut scores: Vec<f64> = (0..n)
            .map(|c| (0..d).map(|row| v[row] * class_reps[(row, c)]).sum())
            .collect();
        if scores.iter().sum::<f64>() < 0.0 {
            scores.iter_mut().for_each(|s| *s = -*s);
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let quota = base + usize::from(i < extra);
        let mut got = 0;
        for idx in order {
            if got == quota {
                break;
            }
            if !taken[idx] {
                taken[idx] = true;
                chosen.push(idx);
                got += 1;
            }
        }
    }
    chosen.sort_unstable();
    Ok(chosen)
}

fn columns_of(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.cols()).map(|c| m.column(c)).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `f(S) = Σ_z max_{s∈S} −‖s − z‖²` over all columns of `all_reps`.
pub fn facility_location_value(all_reps: &Matrix, subset: &[usize]) -> Result<f64> {
    if subset.is_empty() {
        return Err(SelectError::EmptySubset);
    }
    let n = all_reps.cols();
    if let Some(&bad) = subset.iter().find(|&&s| s >= n) {
        return Err(SelectError::IndexOutOfRange(bad));
    }
    let cols = columns_of(all_reps);
    Ok(cols
        .iter()
        .map(|z| {
            subset
                .iter()
                .map(|&s| -sq_dist(&cols[s], z))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum())
}

/// Facility location with similarity `C − ‖s − z‖²`, where
/// `C = 4 max‖z‖²` bounds every squared distance. It is non-negative,
/// monotone and submodular with value 0 on the empty set, and differs from
/// [`facility_location_value`] by the constant `nC` on every non-empty set.
#[derive(Debug, Clone)]
pub struct FacilityLocation {
    points: Vec<Vec<f64>>,
    offset: f64,
}

impl FacilityLocation {
    pub fn new(reps: &Matrix) -> Self {
        let points = columns_of(reps);
        let max_sq = points
            .iter()
            .map(|p| p.iter().map(|v| v * v).sum::<f64>())
            .fold(0.0, f64::max);
        FacilityLocation {
            points,
            offset: 4.0 * max_sq,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    fn similarity(&self, s: usize, z: usize) -> f64 {
        self.offset - sq_dist(&self.points[s], &self.points[z])
    }

    /// Normalized value; `0` for the empty set.
    pub fn value(&self, subset: &[usize]) -> f64 {
        (0..self.points.len())
            .map(|z| subset.iter().map(|&s| self.similarity(s, z)).fold(0.0, f64::max))
            .sum()
    }

    /// Marginal gain of adding `s` given the current per-point coverage.
    fn gain(&self, s: usize, cover: &[f64]) -> f64 {
        cover
            .iter()
            .enumerate()
            .map(|(z, &c)| (self.similarity(s, z) - c).max(0.0))
            .sum()
    }
}

#[derive(Debug, PartialEq)]
struct Candidate {
    gain: f64,
    index: usize,
    /// Selection size at which `gain` was computed.
    round: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.gain
            .total_cmp(&other.gain)
            .then_with(|| other.index.cmp(&self.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Lazy greedy maximization of the facility-location objective. Ties go to
/// the lowest index, so the output equals plain greedy.
pub fn sample_submodular(class_reps: &Matrix, r: usize) -> Result<Vec<usize>> {
    let n = class_reps.cols();
    if n == 0 {
        return Err(SelectError::EmptyClass);
    }
    if r >= n {
        return Ok((0..n).collect());
    }
    let f = FacilityLocation::new(class_reps);
    let mut cover = vec![0.0; n];
    let mut heap: BinaryHeap<Candidate> = (0..n)
        .map(|s| Candidate {
            gain: f.gain(s, &cover),
            index: s,
            round: 0,
        })
        .collect();
    let mut chosen = Vec::with_capacity(r);
    while chosen.len() < r {
        let top = heap.pop().expect("candidates remain while fewer than n are chosen");
        if top.round == chosen.len() {
            for (z, c) in cover.iter_mut().enumerate() {
                *c = c.max(f.similarity(top.index, z));
            }
            chosen.push(top.index);
        } else {
            heap.push(Candidate {
                gain: f.gain(top.index, &cover),
                index: top.index,
                round: chosen.len(),
            });
        }
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// Plain greedy without lazy evaluation, same tie-breaking.
pub fn sample_submodular_naive(class_reps: &Matrix, r: usize) -> Result<Vec<usize>> {
    let n = class_reps.cols();
    if n == 0 {
        return Err(SelectError::EmptyClass);
    }
    if r >= n {
        return Ok((0..n).collect());
    }
    let f = FacilityLocation::new(class_reps);
    let mut cover = vec![0.0; n];
    let mut taken = vec![false; n];
    let mut chosen = Vec::with_capacity(r);
    for _ in 0..r {
        let mut best: Option<(f64, usize)> = None;
        for s in (0..n).filter(|&s| !taken[s]) {
            let g = f.gain(s, &cover);
            if best.is_none_or(|(bg, _)| g > bg) {
                best = Some((g, s));
            }
        }
        let (_, s) = best.unwrap();
        taken[s] = true;
        for (z, c) in cover.iter_mut().enumerate() {
            *c = c.max(f.similarity(s, z));
        }
        chosen.push(s);
    }
    chosen.sort_unstable();
    Ok(chosen)
}
