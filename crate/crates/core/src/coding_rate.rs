//! Coding-rate objectives over sets of representation vectors and their
//! analytic gradients.
//!
//! A batch of `n` representations of dimension `d` is a `d×n` matrix with one
//! sample per column. The coding rate of such a batch is
//!
//! ```text
//! R(Z, ε) = ½ log₂ det(I + α Z Zᵀ),   α = d / (n ε²)
//! ```
//!
//! and is evaluated on whichever Gram side (`d×d` or `n×n`) is smaller; the two
//! agree by Sylvester's determinant identity. Class memberships are hard
//! assignments, so every per-class term gathers its own columns instead of
//! building diagonal membership matrices.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{Cholesky, LinalgError, Matrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RateError {
    #[error("partition has {labels} labels but the batch has {samples} samples")]
    PartitionMismatch { labels: usize, samples: usize },
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("label {label} out of range for {k} classes")]
    LabelOutOfRange { label: usize, k: usize },
    #[error("epsilon_sq must lie in (0, 4], got {0}")]
    BadEpsilon(f64),
    #[error("numerical failure: {0}")]
    Numerical(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, RateError>;

/// Which Gram matrix a rate evaluation factorizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GramSide {
    /// `I_d + α Z Zᵀ`
    Dim,
    /// `I_n + α Zᵀ Z`
    Sample,
}

/// Distortion setting shared by every rate evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateConfig {
    pub epsilon_sq: f64,
}

impl Default for RateConfig {
    fn default() -> Self {
        RateConfig { epsilon_sq: 0.25 }
    }
}

impl RateConfig {
    pub fn new(epsilon_sq: f64) -> Result<Self> {
        let cfg = RateConfig { epsilon_sq };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon_sq > 0.0 && self.epsilon_sq <= 4.0 {
            Ok(())
        } else {
            Err(RateError::BadEpsilon(self.epsilon_sq))
        }
    }

    fn alpha(&self, d: usize, n: usize) -> f64 {
        d as f64 / (n as f64 * self.epsilon_sq)
    }
}

/// A `d×n` batch of representations, samples as columns.
#[derive(Debug, Clone, PartialEq)]
pub struct RepBatch {
    data: Matrix,
    normalized: bool,
}

impl RepBatch {
    pub fn new(data: Matrix) -> Self {
        RepBatch {
            data,
            normalized: false,
        }
    }

    /// Wraps a matrix whose columns the caller guarantees to be unit length.
    pub fn normalized(data: Matrix) -> Self {
        debug_assert!(data.column_norms().iter().all(|n| (n - 1.0).abs() < 1e-6));
        RepBatch {
            data,
            normalized: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.data.rows()
    }

    pub fn len(&self) -> usize {
        self.data.cols()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn matrix(&self) -> &Matrix {
        &self.data
    }

    pub fn into_matrix(self) -> Matrix {
        self.data
    }

    pub fn select(&self, idx: &[usize]) -> RepBatch {
        RepBatch {
            data: self.data.select_columns(idx),
            normalized: self.normalized,
        }
    }
}

impl From<Matrix> for RepBatch {
    fn from(m: Matrix) -> Self {
        RepBatch::new(m)
    }
}

/// Hard class assignment of every sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    labels: Vec<usize>,
    k: usize,
}

impl Partition {
    pub fn new(labels: Vec<usize>, k: usize) -> Result<Self> {
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(RateError::LabelOutOfRange { label, k });
        }
        Ok(Partition { labels, k })
    }

    /// Class count inferred as `max label + 1`.
    pub fn from_labels(labels: Vec<usize>) -> Self {
        let k = labels.iter().max().map_or(1, |m| m + 1);
        Partition { labels, k }
    }

    /// Every sample in class 0.
    pub fn single_class(n: usize) -> Self {
        Partition {
            labels: vec![0; n],
            k: 1,
        }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Sample indices of each class, in ascending order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn select(&self, idx: &[usize]) -> Partition {
        Partition {
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            k: self.k,
        }
    }

    /// Membership matrices `Π_j = diag(π_1j, …, π_nj)`. Only used as an
    /// independent cross-check of the gathered-column evaluation.
    pub fn membership_matrices(&self) -> Vec<Matrix> {
        let n = self.labels.len();
        (0..self.k)
            .map(|j| {
                let diag: Vec<f64> = self
                    .labels
                    .iter()
                    .map(|&l| if l == j { 1.0 } else { 0.0 })
                    .collect();
                debug_assert_eq!(diag.len(), n);
                Matrix::from_diag(&diag)
            })
            .collect()
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if self.labels.len() != n {
            return Err(RateError::PartitionMismatch {
                labels: self.labels.len(),
                samples: n,
            });
        }
        Ok(())
    }
}

fn shifted_gram(z: &Matrix, alpha: f64, side: GramSide) -> Matrix {
    let mut g = match side {
        GramSide::Dim => z.gram_rows(),
        GramSide::Sample => z.gram_cols(),
    };
    let m = g.rows();
    for v in g.as_mut_slice().iter_mut() {
        *v *= alpha;
    }
    for i in 0..m {
        g[(i, i)] += 1.0;
    }
    g
}

fn preferred_side(z: &Matrix) -> GramSide {
    if z.rows() <= z.cols() {
        GramSide::Dim
    } else {
        GramSide::Sample
    }
}

/// `½ log₂ det(I + α Z Zᵀ)` together with its gradient `(α/ln 2)(I + αZZᵀ)⁻¹Z`,
/// sharing one factorization.
fn rate_core(z: &Matrix, alpha: f64, want_grad: bool) -> Result<(f64, Option<Matrix>)> {
    let side = preferred_side(z);
    let chol = Cholesky::factor(&shifted_gram(z, alpha, side))?;
    let value = chol.logdet() / (2.0 * LN_2);
    if !want_grad {
        return Ok((value, None));
    }
    let scale = alpha / LN_2;
    let grad = match side {
        // (I_d + αZZᵀ)⁻¹ Z
        GramSide::Dim => chol.solve(z)?,
        // Z (I_n + αZᵀZ)⁻¹ = ((I_n + αZᵀZ)⁻¹ Zᵀ)ᵀ
        GramSide::Sample => chol.solve(&z.transpose())?.transpose(),
    };
    Ok((value, Some(grad.scale(scale))))
}

fn rate_of(z: &Matrix, cfg: &RateConfig) -> Result<f64> {
    let alpha = cfg.alpha(z.rows(), z.cols());
    Ok(rate_core(z, alpha, false)?.0)
}

fn rate_and_grad_of(z: &Matrix, cfg: &RateConfig) -> Result<(f64, Matrix)> {
    let alpha = cfg.alpha(z.rows(), z.cols());
    let (v, g) = rate_core(z, alpha, true)?;
    Ok((v, g.expect("gradient requested")))
}

/// Coding rate `R(Z, ε)` in bits.
pub fn rate(z: &RepBatch, cfg: &RateConfig) -> Result<f64> {
    rate_of(z.matrix(), cfg)
}

/// Coding rate evaluated on an explicitly chosen Gram side.
pub fn rate_with_side(z: &RepBatch, cfg: &RateConfig, side: GramSide) -> Result<f64> {
    let m = z.matrix();
    let alpha = cfg.alpha(m.rows(), m.cols());
    let chol = Cholesky::factor(&shifted_gram(m, alpha, side))?;
    Ok(chol.logdet() / (2.0 * LN_2))
}

/// `∂R/∂Z`, a `d×n` matrix.
pub fn rate_grad(z: &RepBatch, cfg: &RateConfig) -> Result<Matrix> {
    Ok(rate_and_grad_of(z.matrix(), cfg)?.1)
}

/// Class-conditional rate
/// `R_c = Σ_j (n_j / 2n) log₂ det(I + d/(n_j ε²) Z_j Z_jᵀ)`; empty classes
/// contribute nothing.
pub fn rate_partitioned(z: &RepBatch, p: &Partition, cfg: &RateConfig) -> Result<f64> {
    p.check_len(z.len())?;
    let n = z.len() as f64;
    let mut total = 0.0;
    for members in p.members() {
        if members.is_empty() {
            continue;
        }
        let zj = z.matrix().select_columns(&members);
        total += members.len() as f64 / n * rate_of(&zj, cfg)?;
    }
    Ok(total)
}

/// Gradient of [`rate_partitioned`]; each class term only touches its own
/// columns.
pub fn rate_partitioned_grad(z: &RepBatch, p: &Partition, cfg: &RateConfig) -> Result<Matrix> {
    Ok(partitioned_value_grad(z.matrix(), p, cfg)?.1)
}

fn partitioned_value_grad(z: &Matrix, p: &Partition, cfg: &RateConfig) -> Result<(f64, Matrix)> {
    p.check_len(z.cols())?;
    let n = z.cols() as f64;
    let mut value = 0.0;
    let mut grad = Matrix::zeros(z.rows(), z.cols());
    for members in p.members() {
        if members.is_empty() {
            continue;
        }
        let w = members.len() as f64 / n;
        let (v, gj) = rate_and_grad_of(&z.select_columns(&members), cfg)?;
        value += w * v;
        for (local, &col) in members.iter().enumerate() {
            for r in 0..z.rows() {
                grad[(r, col)] += w * gj[(r, local)];
            }
        }
    }
    Ok((value, grad))
}

/// Rate reduction `ΔR = R(Z) − R_c(Z | Π)`.
pub fn delta_rate(z: &RepBatch, p: &Partition, cfg: &RateConfig) -> Result<f64> {
    Ok(rate(z, cfg)? - rate_partitioned(z, p, cfg)?)
}

/// Rate reduction terms and gradient in one pass.
#[derive(Debug, Clone)]
pub struct DeltaRate {
    pub rate: f64,
    pub rate_partitioned: f64,
    pub grad: Matrix,
}

impl DeltaRate {
    pub fn value(&self) -> f64 {
        self.rate - self.rate_partitioned
    }
}

pub fn delta_rate_with_grad(z: &Matrix, p: &Partition, cfg: &RateConfig) -> Result<DeltaRate> {
    let (r, gr) = rate_and_grad_of(z, cfg)?;
    let (rc, grc) = partitioned_value_grad(z, p, cfg)?;
    Ok(DeltaRate {
        rate: r,
        rate_partitioned: rc,
        grad: gr.sub(&grc)?,
    })
}

pub fn delta_rate_grad(z: &RepBatch, p: &Partition, cfg: &RateConfig) -> Result<Matrix> {
    Ok(delta_rate_with_grad(z.matrix(), p, cfg)?.grad)
}

fn paired_classes(
    z_new: &RepBatch,
    z_ref: &RepBatch,
    class_of_new: &Partition,
    class_of_ref: &Partition,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if z_new.dim() != z_ref.dim() {
        return Err(RateError::DimMismatch(z_new.dim(), z_ref.dim()));
    }
    class_of_new.check_len(z_new.len())?;
    class_of_ref.check_len(z_ref.len())?;
    let k = class_of_new.num_classes().max(class_of_ref.num_classes());
    let mut new_members = class_of_new.members();
    let mut ref_members = class_of_ref.members();
    new_members.resize(k, Vec::new());
    ref_members.resize(k, Vec::new());
    Ok(new_members
        .into_iter()
        .zip(ref_members)
        .filter(|(a, b)| !a.is_empty() && !b.is_empty())
        .collect())
}

/// Subspace retention term
/// `Σ_i R(Zⁱ ∪ Z̄ⁱ) − ½[R(Zⁱ) + R(Z̄ⁱ)]` over classes present on both sides.
pub fn subspace_similarity(
    z_new: &RepBatch,
    z_ref: &RepBatch,
    class_of_new: &Partition,
    class_of_ref: &Partition,
    cfg: &RateConfig,
) -> Result<f64> {
    let pairs = paired_classes(z_new, z_ref, class_of_new, class_of_ref)?;
    let mut total = 0.0;
    for (a, b) in pairs {
        let za = z_new.matrix().select_columns(&a);
        let zb = z_ref.matrix().select_columns(&b);
        let union = za.hconcat(&zb)?;
        total += rate_of(&union, cfg)? - 0.5 * (rate_of(&za, cfg)? + rate_of(&zb, cfg)?);
    }
    Ok(total)
}

/// Value of [`subspace_similarity`] and its gradient with respect to the
/// columns of `z_new`; `z_ref` is treated as a constant.
pub fn subspace_similarity_with_grad(
    z_new: &RepBatch,
    z_ref: &RepBatch,
    class_of_new: &Partition,
    class_of_ref: &Partition,
    cfg: &RateConfig,
) -> Result<(f64, Matrix)> {
    let pairs = paired_classes(z_new, z_ref, class_of_new, class_of_ref)?;
    let d = z_new.dim();
    let mut total = 0.0;
    let mut grad = Matrix::zeros(d, z_new.len());
    for (a, b) in pairs {
        let za = z_new.matrix().select_columns(&a);
        let zb = z_ref.matrix().select_columns(&b);
        let union = za.hconcat(&zb)?;
        let (ru, gu) = rate_and_grad_of(&union, cfg)?;
        let (ra, ga) = rate_and_grad_of(&za, cfg)?;
        let rb = rate_of(&zb, cfg)?;
        total += ru - 0.5 * (ra + rb);
        for (local, &col) in a.iter().enumerate() {
            for r in 0..d {
                grad[(r, col)] += gu[(r, local)] - 0.5 * ga[(r, local)];
            }
        }
    }
    Ok((total, grad))
}

pub fn subspace_similarity_grad(
    z_new: &RepBatch,
    z_ref: &RepBatch,
    class_of_new: &Partition,
    class_of_ref: &Partition,
    cfg: &RateConfig,
) -> Result<Matrix> {
    Ok(subspace_similarity_with_grad(z_new, z_ref, class_of_new, class_of_ref, cfg)?.1)
}
