#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ratefair::linalg::Matrix;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-5;
/// Floor on the denominator of the entrywise relative error.
pub const FD_FLOOR: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

pub fn unit_columns(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    let m = random_matrix(rng, rows, cols);
    let norms = m.column_norms();
    Matrix::from_fn(rows, cols, |r, c| m[(r, c)] / norms[c])
}

pub fn random_labels(rng: &mut impl Rng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..k)).collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FD_FLOOR)
}

/// Central differences of `f` over every entry of `x`.
pub fn fd_gradient(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + FD_STEP;
            let up = f(&probe);
            probe[i] = x[i] - FD_STEP;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Fourth-order central differences (five-point stencil). Used where
/// sphere projections make the objective strongly curved.
pub fn fd_gradient5(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut at = |probe: &mut Vec<f64>, i: usize, s: f64| {
        probe[i] = x[i] + s * FD_STEP;
        let v = f(probe);
        probe[i] = x[i];
        v
    };
    (0..x.len())
        .map(|i| {
            let (p2, p1, m1, m2) = (at(&mut probe, i, 2.0), at(&mut probe, i, 1.0), at(&mut probe, i, -1.0), at(&mut probe, i, -2.0));
            (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * FD_STEP)
        })
        .collect()
}

/// Largest entrywise relative error between an analytic and a numeric gradient.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic.iter().zip(numeric).map(|(&a, &n)| rel_err(a, n)).fold(0.0, f64::max)
}

pub fn with_data(shape: (usize, usize), data: &[f64]) -> Matrix {
    Matrix::new(shape.0, shape.1, data.to_vec()).unwrap()
}

/// Two clusters in the plane: A = {0, 1, 2} along x, B = {3, 4, 5} along y.
pub fn two_cluster_fixture() -> Matrix {
    with_data((2, 6), &[3.0, 2.0, 1.0, 0.2, -0.3, 0.1, 0.2, -0.1, 0.3, 2.0, 1.5, 1.0])
}

/// Prototype sampling executed by hand for a `2×n` batch: closed-form
/// eigenvectors of the 2×2 second moment, then `r/2` top scorers per
/// eigenvector, leading eigenvector first, skipping taken samples.
pub fn prototype_by_hand(z: &Matrix, r: usize) -> Vec<usize> {
    let n = z.cols();
    if r >= n {
        return (0..n).collect();
    }
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    for j in 0..n {
        a += z[(0, j)] * z[(0, j)];
        b += z[(0, j)] * z[(1, j)];
        c += z[(1, j)] * z[(1, j)];
    }
    let (a, b, c) = (a / n as f64, b / n as f64, c / n as f64);
    let mid = (a + c) / 2.0;
    let rad = (((a - c) / 2.0).powi(2) + b * b).sqrt();
    let mut chosen = Vec::new();
    for (slot, lambda) in [mid + rad, mid - rad].into_iter().enumerate() {
        // (b, λ − a) solves (M − λI)v = 0 unless b = 0
        let (vx, vy) = if b.abs() > 1e-15 { (b, lambda - a) } else if slot == 0 { if a >= c { (1.0, 0.0) } else { (0.0, 1.0) } } else if a >= c { (0.0, 1.0) } else { (1.0, 0.0) };
        let norm = (vx * vx + vy * vy).sqrt();
        let mut scores: Vec<f64> = (0..n).map(|j| (vx * z[(0, j)] + vy * z[(1, j)]) / norm).collect();
        if scores.iter().sum::<f64>() < 0.0 {
            for s in &mut scores {
                *s = -*s;
            }
        }
        let quota = r / 2 + usize::from(slot < r % 2);
        let mut got = 0;
        while got < quota {
            let best = (0..n)
                .filter(|j| !chosen.contains(j))
                .fold(None, |best: Option<usize>, j| match best {
                    Some(b) if scores[b] >= scores[j] => Some(b),
                    _ => Some(j),
                })
                .unwrap();
            chosen.push(best);
            got += 1;
        }
    }
    chosen.sort_unstable();
    chosen
}
