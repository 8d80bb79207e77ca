mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ratefair::linalg::{logdet_spd, solve_spd, sym_eig, Matrix};

fn spd(seed: u64, n: usize) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = common::random_matrix(&mut rng, n, n);
    b.matmul_tn(&b).unwrap().add(&Matrix::identity(n)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn solve_residual_is_small(seed in any::<u64>(), n in 1usize..=32, m in 1usize..4) {
        let a = spd(seed, n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
        let rhs = common::random_matrix(&mut rng, n, m);
        let x = solve_spd(&a, &rhs).unwrap();
        let residual = a.matmul(&x).unwrap().sub(&rhs).unwrap().frobenius_norm();
        prop_assert!(residual <= 1e-8 * rhs.frobenius_norm(), "residual {residual}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn eigen_pairs_and_orthonormality(seed in any::<u64>(), n in 1usize..=12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = common::random_matrix(&mut rng, n, n);
        let a = b.add(&b.transpose()).unwrap();
        let e = sym_eig(&a).unwrap();
        for w in e.values.windows(2) {
            prop_assert!(w[0] >= w[1]);
        }
        let vtv = e.vectors.matmul_tn(&e.vectors).unwrap();
        prop_assert!(vtv.max_abs_diff(&Matrix::identity(n)) <= 1e-8);
        for (i, &lambda) in e.values.iter().enumerate() {
            let v = e.vectors.column(i);
            let av = a.matmul(&Matrix::new(n, 1, v.clone()).unwrap()).unwrap();
            for r in 0..n {
                prop_assert!((av[(r, 0)] - lambda * v[r]).abs() <= 1e-8);
            }
        }
        let rebuilt = e.vectors.matmul(&Matrix::from_diag(&e.values)).unwrap().matmul_nt(&e.vectors).unwrap();
        prop_assert!(rebuilt.max_abs_diff(&a) <= 1e-8);
    }

    #[test]
    fn logdet_matches_eigenvalues(seed in any::<u64>(), n in 1usize..=16) {
        let a = spd(seed, n);
        let from_eig: f64 = sym_eig(&a).unwrap().values.iter().map(|l| l.ln()).sum();
        prop_assert!((logdet_spd(&a).unwrap() - from_eig).abs() <= 1e-8);
    }
}

#[test]
fn fixed_examples() {
    assert_eq!(logdet_spd(&Matrix::identity(3)).unwrap(), 0.0);
    assert!((logdet_spd(&Matrix::from_diag(&[2.0, 8.0])).unwrap() - 16f64.ln()).abs() < 1e-12);
    let e = sym_eig(&Matrix::from_rows(&[&[2.0, 1.0], &[1.0, 2.0]]).unwrap()).unwrap();
    assert!((e.values[0] - 3.0).abs() < 1e-12 && (e.values[1] - 1.0).abs() < 1e-12);
    let v = e.vectors.column(0);
    let s = std::f64::consts::FRAC_1_SQRT_2;
    assert!((v[0].abs() - s).abs() < 1e-10 && (v[1].abs() - s).abs() < 1e-10 && v[0] * v[1] > 0.0);
}
