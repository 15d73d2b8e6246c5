//! Cross-checks of the generalized Schur path against independent oracles:
//! determinant-interpolation eigenvalues, planted spectra, and Jacobi
//! rotations, plus property tests for the chordal metric.

mod common;

use num_complex::Complex64;
use proptest::prelude::*;
use purigan::pencil::{
    chordal_distance, matrix_eigenvalues, qz_decompose, Pencil,
};
use purigan::Grid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn planted_spectra_recovered_to_high_accuracy() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..60 {
        let n = rng.random_range(2..=6);
        let planted = common::planted_pencil(&mut rng, n);
        let p = Pencil::new(planted.a.clone(), planted.b.clone()).unwrap();
        let ge = qz_decompose(&p).unwrap();
        let mismatch = common::max_spectral_mismatch(&ge.eigenvalues(), &planted.eigenvalues);
        assert!(mismatch <= 1e-9, "n={n}: planted mismatch {mismatch}");
    }
}

#[test]
fn charpoly_oracle_agrees_on_random_pencils() {
    let mut rng = ChaCha8Rng::seed_from_u64(4096);
    for trial in 0..100 {
        let n = 2 + trial % 5;
        let a = Grid::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let b = {
            // keep B comfortably nonsingular so the oracle's polynomial has
            // full degree
            let mut b = Grid::from_fn(n, n, |_, _| rng.random_range(-0.5..0.5));
            for i in 0..n {
                let v = b.at(i, i) + 2.0f64.copysign(b.at(i, i));
                b.set(i, i, v);
            }
            b
        };
        let p = Pencil::new(a.clone(), b.clone()).unwrap();
        let ge = qz_decompose(&p).unwrap();
        let oracle = common::charpoly_eigenvalues(&a, &b);
        let mismatch = common::max_spectral_mismatch(&ge.eigenvalues(), &oracle);
        assert!(mismatch <= 1e-8, "trial {trial} (n={n}): oracle mismatch {mismatch}");
    }
}

#[test]
fn factorization_invariants_hold_to_n_128() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for n in [16usize, 32, 64, 128] {
        let a = Grid::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let b = Grid::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let p = Pencil::new(a.clone(), b.clone()).unwrap();
        let ge = qz_decompose(&p).unwrap();
        let ra = ge.residual_a(&a) / a.frobenius_norm();
        let rb = ge.residual_b(&b) / b.frobenius_norm();
        assert!(ra <= 1e-8, "n={n}: relative A residual {ra}");
        assert!(rb <= 1e-8, "n={n}: relative B residual {rb}");
        assert!(ge.orthogonality_q() <= 1e-10, "n={n}: Q defect {}", ge.orthogonality_q());
        assert!(ge.orthogonality_z() <= 1e-10, "n={n}: Z defect {}", ge.orthogonality_z());
    }
}

#[test]
fn symmetric_matrices_match_jacobi() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let n = rng.random_range(2..=10);
        let half = Grid::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let sym = {
            let t = half.transpose();
            Grid::from_fn(n, n, |r, c| 0.5 * (half.at(r, c) + t.at(r, c)))
        };
        let mine: Vec<f64> = matrix_eigenvalues(&sym)
            .unwrap()
            .iter()
            .map(|l| {
                assert!(l.im.abs() <= 1e-9, "symmetric matrix produced imaginary part {}", l.im);
                l.re
            })
            .collect();
        let oracle = common::jacobi_symmetric_eigenvalues(&sym);
        for (m, o) in mine.iter().zip(&oracle) {
            assert!((m - o).abs() <= 1e-9, "eigenvalue {m} vs jacobi {o}");
        }
    }
}

#[test]
fn singular_b_pencils_report_infinite_eigenvalues() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for rank_drop in 1..=3usize {
        let n = 8;
        let a = Grid::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        // B = U diag(d) V^T with rank_drop zero entries in d.
        let u = common::random_orthogonal(&mut rng, n);
        let v = common::random_orthogonal(&mut rng, n);
        let mut d = Grid::zeros(n, n);
        for i in 0..n - rank_drop {
            d.set(i, i, rng.random_range(0.5..1.5));
        }
        let b = u.matmul(&d).matmul(&v.transpose());
        let p = Pencil::new(a.clone(), b.clone()).unwrap();
        let ge = qz_decompose(&p).unwrap();
        let infinite = ge.beta.iter().filter(|&&x| x == 0.0).count();
        assert_eq!(infinite, rank_drop, "betas {:?}", ge.beta);
        let ra = ge.residual_a(&a) / a.frobenius_norm();
        let rb = ge.residual_b(&b) / b.frobenius_norm();
        assert!(ra <= 1e-10 && rb <= 1e-10, "residuals {ra} {rb}");
    }
}

proptest! {
    #[test]
    fn chordal_is_symmetric_bounded_and_definite(
        are in -1e6f64..1e6, aim in -1e6f64..1e6,
        bre in -1e6f64..1e6, bim in -1e6f64..1e6,
    ) {
        let a = Complex64::new(are, aim);
        let b = Complex64::new(bre, bim);
        let d = chordal_distance(a, b);
        prop_assert_eq!(d, chordal_distance(b, a));
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(chordal_distance(a, a), 0.0);
        if (a - b).norm() > 1e-9 {
            prop_assert!(d > 0.0);
        }
    }

    #[test]
    fn random_pencil_eigenvalue_count_is_order(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=7);
        let a = Grid::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let b = Grid::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let ge = qz_decompose(&Pencil::new(a, b).unwrap()).unwrap();
        prop_assert_eq!(ge.alpha.len(), n);
        prop_assert_eq!(ge.beta.len(), n);
        prop_assert!(ge.beta.iter().all(|&x| x >= 0.0));
    }
}
