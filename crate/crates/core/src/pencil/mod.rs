//! Matrix-pencil analytics: generalized Schur decomposition of a pair of
//! square matrices and the chordal eigenvalue metrics built on top of it.
//!
//! Eigenvalues are reported as (alpha, beta) pairs with lambda = alpha/beta;
//! beta = 0 encodes an eigenvalue at infinity, which the chordal metric
//! handles as a regular point of the Riemann sphere.

mod qz;

use num_complex::Complex64;

use crate::grid::Grid;
use crate::tfa::SquareGrid;
use crate::{Error, Result};

/// Relative threshold on |beta| below which an eigenvalue counts as
/// ill-conditioned in the loss penalty.
pub const DEFAULT_BETA_TOLERANCE: f64 = 1e-6;

/// A pair of equally-sized square matrices (A, B) analyzed as A - lambda B.
#[derive(Debug, Clone, PartialEq)]
pub struct Pencil {
    pub a: Grid,
    pub b: Grid,
}

impl Pencil {
    pub fn new(a: Grid, b: Grid) -> Result<Pencil> {
        if !a.is_square() || !b.is_square() || a.rows() != b.rows() {
            return Err(Error::ShapeMismatch(format!(
                "pencil needs equal square matrices, got {}x{} and {}x{}",
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols()
            )));
        }
        if a.rows() == 0 {
            return Err(Error::GridTooSmall { rows: 0, cols: 0 });
        }
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::NonFinite("pencil entries"));
        }
        Ok(Pencil { a, b })
    }

    pub fn order(&self) -> usize {
        self.a.rows()
    }
}

/// Generalized Schur factorization A = Q S Z^T, B = Q T Z^T.
///
/// `s` is quasi-triangular (1x1/2x2 diagonal blocks), `t` upper triangular
/// with nonnegative diagonal, and `q`, `z` orthogonal. The (alpha, beta)
/// pairs are sorted jointly by eigenvalue (finite ones ascending by real
/// then imaginary part, infinite ones last); `s` and `t` keep factorization
/// order, so pair k does not in general sit at diagonal position k.
#[derive(Debug, Clone)]
pub struct GeneralizedEigen {
    pub alpha: Vec<Complex64>,
    pub beta: Vec<f64>,
    pub q: Grid,
    pub z: Grid,
    pub s: Grid,
    pub t: Grid,
}

fn eig_sort_key(alpha: Complex64, beta: f64) -> (u8, f64, f64) {
    if beta == 0.0 {
        (1, alpha.re, alpha.im)
    } else {
        (0, alpha.re / beta, alpha.im / beta)
    }
}

impl GeneralizedEigen {
    /// Eigenvalues lambda_k = alpha_k / beta_k in sorted order; beta = 0
    /// maps to the point at infinity (+inf real part).
    pub fn eigenvalues(&self) -> Vec<Complex64> {
        self.alpha
            .iter()
            .zip(&self.beta)
            .map(|(&a, &b)| {
                if b == 0.0 {
                    Complex64::new(f64::INFINITY, 0.0)
                } else {
                    Complex64::new(a.re / b, a.im / b)
                }
            })
            .collect()
    }

    /// Frobenius norm of A - Q S Z^T.
    pub fn residual_a(&self, a: &Grid) -> f64 {
        a.sub(&self.q.matmul(&self.s).matmul(&self.z.transpose())).frobenius_norm()
    }

    /// Frobenius norm of B - Q T Z^T.
    pub fn residual_b(&self, b: &Grid) -> f64 {
        b.sub(&self.q.matmul(&self.t).matmul(&self.z.transpose())).frobenius_norm()
    }

    /// Frobenius norm of Q^T Q - I.
    pub fn orthogonality_q(&self) -> f64 {
        let n = self.q.rows();
        self.q.transpose().matmul(&self.q).sub(&Grid::identity(n)).frobenius_norm()
    }

    /// Frobenius norm of Z^T Z - I.
    pub fn orthogonality_z(&self) -> f64 {
        let n = self.z.rows();
        self.z.transpose().matmul(&self.z).sub(&Grid::identity(n)).frobenius_norm()
    }
}

/// Full generalized Schur decomposition of the pencil.
pub fn qz_decompose(p: &Pencil) -> Result<GeneralizedEigen> {
    let out = qz::decompose(&p.a, &p.b)?;
    let n = p.order();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| {
        let ki = eig_sort_key(out.alpha[i], out.beta[i]);
        let kj = eig_sort_key(out.alpha[j], out.beta[j]);
        ki.0.cmp(&kj.0)
            .then_with(|| ki.1.total_cmp(&kj.1))
            .then_with(|| ki.2.total_cmp(&kj.2))
    });
    let alpha = idx.iter().map(|&i| out.alpha[i]).collect();
    let beta = idx.iter().map(|&i| out.beta[i]).collect();
    Ok(GeneralizedEigen { alpha, beta, q: out.q, z: out.z, s: out.s, t: out.t })
}

/// Eigenvalues of a single square matrix, via the pencil (M, I). Sorted
/// ascending by real then imaginary part.
pub fn matrix_eigenvalues(m: &Grid) -> Result<Vec<Complex64>> {
    let n = m.rows();
    let p = Pencil::new(m.clone(), Grid::identity(n))?;
    Ok(qz_decompose(&p)?.eigenvalues())
}

/// Chordal distance between two points of the extended complex plane:
/// |a - b| / (sqrt(1+|a|^2) sqrt(1+|b|^2)), the straight-line distance
/// between their stereographic images on the Riemann sphere (diameter 1
/// scaling puts the range in [0, 1]).
///
/// Infinities are genuine sphere points: d(inf, inf) = 0 and
/// d(a, inf) = 1/sqrt(1+|a|^2). Evaluation is overflow-safe and exactly
/// symmetric in its arguments.
pub fn chordal_distance(a: Complex64, b: Complex64) -> f64 {
    let fa = a.re.is_finite() && a.im.is_finite();
    let fb = b.re.is_finite() && b.im.is_finite();
    match (fa, fb) {
        (false, false) => 0.0,
        (false, true) => 1.0 / b.norm().hypot(1.0),
        (true, false) => 1.0 / a.norm().hypot(1.0),
        (true, true) => {
            let na = a.norm();
            let nb = b.norm();
            // Canonical argument order keeps the expression bitwise
            // symmetric; scaling by the larger modulus prevents overflow.
            let (small, large) = if na <= nb { (na, nb) } else { (nb, na) };
            let m = large.max(1.0);
            let num = (a / m - b / m).norm();
            let denom = (large.hypot(1.0) / m) * small.hypot(1.0);
            num / denom
        }
    }
}

/// Element-wise chordal distances of two equal-length eigenvalue lists.
pub fn chordal_vector(a: &[Complex64], b: &[Complex64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { left: a.len(), right: b.len() });
    }
    Ok(a.iter().zip(b).map(|(&x, &y)| chordal_distance(x, y)).collect())
}

/// Breakdown of the eigenvalue-matching loss between a generated grid and a
/// target grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ChordalReport {
    /// Index-aligned chordal distances between the two sorted spectra.
    pub pairwise: Vec<f64>,
    /// Ill-conditioning penalty: fraction of pencil eigenvalues whose |beta|
    /// is negligible relative to the mean.
    pub gamma: f64,
    /// mean(pairwise) + gamma; the quantity the latent search minimizes.
    pub total: f64,
    /// Mean modulus of the target grid's finite eigenvalues; scales the
    /// search's convergence threshold.
    pub mean_eig_magnitude: f64,
    pub ill_count: usize,
}

/// Spectral dissimilarity of two square working grids: index-aligned chordal
/// distances between their (sorted) eigenvalue lists, plus a penalty for
/// ill-conditioned eigenvalues of the joint pencil (x_g, x_t).
pub fn chordal_loss(x_g: &SquareGrid, x_t: &SquareGrid, tol_beta: f64) -> Result<ChordalReport> {
    if x_g.side() != x_t.side() {
        return Err(Error::ShapeMismatch(format!(
            "grid sides {} and {} differ",
            x_g.side(),
            x_t.side()
        )));
    }
    if !(tol_beta > 0.0) {
        return Err(Error::BadConfig(format!("beta tolerance {tol_beta} must be positive")));
    }
    let n = x_g.side();
    let lam_g = matrix_eigenvalues(x_g.values())?;
    let lam_t = matrix_eigenvalues(x_t.values())?;
    let pairwise = chordal_vector(&lam_g, &lam_t)?;

    let joint = qz_decompose(&Pencil::new(x_g.values().clone(), x_t.values().clone())?)?;
    let mean_beta = joint.beta.iter().map(|b| b.abs()).sum::<f64>() / n as f64;
    let ill_count = joint.beta.iter().filter(|b| b.abs() <= tol_beta * mean_beta).count();
    let gamma = ill_count as f64 / n as f64;

    let finite_mags: Vec<f64> =
        lam_t.iter().filter(|l| l.re.is_finite() && l.im.is_finite()).map(|l| l.norm()).collect();
    let mean_eig_magnitude = if finite_mags.is_empty() {
        0.0
    } else {
        finite_mags.iter().sum::<f64>() / finite_mags.len() as f64
    };

    let total = pairwise.iter().sum::<f64>() / pairwise.len() as f64 + gamma;
    Ok(ChordalReport { pairwise, gamma, total, mean_eig_magnitude, ill_count })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assert_close(x: f64, y: f64, tol: f64, what: &str) {
        assert!((x - y).abs() <= tol, "{what}: {x} vs {y} (tol {tol})");
    }

    fn check_invariants(p: &Pencil, ge: &GeneralizedEigen, tol: f64) {
        let scale_a = p.a.frobenius_norm().max(1.0);
        let scale_b = p.b.frobenius_norm().max(1.0);
        assert!(
            ge.residual_a(&p.a) <= tol * scale_a,
            "A residual {} above {}",
            ge.residual_a(&p.a),
            tol * scale_a
        );
        assert!(
            ge.residual_b(&p.b) <= tol * scale_b,
            "B residual {} above {}",
            ge.residual_b(&p.b),
            tol * scale_b
        );
        assert!(ge.orthogonality_q() <= tol, "Q drift {}", ge.orthogonality_q());
        assert!(ge.orthogonality_z() <= tol, "Z drift {}", ge.orthogonality_z());
        for &b in &ge.beta {
            assert!(b >= 0.0, "negative beta {b}");
        }
        // t triangular with nonnegative diagonal; s quasi-triangular.
        let n = p.order();
        for r in 0..n {
            assert!(ge.t.at(r, r) >= 0.0);
            for c in 0..r {
                assert_eq!(ge.t.at(r, c), 0.0, "t({r},{c}) not zero");
                if r > c + 1 {
                    assert_eq!(ge.s.at(r, c), 0.0, "s({r},{c}) not zero");
                }
            }
        }
    }

    #[test]
    fn identity_pencil_is_all_ones() {
        let p = Pencil::new(Grid::identity(4), Grid::identity(4)).unwrap();
        let ge = qz_decompose(&p).unwrap();
        check_invariants(&p, &ge, 1e-12);
        for l in ge.eigenvalues() {
            assert_close(l.re, 1.0, 1e-12, "identity eigenvalue");
            assert_close(l.im, 0.0, 1e-12, "identity eigenvalue imag");
        }
    }

    #[test]
    fn diagonal_pencil_eigenvalues_sorted() {
        let a = Grid::from_vec(2, 2, vec![3.0, 0.0, 0.0, 2.0]).unwrap();
        let p = Pencil::new(a, Grid::identity(2)).unwrap();
        let ge = qz_decompose(&p).unwrap();
        let ev = ge.eigenvalues();
        assert_close(ev[0].re, 2.0, 1e-12, "first sorted eigenvalue");
        assert_close(ev[1].re, 3.0, 1e-12, "second sorted eigenvalue");
    }

    #[test]
    fn rotation_matrix_gives_conjugate_pair() {
        let m = Grid::from_vec(2, 2, vec![0.0, -1.0, 1.0, 0.0]).unwrap();
        let ev = matrix_eigenvalues(&m).unwrap();
        assert_close(ev[0].re, 0.0, 1e-12, "rotation re");
        assert_close(ev[0].im, -1.0, 1e-12, "rotation -i");
        assert_close(ev[1].re, 0.0, 1e-12, "rotation re");
        assert_close(ev[1].im, 1.0, 1e-12, "rotation +i");
        // exact conjugates by construction
        assert_eq!(ev[0].re, ev[1].re);
        assert_eq!(ev[0].im, -ev[1].im);
    }

    #[test]
    fn singular_b_yields_infinite_eigenvalue() {
        let a = Grid::identity(3);
        let b = Grid::from_vec(3, 3, vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let p = Pencil::new(a, b).unwrap();
        let ge = qz_decompose(&p).unwrap();
        check_invariants(&p, &ge, 1e-12);
        let ev = ge.eigenvalues();
        assert_close(ev[0].re, 0.5, 1e-12, "finite eigenvalue 1/2");
        assert_close(ev[1].re, 1.0, 1e-12, "finite eigenvalue 1");
        assert!(ev[2].re.is_infinite(), "expected infinite eigenvalue, got {:?}", ev[2]);
        assert_eq!(ge.beta[2], 0.0);
    }

    #[test]
    fn zero_pencil_terminates() {
        let p = Pencil::new(Grid::zeros(4, 4), Grid::zeros(4, 4)).unwrap();
        let ge = qz_decompose(&p).unwrap();
        for &b in &ge.beta {
            assert_eq!(b, 0.0);
        }
    }

    #[test]
    fn interior_infinite_eigenvalue_is_deflated() {
        // B singular in the middle of the diagonal after triangularization;
        // exercises the interior chase rather than the edge splits.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 6;
        let a = Grid::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let mut b = Grid::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        // Make B rank-deficient: third row = mix of first two.
        for c in 0..n {
            let v = 0.5 * b.at(0, c) - 1.5 * b.at(1, c);
            b.set(2, c, v);
        }
        let p = Pencil::new(a, b).unwrap();
        let ge = qz_decompose(&p).unwrap();
        check_invariants(&p, &ge, 1e-10);
        let infinite = ge.beta.iter().filter(|&&b| b == 0.0).count();
        assert_eq!(infinite, 1, "betas: {:?}", ge.beta);
    }

    #[test]
    fn random_pencils_satisfy_factorization_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for n in [1usize, 2, 3, 5, 8, 13] {
            for _ in 0..8 {
                let a = Grid::from_fn(n, n, |_, _| rng.random_range(-2.0..2.0));
                let b = Grid::from_fn(n, n, |_, _| rng.random_range(-2.0..2.0));
                let p = Pencil::new(a, b).unwrap();
                let ge = qz_decompose(&p).unwrap();
                check_invariants(&p, &ge, 1e-10);
                assert_eq!(ge.alpha.len(), n);
            }
        }
    }

    #[test]
    fn decomposition_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Grid::from_fn(9, 9, |_, _| rng.random_range(-1.0..1.0));
        let b = Grid::from_fn(9, 9, |_, _| rng.random_range(-1.0..1.0));
        let p = Pencil::new(a, b).unwrap();
        let g1 = qz_decompose(&p).unwrap();
        let g2 = qz_decompose(&p).unwrap();
        assert_eq!(g1.s.data(), g2.s.data());
        assert_eq!(g1.alpha, g2.alpha);
        assert_eq!(g1.beta, g2.beta);
    }

    #[test]
    fn chordal_hand_values() {
        let c = |a: (f64, f64), b: (f64, f64)| {
            chordal_distance(Complex64::new(a.0, a.1), Complex64::new(b.0, b.1))
        };
        assert_close(c((1.0, 0.0), (-1.0, 0.0)), 1.0, 1e-12, "chord(1,-1)");
        assert_close(c((0.0, 0.0), (1.0, 0.0)), std::f64::consts::FRAC_1_SQRT_2, 1e-12, "chord(0,1)");
        assert_close(c((2.0, 0.0), (1.0, 0.0)), 1.0 / 10.0_f64.sqrt(), 1e-12, "chord(2,1)");
    }

    #[test]
    fn chordal_symmetry_range_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..2000 {
            let a = Complex64::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
            let b = Complex64::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
            let d1 = chordal_distance(a, b);
            let d2 = chordal_distance(b, a);
            assert_eq!(d1, d2, "symmetry broken for {a} {b}");
            assert!((0.0..=1.0).contains(&d1), "range broken: {d1}");
            assert_eq!(chordal_distance(a, a), 0.0);
        }
    }

    #[test]
    fn chordal_handles_infinities_and_huge_values() {
        let inf = Complex64::new(f64::INFINITY, 0.0);
        let one = Complex64::new(1.0, 0.0);
        assert_eq!(chordal_distance(inf, inf), 0.0);
        assert_close(
            chordal_distance(one, inf),
            std::f64::consts::FRAC_1_SQRT_2,
            1e-12,
            "chord(1,inf)",
        );
        let huge = Complex64::new(1e300, 0.0);
        let d = chordal_distance(huge, one);
        assert!(d.is_finite() && d > 0.0 && d <= 1.0);
        // A huge value is nearly the north pole: close to the infinity limit.
        assert_close(d, std::f64::consts::FRAC_1_SQRT_2, 1e-9, "chord(huge,1)");
    }

    #[test]
    fn chordal_vector_checks_lengths() {
        let a = vec![Complex64::new(0.0, 0.0)];
        let b = vec![];
        assert!(matches!(chordal_vector(&a, &b), Err(Error::LengthMismatch { .. })));
    }

    fn square(values: Grid) -> SquareGrid {
        SquareGrid::new(values, None).unwrap()
    }

    #[test]
    fn chordal_loss_of_identical_grids_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = Grid::from_fn(8, 8, |_, _| rng.random_range(-1.0..1.0));
        let report = chordal_loss(&square(g.clone()), &square(g), DEFAULT_BETA_TOLERANCE).unwrap();
        assert_eq!(report.total, 0.0, "identical grids must cost exactly zero");
        assert_eq!(report.gamma, 0.0);
        assert!(report.pairwise.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn chordal_loss_penalizes_singular_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = Grid::from_fn(8, 8, |_, _| rng.random_range(-1.0..1.0));
        let mut t = Grid::from_fn(8, 8, |_, _| rng.random_range(-1.0..1.0));
        for c in 0..8 {
            t.set(3, c, 0.0);
        }
        let report = chordal_loss(&square(g), &square(t), DEFAULT_BETA_TOLERANCE).unwrap();
        assert!(report.ill_count >= 1, "singular target must trip the beta filter");
        assert!(report.gamma >= 1.0 / 8.0);
        assert!(report.total >= report.gamma);
    }

    #[test]
    fn chordal_loss_reports_target_magnitude() {
        let d = Grid::from_fn(8, 8, |r, c| if r == c { (r + 1) as f64 } else { 0.0 });
        let report =
            chordal_loss(&square(Grid::identity(8)), &square(d), DEFAULT_BETA_TOLERANCE).unwrap();
        // eigenvalues 1..8, mean 4.5
        assert_close(report.mean_eig_magnitude, 4.5, 1e-9, "mean eigenvalue magnitude");
    }
}
