//! Shared oracles for integration tests. Everything here is implemented
//! independently of the library's own linear algebra so the two sides can
//! disagree: determinant-interpolation eigenvalues, Jacobi rotations, and a
//! planted-spectrum pencil generator.

#![allow(dead_code)]

use num_complex::Complex64;
use purigan::Grid;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// Characteristic-polynomial eigenvalue oracle
// ---------------------------------------------------------------------------

/// det(A - mu B) by complex LU with partial pivoting.
pub fn det_pencil(a: &Grid, b: &Grid, mu: Complex64) -> Complex64 {
    let n = a.rows();
    let mut m: Vec<Complex64> = (0..n * n)
        .map(|i| Complex64::new(a.data()[i], 0.0) - mu * b.data()[i])
        .collect();
    let mut det = Complex64::new(1.0, 0.0);
    for c in 0..n {
        let mut piv = c;
        for r in c + 1..n {
            if m[r * n + c].norm() > m[piv * n + c].norm() {
                piv = r;
            }
        }
        if piv != c {
            for k in 0..n {
                m.swap(c * n + k, piv * n + k);
            }
            det = -det;
        }
        let d = m[c * n + c];
        if d.norm() == 0.0 {
            return Complex64::new(0.0, 0.0);
        }
        det *= d;
        for r in c + 1..n {
            let f = m[r * n + c] / d;
            for k in c..n {
                let v = m[c * n + k];
                m[r * n + k] -= f * v;
            }
        }
    }
    det
}

/// Durand-Kerner root finder. `coeffs[j]` multiplies x^j; the leading
/// coefficient must be nonzero.
pub fn poly_roots(coeffs: &[Complex64]) -> Vec<Complex64> {
    let n = coeffs.len() - 1;
    let lead = coeffs[n];
    assert!(lead.norm() > 0.0, "polynomial degree dropped; oracle needs nonsingular B");
    let monic: Vec<Complex64> = coeffs.iter().map(|c| c / lead).collect();
    let eval = |z: Complex64| {
        let mut acc = Complex64::new(0.0, 0.0);
        for j in (0..=n).rev() {
            acc = acc * z + monic[j];
        }
        acc
    };
    let seed = Complex64::new(0.4, 0.9);
    let mut z: Vec<Complex64> = (0..n).map(|i| seed.powu(i as u32 + 1)).collect();
    for _ in 0..1000 {
        let mut step = 0.0f64;
        for i in 0..n {
            let mut denom = Complex64::new(1.0, 0.0);
            for j in 0..n {
                if j != i {
                    denom *= z[i] - z[j];
                }
            }
            if denom.norm() == 0.0 {
                continue;
            }
            let d = eval(z[i]) / denom;
            z[i] -= d;
            step = step.max(d.norm());
        }
        if step < 1e-14 {
            break;
        }
    }
    z
}

/// Generalized eigenvalues of (A, B) with nonsingular B: sample
/// det(A - mu B) on a circle, recover polynomial coefficients by inverse
/// DFT, and root-find. Completely independent of the QZ path.
pub fn charpoly_eigenvalues(a: &Grid, b: &Grid) -> Vec<Complex64> {
    let n = a.rows();
    let m = n + 1;
    let radius = 2.0;
    let vals: Vec<Complex64> = (0..m)
        .map(|k| {
            let theta = 2.0 * std::f64::consts::PI * k as f64 / m as f64;
            det_pencil(a, b, Complex64::from_polar(radius, theta))
        })
        .collect();
    let mut coeffs = Vec::with_capacity(m);
    for j in 0..m {
        let mut acc = Complex64::new(0.0, 0.0);
        for (k, &v) in vals.iter().enumerate() {
            let theta = -2.0 * std::f64::consts::PI * ((j * k) % m) as f64 / m as f64;
            acc += v * Complex64::from_polar(1.0, theta);
        }
        coeffs.push(acc / m as f64 / radius.powi(j as i32));
    }
    poly_roots(&coeffs)
}

/// Largest distance in a greedy nearest-neighbor matching of two spectra.
pub fn max_spectral_mismatch(x: &[Complex64], y: &[Complex64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let mut used = vec![false; y.len()];
    let mut worst = 0.0f64;
    for &xi in x {
        let mut best = usize::MAX;
        let mut bd = f64::INFINITY;
        for (j, &yj) in y.iter().enumerate() {
            if used[j] {
                continue;
            }
            let xf = xi.re.is_finite() && xi.im.is_finite();
            let yf = yj.re.is_finite() && yj.im.is_finite();
            let d = match (xf, yf) {
                (true, true) => (xi - yj).norm(),
                (false, false) => 0.0,
                _ => f64::INFINITY,
            };
            if d < bd {
                bd = d;
                best = j;
            }
        }
        assert!(best != usize::MAX);
        used[best] = true;
        worst = worst.max(bd);
    }
    worst
}

// ---------------------------------------------------------------------------
// Jacobi rotation oracles
// ---------------------------------------------------------------------------

/// Eigenvalues of a symmetric matrix by cyclic Jacobi, ascending.
pub fn jacobi_symmetric_eigenvalues(m: &Grid) -> Vec<f64> {
    let n = m.rows();
    let mut a = m.clone();
    for _ in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a.at(p, q) * a.at(p, q);
            }
        }
        if off.sqrt() <= 1e-14 * a.frobenius_norm().max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.at(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = 0.5 * (a.at(q, q) - a.at(p, p)) / apq;
                let t = theta.signum() / (theta.abs() + theta.hypot(1.0));
                let c = 1.0 / t.hypot(1.0);
                let s = t * c;
                for k in 0..n {
                    let akp = a.at(k, p);
                    let akq = a.at(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.at(p, k);
                    let aqk = a.at(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a.at(i, i)).collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Singular values by one-sided Jacobi (column orthogonalization),
/// descending.
pub fn jacobi_singular_values(m: &Grid) -> Vec<f64> {
    let n = m.cols();
    let rows = m.rows();
    let mut a = m.clone();
    for _ in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for r in 0..rows {
                    app += a.at(r, p) * a.at(r, p);
                    aqq += a.at(r, q) * a.at(r, q);
                    apq += a.at(r, p) * a.at(r, q);
                }
                if apq.abs() <= 1e-15 * (app * aqq).sqrt().max(f64::MIN_POSITIVE) {
                    continue;
                }
                rotated = true;
                let theta = 0.5 * (aqq - app) / apq;
                let t = theta.signum() / (theta.abs() + theta.hypot(1.0));
                let c = 1.0 / t.hypot(1.0);
                let s = t * c;
                for r in 0..rows {
                    let vp = a.at(r, p);
                    let vq = a.at(r, q);
                    a.set(r, p, c * vp - s * vq);
                    a.set(r, q, s * vp + c * vq);
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = (0..n)
        .map(|c| (0..rows).map(|r| a.at(r, c) * a.at(r, c)).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    sv
}

// ---------------------------------------------------------------------------
// Planted-spectrum pencils
// ---------------------------------------------------------------------------

pub struct PlantedPencil {
    pub a: Grid,
    pub b: Grid,
    /// Ground-truth eigenvalues, unordered.
    pub eigenvalues: Vec<Complex64>,
}

/// Random orthogonal matrix: Gram-Schmidt (two passes) on a random square.
pub fn random_orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Grid {
    let mut m = Grid::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    for _ in 0..2 {
        for c in 0..n {
            for k in 0..c {
                let dot: f64 = (0..n).map(|r| m.at(r, c) * m.at(r, k)).sum();
                for r in 0..n {
                    let v = m.at(r, c) - dot * m.at(r, k);
                    m.set(r, c, v);
                }
            }
            let nrm: f64 = (0..n).map(|r| m.at(r, c) * m.at(r, c)).sum::<f64>().sqrt();
            for r in 0..n {
                let v = m.at(r, c) / nrm;
                m.set(r, c, v);
            }
        }
    }
    m
}

/// Build a pencil A = Q S Z^T, B = Q T Z^T with a prescribed well-separated
/// spectrum (pairwise gaps >= 0.3) and a well-conditioned triangular T, so
/// ground truth is known to near machine precision.
pub fn planted_pencil(rng: &mut ChaCha8Rng, n: usize) -> PlantedPencil {
    enum Block {
        Real(f64),
        Pair(f64, f64),
    }
    let mut blocks: Vec<Block> = Vec::new();
    let mut lams: Vec<Complex64> = Vec::new();
    let separated = |cand: Complex64, lams: &[Complex64]| {
        lams.iter().all(|l| (cand - l).norm() >= 0.3)
    };
    while lams.len() < n {
        if n - lams.len() >= 2 && rng.random_bool(0.4) {
            loop {
                let re = rng.random_range(-2.5..2.5);
                let im = rng.random_range(0.35..2.0);
                let c1 = Complex64::new(re, im);
                let c2 = Complex64::new(re, -im);
                if separated(c1, &lams) && separated(c2, &lams) {
                    blocks.push(Block::Pair(re, im));
                    lams.push(c1);
                    lams.push(c2);
                    break;
                }
            }
        } else {
            loop {
                let l = Complex64::new(rng.random_range(-3.0..3.0), 0.0);
                if separated(l, &lams) {
                    blocks.push(Block::Real(l.re));
                    lams.push(l);
                    break;
                }
            }
        }
    }

    let mut s = Grid::from_fn(n, n, |r, c| if c > r { rng.random_range(-0.5..0.5) } else { 0.0 });
    let mut t = Grid::from_fn(n, n, |r, c| if c > r { rng.random_range(-0.3..0.3) } else { 0.0 });
    let mut i = 0;
    for block in &blocks {
        match *block {
            Block::Real(l) => {
                let tii = rng.random_range(0.7..1.5);
                t.set(i, i, tii);
                s.set(i, i, l * tii);
                i += 1;
            }
            Block::Pair(re, im) => {
                // S2 = R T2 with R the scaled rotation for re +/- i*im, so
                // S2 T2^{-1} has exactly that conjugate pair.
                let t1 = rng.random_range(0.7..1.5);
                let t2 = rng.random_range(0.7..1.5);
                let t01 = t.at(i, i + 1);
                t.set(i, i, t1);
                t.set(i + 1, i + 1, t2);
                s.set(i, i, re * t1);
                s.set(i, i + 1, re * t01 + im * t2);
                s.set(i + 1, i, -im * t1);
                s.set(i + 1, i + 1, -im * t01 + re * t2);
                i += 2;
            }
        }
    }

    let q = random_orthogonal(rng, n);
    let z = random_orthogonal(rng, n);
    let a = q.matmul(&s).matmul(&z.transpose());
    let b = q.matmul(&t).matmul(&z.transpose());
    PlantedPencil { a, b, eigenvalues: lams }
}
