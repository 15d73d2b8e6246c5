//! Real QZ iteration: orthogonal reduction of a matrix pair (A, B) to
//! generalized Schur form A = Q S Z^T, B = Q T Z^T with S quasi-triangular
//! (1x1 and 2x2 diagonal blocks) and T upper triangular.
//!
//! The pipeline is the classical one: Householder QR of B, simultaneous
//! Hessenberg-triangular reduction, then implicit double-shift sweeps with
//! deflation. A negligible diagonal of T signals an infinite eigenvalue and
//! is chased to the window edge with rotation pairs before sweeping resumes,
//! so singular B never stalls the iteration.

use num_complex::Complex64;

use crate::grid::Grid;
use crate::{Error, Result};

pub(crate) struct QzOutput {
    pub s: Grid,
    pub t: Grid,
    pub q: Grid,
    pub z: Grid,
    /// Eigenvalue numerators in factorization (block) order.
    pub alpha: Vec<Complex64>,
    /// Eigenvalue denominators, nonnegative, zero for infinite eigenvalues.
    pub beta: Vec<f64>,
}

fn norm2(x: &[f64]) -> f64 {
    let m = x.iter().fold(0.0_f64, |acc, &v| acc.max(v.abs()));
    if m == 0.0 {
        return 0.0;
    }
    let s: f64 = x
        .iter()
        .map(|&v| {
            let u = v / m;
            u * u
        })
        .sum();
    m * s.sqrt()
}

/// Householder reflection H = I - tau v v^T with v[pivot] = 1. H is
/// symmetric and orthogonal, so the same data serves H and H^T.
struct Reflector {
    tau: f64,
    v: Vec<f64>,
}

impl Reflector {
    /// H x = (r, 0, ..., 0): annihilates everything below the first entry.
    fn zero_tail(x: &[f64]) -> Reflector {
        let k = x.len();
        let mut v = vec![0.0; k];
        v[0] = 1.0;
        let tail = norm2(&x[1..]);
        if tail == 0.0 {
            return Reflector { tau: 0.0, v };
        }
        let alpha = x[0];
        let beta = -alpha.hypot(tail).copysign(alpha);
        let tau = (beta - alpha) / beta;
        let scale = 1.0 / (alpha - beta);
        for i in 1..k {
            v[i] = x[i] * scale;
        }
        Reflector { tau, v }
    }

    /// H x = (0, ..., 0, r): annihilates everything above the last entry.
    fn zero_head(x: &[f64]) -> Reflector {
        let k = x.len();
        let mut v = vec![0.0; k];
        v[k - 1] = 1.0;
        let head = norm2(&x[..k - 1]);
        if head == 0.0 {
            return Reflector { tau: 0.0, v };
        }
        let alpha = x[k - 1];
        let beta = -alpha.hypot(head).copysign(alpha);
        let tau = (beta - alpha) / beta;
        let scale = 1.0 / (alpha - beta);
        for i in 0..k - 1 {
            v[i] = x[i] * scale;
        }
        Reflector { tau, v }
    }

    /// M <- H M on rows row0..row0+len, restricted to `cols`.
    fn apply_left(&self, m: &mut Grid, row0: usize, cols: std::ops::Range<usize>) {
        if self.tau == 0.0 {
            return;
        }
        for c in cols {
            let mut s = 0.0;
            for (j, &vj) in self.v.iter().enumerate() {
                s += vj * m.at(row0 + j, c);
            }
            s *= self.tau;
            for (j, &vj) in self.v.iter().enumerate() {
                let cur = m.at(row0 + j, c);
                m.set(row0 + j, c, cur - s * vj);
            }
        }
    }

    /// M <- M H on columns col0..col0+len, restricted to `rows`.
    fn apply_right(&self, m: &mut Grid, col0: usize, rows: std::ops::Range<usize>) {
        if self.tau == 0.0 {
            return;
        }
        for r in rows {
            let mut s = 0.0;
            for (j, &vj) in self.v.iter().enumerate() {
                s += m.at(r, col0 + j) * vj;
            }
            s *= self.tau;
            for (j, &vj) in self.v.iter().enumerate() {
                let cur = m.at(r, col0 + j);
                m.set(r, col0 + j, cur - s * vj);
            }
        }
    }
}

/// Eigenvalue content of the 2x2 trailing-quotient block at (i, i),
/// computed shift-relative for accuracy. Requires t(i,i), t(i+1,i+1) != 0.
enum BlockEigen {
    Real { l1: f64, l2: f64 },
    /// Conjugate pair re +/- i*im with im > 0.
    Complex { re: f64, im: f64 },
}

fn block_eigen(a: &Grid, b: &Grid, i: usize) -> BlockEigen {
    let (a00, a01) = (a.at(i, i), a.at(i, i + 1));
    let (a10, a11) = (a.at(i + 1, i), a.at(i + 1, i + 1));
    let (b00, b01, b11) = (b.at(i, i), b.at(i, i + 1), b.at(i + 1, i + 1));
    let ib00 = 1.0 / b00;
    let ib11 = 1.0 / b11;
    let s1 = a00 * ib00;
    let s2 = a11 * ib11;
    // Work relative to the smaller quotient: with C = A - shift*B the block
    // pencil reduces to mu^2 - 2p mu - q = 0 for mu = lambda - shift.
    let (shift, p, q) = if s1.abs() <= s2.abs() {
        let c11 = a11 - s1 * b11;
        let c01 = a01 - s1 * b01;
        let p = 0.5 * (c11 * ib11 - b01 * a10 * ib00 * ib11);
        let q = c01 * a10 * ib00 * ib11;
        (s1, p, q)
    } else {
        let c00 = a00 - s2 * b00;
        let c01 = a01 - s2 * b01;
        let p = 0.5 * (c00 * ib00 - b01 * a10 * ib00 * ib11);
        let q = c01 * a10 * ib00 * ib11;
        (s2, p, q)
    };
    let r = p * p + q;
    if r >= 0.0 {
        let root = r.sqrt().copysign(p);
        let mu1 = p + root;
        let l1 = shift + mu1;
        // Second root from the product mu1*mu2 = -q.
        let l2 = if mu1 != 0.0 { shift - q / mu1 } else { shift };
        BlockEigen::Real { l1, l2 }
    } else {
        BlockEigen::Complex { re: shift + p, im: (-r).sqrt() }
    }
}

struct State {
    n: usize,
    a: Grid,
    b: Grid,
    q: Grid,
    z: Grid,
    atol: f64,
    btol: f64,
}

impl State {
    fn new(a: Grid, b: Grid) -> State {
        let n = a.rows();
        let atol = (f64::EPSILON * a.frobenius_norm()).max(f64::MIN_POSITIVE);
        let btol = (f64::EPSILON * b.frobenius_norm()).max(f64::MIN_POSITIVE);
        State { n, a, b, q: Grid::identity(n), z: Grid::identity(n), atol, btol }
    }

    /// Householder QR of B applied across the pencil: B becomes triangular.
    fn triangularize_b(&mut self) {
        let n = self.n;
        for c in 0..n.saturating_sub(1) {
            let x: Vec<f64> = (c..n).map(|r| self.b.at(r, c)).collect();
            let h = Reflector::zero_tail(&x);
            h.apply_left(&mut self.b, c, c..n);
            h.apply_left(&mut self.a, c, 0..n);
            h.apply_right(&mut self.q, c, 0..n);
            for r in c + 1..n {
                self.b.set(r, c, 0.0);
            }
        }
    }

    /// Reduce A to upper Hessenberg with row pairs, restoring B's triangle
    /// with column pairs after each step.
    fn hessenberg(&mut self) {
        let n = self.n;
        if n < 3 {
            return;
        }
        for c in 0..n - 2 {
            for r in ((c + 2)..n).rev() {
                let h = Reflector::zero_tail(&[self.a.at(r - 1, c), self.a.at(r, c)]);
                h.apply_left(&mut self.a, r - 1, c..n);
                h.apply_left(&mut self.b, r - 1, r - 1..n);
                h.apply_right(&mut self.q, r - 1, 0..n);
                self.a.set(r, c, 0.0);
                let g = Reflector::zero_head(&[self.b.at(r, r - 1), self.b.at(r, r)]);
                g.apply_right(&mut self.a, r - 1, 0..n);
                g.apply_right(&mut self.b, r - 1, 0..r + 1);
                g.apply_right(&mut self.z, r - 1, 0..n);
                self.b.set(r, r - 1, 0.0);
            }
        }
    }

    /// Is the subdiagonal a(i, i-1) negligible against its neighborhood?
    fn subdiag_negligible(&self, i: usize) -> bool {
        let v = self.a.at(i, i - 1).abs();
        if v == 0.0 {
            return true;
        }
        let local = self.a.at(i - 1, i - 1).abs() + self.a.at(i, i).abs();
        let tol = if local > 0.0 { f64::EPSILON * local } else { self.atol };
        v <= tol.max(f64::MIN_POSITIVE)
    }

    /// Main loop: deflate converged blocks bottom-up, clearing infinite
    /// eigenvalues as they surface, sweeping otherwise.
    fn iterate(&mut self) -> Result<()> {
        let n = self.n;
        let cap = 30 * n.max(1);
        let mut sweeps = 0usize;
        let mut stall = 0usize;
        let mut hi = n;
        while hi > 1 {
            for i in 1..hi {
                if self.a.at(i, i - 1) != 0.0 && self.subdiag_negligible(i) {
                    self.a.set(i, i - 1, 0.0);
                }
            }
            let mut lo = hi - 1;
            while lo > 0 && self.a.at(lo, lo - 1) != 0.0 {
                lo -= 1;
            }
            if hi - lo <= 2 {
                // Unit or pair block: resolved in the extraction pass.
                hi = lo;
                stall = 0;
                continue;
            }
            if let Some(j) = (lo..hi).find(|&j| self.b.at(j, j).abs() <= self.btol) {
                self.deflate_infinite(lo, hi, j);
                stall = 0;
                continue;
            }
            if sweeps >= cap {
                return Err(Error::NonConvergence(cap));
            }
            sweeps += 1;
            stall += 1;
            self.double_shift_sweep(lo, hi, stall);
            self.clean(lo, hi);
        }
        Ok(())
    }

    /// Handle a negligible t(j, j) inside the active window [lo, hi).
    ///
    /// At the top edge a row rotation splits a unit block immediately. In
    /// the interior the zero is chased down the diagonal of T (each row
    /// rotation pushes it one place; a column rotation repairs the bulge it
    /// leaves in A), then a final column rotation splits a unit block at the
    /// bottom. Every call therefore retires exactly one infinite eigenvalue,
    /// so the iteration cannot cycle on singular B.
    fn deflate_infinite(&mut self, lo: usize, hi: usize, j: usize) {
        let n = self.n;
        self.b.set(j, j, 0.0);
        if j == lo {
            let h = Reflector::zero_tail(&[self.a.at(lo, lo), self.a.at(lo + 1, lo)]);
            h.apply_left(&mut self.a, lo, lo..n);
            h.apply_left(&mut self.b, lo, lo + 1..n);
            h.apply_right(&mut self.q, lo, 0..n);
            self.a.set(lo + 1, lo, 0.0);
            return;
        }
        for jch in j..hi - 1 {
            let h = Reflector::zero_tail(&[
                self.b.at(jch, jch + 1),
                self.b.at(jch + 1, jch + 1),
            ]);
            h.apply_left(&mut self.b, jch, jch + 1..n);
            h.apply_left(&mut self.a, jch, jch - 1..n);
            h.apply_right(&mut self.q, jch, 0..n);
            self.b.set(jch + 1, jch + 1, 0.0);
            let g = Reflector::zero_head(&[
                self.a.at(jch + 1, jch - 1),
                self.a.at(jch + 1, jch),
            ]);
            g.apply_right(&mut self.a, jch - 1, 0..jch + 2);
            g.apply_right(&mut self.b, jch - 1, 0..jch + 1);
            g.apply_right(&mut self.z, jch - 1, 0..n);
            self.a.set(jch + 1, jch - 1, 0.0);
        }
        let g = Reflector::zero_head(&[self.a.at(hi - 1, hi - 2), self.a.at(hi - 1, hi - 1)]);
        g.apply_right(&mut self.a, hi - 2, 0..hi);
        g.apply_right(&mut self.b, hi - 2, 0..hi - 1);
        g.apply_right(&mut self.z, hi - 2, 0..n);
        self.a.set(hi - 1, hi - 2, 0.0);
    }

    /// One implicit double-shift sweep over the window [lo, hi), hi-lo >= 3.
    /// Shifts are the eigenvalues of the trailing 2x2 quotient, encoded as
    /// the polynomial p_a l^2 + p_b l + p_c = -det(A2 - l B2) so no division
    /// by small T diagonals occurs.
    fn double_shift_sweep(&mut self, lo: usize, hi: usize, stall: usize) {
        let n = self.n;
        let i = hi - 2;
        let (b00, b01, b11) = (self.b.at(i, i), self.b.at(i, i + 1), self.b.at(i + 1, i + 1));
        let (a00, a01) = (self.a.at(i, i), self.a.at(i, i + 1));
        let (a10, a11) = (self.a.at(i + 1, i), self.a.at(i + 1, i + 1));
        let p_a = -b00 * b11;
        let mut p_b = a11 * b00 + b11 * a00 - b01 * a10;
        let mut p_c = a01 * a10 - a00 * a11;
        if stall % 14 == 0 {
            // Exceptional shift: deterministic perturbation to break the
            // limit cycles that symmetric data can fall into.
            let s = 0.05 * (stall / 14) as f64;
            p_b += s * (p_a.abs() + p_c.abs());
            p_c *= 1.0 + s;
        }

        // First column of the shift polynomial applied to A B^{-1},
        // restricted to the three rows that are nonzero for Hessenberg A.
        let l = lo;
        let ib00 = 1.0 / self.b.at(l, l);
        let ib11 = 1.0 / self.b.at(l + 1, l + 1);
        let ib01 = -self.b.at(l, l + 1) * ib00 * ib11;
        let ab = [self.a.at(l, l) * ib00, self.a.at(l + 1, l) * ib00];
        let w0 = ib00 * ab[0] + ib01 * ab[1];
        let w1 = ib11 * ab[1];
        let abab = [
            self.a.at(l, l) * w0 + self.a.at(l, l + 1) * w1,
            self.a.at(l + 1, l) * w0 + self.a.at(l + 1, l + 1) * w1,
            self.a.at(l + 2, l + 1) * w1,
        ];
        let x = [
            p_c + p_b * ab[0] + p_a * abab[0],
            p_b * ab[1] + p_a * abab[1],
            p_a * abab[2],
        ];
        let h = Reflector::zero_tail(&x);
        h.apply_left(&mut self.a, l, l..n);
        h.apply_left(&mut self.b, l, l..n);
        h.apply_right(&mut self.q, l, 0..n);

        for k in l..hi - 3 {
            // Restore B's triangle in rows k+1, k+2...
            let g3 = Reflector::zero_head(&[
                self.b.at(k + 2, k),
                self.b.at(k + 2, k + 1),
                self.b.at(k + 2, k + 2),
            ]);
            g3.apply_right(&mut self.a, k, 0..k + 4);
            g3.apply_right(&mut self.b, k, 0..k + 3);
            g3.apply_right(&mut self.z, k, 0..n);
            self.b.set(k + 2, k, 0.0);
            self.b.set(k + 2, k + 1, 0.0);
            let g2 = Reflector::zero_head(&[self.b.at(k + 1, k), self.b.at(k + 1, k + 1)]);
            g2.apply_right(&mut self.a, k, 0..k + 4);
            g2.apply_right(&mut self.b, k, 0..k + 2);
            g2.apply_right(&mut self.z, k, 0..n);
            self.b.set(k + 1, k, 0.0);
            // ...then push A's bulge one column right.
            let h3 = Reflector::zero_tail(&[
                self.a.at(k + 1, k),
                self.a.at(k + 2, k),
                self.a.at(k + 3, k),
            ]);
            h3.apply_left(&mut self.a, k + 1, k..n);
            h3.apply_left(&mut self.b, k + 1, k..n);
            h3.apply_right(&mut self.q, k + 1, 0..n);
            self.a.set(k + 2, k, 0.0);
            self.a.set(k + 3, k, 0.0);
        }

        // Tail of the sweep: the bulge narrows to a 2x2 corner.
        let k = hi - 3;
        let g3 = Reflector::zero_head(&[
            self.b.at(k + 2, k),
            self.b.at(k + 2, k + 1),
            self.b.at(k + 2, k + 2),
        ]);
        g3.apply_right(&mut self.a, k, 0..hi);
        g3.apply_right(&mut self.b, k, 0..hi);
        g3.apply_right(&mut self.z, k, 0..n);
        self.b.set(k + 2, k, 0.0);
        self.b.set(k + 2, k + 1, 0.0);
        let g2 = Reflector::zero_head(&[self.b.at(k + 1, k), self.b.at(k + 1, k + 1)]);
        g2.apply_right(&mut self.a, k, 0..hi);
        g2.apply_right(&mut self.b, k, 0..k + 2);
        g2.apply_right(&mut self.z, k, 0..n);
        self.b.set(k + 1, k, 0.0);
        let h2 = Reflector::zero_tail(&[self.a.at(k + 1, k), self.a.at(k + 2, k)]);
        h2.apply_left(&mut self.a, k + 1, k..n);
        h2.apply_left(&mut self.b, k + 1, k + 1..n);
        h2.apply_right(&mut self.q, k + 1, 0..n);
        self.a.set(k + 2, k, 0.0);
        let gf = Reflector::zero_head(&[self.b.at(k + 2, k + 1), self.b.at(k + 2, k + 2)]);
        gf.apply_right(&mut self.a, k + 1, 0..hi);
        gf.apply_right(&mut self.b, k + 1, 0..hi);
        gf.apply_right(&mut self.z, k + 1, 0..n);
        self.b.set(k + 2, k + 1, 0.0);
    }

    /// Flush below-structure entries in the window to exact zeros; the
    /// sweeps maintain them analytically but this keeps the invariant
    /// independent of rounding pattern.
    fn clean(&mut self, lo: usize, hi: usize) {
        for c in lo..hi {
            for r in (c + 2).max(lo)..hi {
                self.a.set(r, c, 0.0);
            }
            for r in (c + 1).max(lo)..hi {
                self.b.set(r, c, 0.0);
            }
        }
    }

    /// Resolve every remaining 2x2 block: split blocks whose T part is
    /// nearly singular (one infinite eigenvalue each) and blocks with a pair
    /// of real eigenvalues; leave genuine complex-pair blocks in place.
    fn split_blocks(&mut self) {
        let n = self.n;
        let mut i = 0;
        while i + 1 < n {
            if self.a.at(i + 1, i) == 0.0 {
                i += 1;
                continue;
            }
            let b00 = self.b.at(i, i);
            let b11 = self.b.at(i + 1, i + 1);
            if b11.abs() <= self.btol {
                self.b.set(i + 1, i + 1, 0.0);
                let g = Reflector::zero_head(&[self.a.at(i + 1, i), self.a.at(i + 1, i + 1)]);
                g.apply_right(&mut self.a, i, 0..i + 2);
                g.apply_right(&mut self.b, i, 0..i + 1);
                g.apply_right(&mut self.z, i, 0..n);
                self.a.set(i + 1, i, 0.0);
                continue;
            }
            if b00.abs() <= self.btol {
                self.b.set(i, i, 0.0);
                let h = Reflector::zero_tail(&[self.a.at(i, i), self.a.at(i + 1, i)]);
                h.apply_left(&mut self.a, i, i..n);
                h.apply_left(&mut self.b, i, i + 1..n);
                h.apply_right(&mut self.q, i, 0..n);
                self.a.set(i + 1, i, 0.0);
                continue;
            }
            match block_eigen(&self.a, &self.b, i) {
                BlockEigen::Complex { .. } => {
                    i += 2;
                }
                BlockEigen::Real { l1, .. } => {
                    self.split_real(i, l1);
                    continue;
                }
            }
        }
    }

    /// Split a 2x2 block with real eigenvalue `lambda`: rotate columns so
    /// e1 spans the eigenvector of (A2 - lambda B2), then one row rotation
    /// (taken from whichever of A, B dominates) clears both subdiagonals.
    fn split_real(&mut self, i: usize, lambda: f64) {
        let n = self.n;
        let e = [
            self.a.at(i, i) - lambda * self.b.at(i, i),
            self.a.at(i, i + 1) - lambda * self.b.at(i, i + 1),
            self.a.at(i + 1, i),
            self.a.at(i + 1, i + 1) - lambda * self.b.at(i + 1, i + 1),
        ];
        let g = if e[0].hypot(e[1]) >= e[2].hypot(e[3]) {
            Reflector::zero_head(&[e[0], e[1]])
        } else {
            Reflector::zero_head(&[e[2], e[3]])
        };
        g.apply_right(&mut self.a, i, 0..i + 2);
        g.apply_right(&mut self.b, i, 0..i + 2);
        g.apply_right(&mut self.z, i, 0..n);
        let na = self.a.at(i, i).hypot(self.a.at(i + 1, i));
        let nb = self.b.at(i, i).hypot(self.b.at(i + 1, i));
        let h = if na >= nb * lambda.abs() {
            Reflector::zero_tail(&[self.a.at(i, i), self.a.at(i + 1, i)])
        } else {
            Reflector::zero_tail(&[self.b.at(i, i), self.b.at(i + 1, i)])
        };
        h.apply_left(&mut self.a, i, i..n);
        h.apply_left(&mut self.b, i, i..n);
        h.apply_right(&mut self.q, i, 0..n);
        self.a.set(i + 1, i, 0.0);
        self.b.set(i + 1, i, 0.0);
    }

    /// Make the triangular factor's diagonal nonnegative by sign flips,
    /// mirrored into Q's columns so the factorization is unchanged.
    fn normalize_t_signs(&mut self) {
        let n = self.n;
        for i in 0..n {
            if self.b.at(i, i) < 0.0 {
                for c in 0..n {
                    self.a.set(i, c, -self.a.at(i, c));
                    self.b.set(i, c, -self.b.at(i, c));
                }
                for r in 0..n {
                    self.q.set(r, i, -self.q.at(r, i));
                }
            }
        }
    }

    /// Read (alpha, beta) pairs off the resolved diagonal. Unit blocks with
    /// a negligible T entry are flushed to exact beta = 0; pair blocks share
    /// beta = sqrt(t00 t11) with exactly conjugate numerators.
    fn read_off(&mut self) -> (Vec<Complex64>, Vec<f64>) {
        let n = self.n;
        let mut alpha = Vec::with_capacity(n);
        let mut beta = Vec::with_capacity(n);
        let mut i = 0;
        while i < n {
            if i + 1 < n && self.a.at(i + 1, i) != 0.0 {
                let bb = (self.b.at(i, i) * self.b.at(i + 1, i + 1)).max(0.0).sqrt();
                match block_eigen(&self.a, &self.b, i) {
                    BlockEigen::Complex { re, im } => {
                        alpha.push(Complex64::new(re * bb, -im * bb));
                        alpha.push(Complex64::new(re * bb, im * bb));
                        beta.push(bb);
                        beta.push(bb);
                    }
                    BlockEigen::Real { l1, l2 } => {
                        // Rounding can land exactly on the parabola; report
                        // the two real values without splitting the block.
                        alpha.push(Complex64::new(l1 * bb, 0.0));
                        alpha.push(Complex64::new(l2 * bb, 0.0));
                        beta.push(bb);
                        beta.push(bb);
                    }
                }
                i += 2;
            } else {
                let mut t = self.b.at(i, i);
                if t.abs() <= self.btol {
                    t = 0.0;
                    self.b.set(i, i, 0.0);
                }
                alpha.push(Complex64::new(self.a.at(i, i), 0.0));
                beta.push(t);
                i += 1;
            }
        }
        (alpha, beta)
    }
}

pub(crate) fn decompose(a: &Grid, b: &Grid) -> Result<QzOutput> {
    let mut st = State::new(a.clone(), b.clone());
    st.triangularize_b();
    st.hessenberg();
    st.iterate()?;
    st.split_blocks();
    st.normalize_t_signs();
    let (alpha, beta) = st.read_off();
    Ok(QzOutput { s: st.a, t: st.b, q: st.q, z: st.z, alpha, beta })
}
