//! Weight initialization, regularization, spectral normalization, and the
//! Adam optimizer. Weight tensors of rank > 2 are treated as matrices with
//! the leading dimension as rows and everything else flattened into columns
//! (the usual convention for normalizing convolution kernels).

use super::tensor::Tensor;
use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

/// Matrix view dims for a parameter tensor: (rows, cols) with trailing
/// dimensions flattened.
fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    let rows = shape[0];
    let cols: usize = shape[1..].iter().product();
    (rows, cols.max(1))
}

// ---------------------------------------------------------------------------
// Orthogonal initialization
// ---------------------------------------------------------------------------

/// Draw a Gaussian matrix and orthonormalize so the smaller-dimension Gram
/// matrix equals gain^2 * I: rows <= cols gives orthonormal rows, otherwise
/// orthonormal columns. Uses modified Gram-Schmidt with a second
/// re-orthogonalization pass; column signs are fixed by the sign of the
/// diagonal projection so the result is a deterministic function of the
/// RNG stream.
pub fn orthogonal_init<R: Rng>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Tensor {
    assert!(rows >= 1 && cols >= 1);
    let (tall_r, tall_c) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    // columns of q: tall_c orthonormal vectors in R^tall_r
    let mut q = vec![vec![0.0f64; tall_r]; tall_c];
    for col in q.iter_mut() {
        for v in col.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
    }
    for j in 0..tall_c {
        loop {
            for _pass in 0..2 {
                for i in 0..j {
                    let qi = q[i].clone();
                    let d: f64 = q[j].iter().zip(&qi).map(|(a, b)| a * b).sum();
                    for (v, &u) in q[j].iter_mut().zip(&qi) {
                        *v -= d * u;
                    }
                }
            }
            let norm = q[j].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-8 {
                // sign convention: first nonzero-ish entry positive
                let lead = q[j].iter().copied().find(|v| v.abs() > 1e-12 * norm).unwrap_or(1.0);
                let s = if lead < 0.0 { -1.0 / norm } else { 1.0 / norm };
                for v in q[j].iter_mut() {
                    *v *= s;
                }
                break;
            }
            // degenerate draw (measure zero): redraw this column
            for v in q[j].iter_mut() {
                *v = rng.sample(StandardNormal);
            }
        }
    }
    let mut out = Tensor::zeros(&[rows, cols]);
    for r in 0..rows {
        for c in 0..cols {
            let v = if rows >= cols { q[c][r] } else { q[r][c] };
            out.values_mut()[r * cols + c] = gain * v;
        }
    }
    out
}

/// Orthogonally initialize a parameter tensor through its matrix view.
pub fn orthogonal_init_tensor<R: Rng>(shape: &[usize], gain: f64, rng: &mut R) -> Tensor {
    let (r, c) = matrix_dims(shape);
    let m = orthogonal_init(r, c, gain, rng);
    m.reshaped(shape).unwrap()
}

// ---------------------------------------------------------------------------
// Orthogonal regularization
// ---------------------------------------------------------------------------

/// Off-diagonal Gram penalty beta * ||W^T W (x) (1 - I)||_F^2 with its
/// analytic gradient 4 * beta * W * offdiag(W^T W), both through the matrix
/// view of the tensor.
pub fn orthogonal_regularizer(w: &Tensor, beta: f64) -> (f64, Tensor) {
    let (r, c) = matrix_dims(w.shape());
    let wv = w.values();
    // gram = W^T W (c x c), off-diagonal only
    let mut gram = vec![0.0f64; c * c];
    for k in 0..r {
        let row = &wv[k * c..(k + 1) * c];
        for i in 0..c {
            let a = row[i];
            if a == 0.0 {
                continue;
            }
            let grow = &mut gram[i * c..(i + 1) * c];
            for (g, &b) in grow.iter_mut().zip(row) {
                *g += a * b;
            }
        }
    }
    for i in 0..c {
        gram[i * c + i] = 0.0;
    }
    let penalty: f64 = beta * gram.iter().map(|g| g * g).sum::<f64>();
    // grad = 4 beta W G with G symmetric, zero diagonal
    let mut grad = Tensor::zeros(w.shape());
    let gv = grad.values_mut();
    for k in 0..r {
        let row = &wv[k * c..(k + 1) * c];
        let orow = &mut gv[k * c..(k + 1) * c];
        for (j, o) in orow.iter_mut().enumerate() {
            let mut acc = 0.0;
            for i in 0..c {
                acc += row[i] * gram[i * c + j];
            }
            *o = 4.0 * beta * acc;
        }
    }
    (penalty, grad)
}

// ---------------------------------------------------------------------------
// Spectral normalization
// ---------------------------------------------------------------------------

/// Persistent power-iteration state for one weight matrix. Each normalize
/// call in training advances the iteration by exactly one step; inference
/// reuses the stored vectors so repeated forward passes are bitwise
/// identical.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralNorm {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl SpectralNorm {
    pub fn new<R: Rng>(shape: &[usize], rng: &mut R) -> Self {
        let (r, c) = matrix_dims(shape);
        let mut u: Vec<f64> = (0..r).map(|_| rng.sample(StandardNormal)).collect();
        normalize_in_place(&mut u);
        SpectralNorm { u, v: vec![0.0; c] }
    }

    /// Normalize `w` by its power-iteration largest singular value.
    /// `advance` runs one u/v update first (training); without it the
    /// stored vectors are used as-is (inference). Returns (w/sigma, sigma).
    pub fn normalize(&mut self, w: &Tensor, advance: bool) -> Result<(Tensor, f64)> {
        let (r, c) = matrix_dims(w.shape());
        let wv = w.values();
        if advance {
            // v = normalize(W^T u)
            let mut v = vec![0.0f64; c];
            for k in 0..r {
                let uk = self.u[k];
                if uk == 0.0 {
                    continue;
                }
                let row = &wv[k * c..(k + 1) * c];
                for (vv, &wkc) in v.iter_mut().zip(row) {
                    *vv += uk * wkc;
                }
            }
            if !normalize_in_place(&mut v) {
                return Err(Error::ZeroMatrix);
            }
            // u = normalize(W v)
            let mut u = vec![0.0f64; r];
            for (k, uv) in u.iter_mut().enumerate() {
                let row = &wv[k * c..(k + 1) * c];
                *uv = row.iter().zip(&v).map(|(a, b)| a * b).sum();
            }
            if !normalize_in_place(&mut u) {
                return Err(Error::ZeroMatrix);
            }
            self.u = u;
            self.v = v;
        } else if self.v.iter().all(|&v| v == 0.0) {
            // never advanced: fall back to one bootstrap step
            return self.normalize(w, true);
        }
        // sigma = u^T W v
        let mut sigma = 0.0;
        for k in 0..r {
            let row = &wv[k * c..(k + 1) * c];
            let uk = self.u[k];
            if uk == 0.0 {
                continue;
            }
            sigma += uk * row.iter().zip(&self.v).map(|(a, b)| a * b).sum::<f64>();
        }
        if sigma == 0.0 || !sigma.is_finite() {
            return Err(Error::ZeroMatrix);
        }
        let mut wn = w.clone();
        wn.scale(1.0 / sigma);
        Ok((wn, sigma))
    }

    /// Pull a gradient on the normalized weight back to the raw weight:
    /// g_w = (g - <g, w_bar> u v^T) / sigma.
    pub fn grad_raw(&self, g_wbar: &Tensor, w_bar: &Tensor, sigma: f64) -> Tensor {
        sn_grad_raw(g_wbar, w_bar, sigma, &self.u, &self.v)
    }
}

/// [`SpectralNorm::grad_raw`] against an explicit (sigma, u, v) snapshot;
/// forward traces record the snapshot so the transform stays correct even
/// if the persistent state advances before backward runs.
pub fn sn_grad_raw(g_wbar: &Tensor, w_bar: &Tensor, sigma: f64, u: &[f64], v: &[f64]) -> Tensor {
    let (r, c) = matrix_dims(w_bar.shape());
    let inner = g_wbar.dot(w_bar);
    let mut out = g_wbar.clone();
    let ov = out.values_mut();
    for k in 0..r {
        let uk = u[k];
        let row = &mut ov[k * c..(k + 1) * c];
        for (o, &vv) in row.iter_mut().zip(v) {
            *o = (*o - inner * uk * vv) / sigma;
        }
    }
    out
}

fn normalize_in_place(v: &mut [f64]) -> bool {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return false;
    }
    for x in v.iter_mut() {
        *x /= n;
    }
    true
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Bias-corrected Adam over an ordered parameter list. With beta1 = 0 the
/// first moment is the raw gradient and the update reduces to
/// lr * g / (sqrt(v_hat) + eps).
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &[&Tensor], beta1: f64, beta2: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) {
        assert_eq!(params.len(), grads.len(), "adam param/grad count");
        assert_eq!(params.len(), self.m.len(), "adam state count");
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.shape(), g.shape(), "adam grad shape");
            for ((pv, &gv), (mv, vv)) in p
                .values_mut()
                .iter_mut()
                .zip(g.values())
                .zip(m.values_mut().iter_mut().zip(v.values_mut().iter_mut()))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / b1t;
                let vhat = *vv / b2t;
                *pv -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gram_err(w: &Tensor, gain: f64) -> f64 {
        let (r, c) = matrix_dims(w.shape());
        let small = r.min(c);
        // G = W W^T if wide else W^T W
        let mut worst = 0.0f64;
        for i in 0..small {
            for j in 0..small {
                let mut acc = 0.0;
                if r <= c {
                    for k in 0..c {
                        acc += w.values()[i * c + k] * w.values()[j * c + k];
                    }
                } else {
                    for k in 0..r {
                        acc += w.values()[k * c + i] * w.values()[k * c + j];
                    }
                }
                let want = if i == j { gain * gain } else { 0.0 };
                worst = worst.max((acc - want).abs());
            }
        }
        worst
    }

    #[test]
    fn orthogonal_init_satisfies_gram_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        assert!(gram_err(&orthogonal_init(8, 8, 1.0, &mut rng), 1.0) <= 1e-5);
        assert!(gram_err(&orthogonal_init(4, 8, 1.0, &mut rng), 1.0) <= 1e-5);
        assert!(gram_err(&orthogonal_init(8, 4, 2.0, &mut rng), 2.0) <= 1e-5);
    }

    #[test]
    fn regularizer_hand_value_and_zero_on_orthogonal() {
        let ones = Tensor::from_vec(&[2, 2], vec![1.0; 4]).unwrap();
        let (p, _) = orthogonal_regularizer(&ones, 1.0);
        assert!((p - 8.0).abs() <= 1e-12, "all-ones 2x2 penalty {p}");
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let q = orthogonal_init(6, 6, 1.0, &mut rng);
        let (p, _) = orthogonal_regularizer(&q, 1.0);
        assert!(p <= 1e-8, "orthogonal penalty {p}");
    }

    #[test]
    fn regularizer_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut w = Tensor::zeros(&[3, 4]);
        for v in w.values_mut() {
            *v = rng.sample::<f64, _>(StandardNormal);
        }
        let (_, grad) = orthogonal_regularizer(&w, 0.7);
        let h = 1e-5;
        for i in 0..w.len() {
            let mut wp = w.clone();
            wp.values_mut()[i] += h;
            let mut wm = w.clone();
            wm.values_mut()[i] -= h;
            let fd = (orthogonal_regularizer(&wp, 0.7).0 - orthogonal_regularizer(&wm, 0.7).0)
                / (2.0 * h);
            let g = grad.values()[i];
            assert!(
                (fd - g).abs() <= 1e-5 * g.abs().max(1.0),
                "entry {i}: fd {fd} vs analytic {g}"
            );
        }
    }

    #[test]
    fn spectral_norm_recovers_known_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let w = Tensor::from_vec(&[2, 2], vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        let mut sn = SpectralNorm::new(&[2, 2], &mut rng);
        let mut result = (Tensor::zeros(&[2, 2]), 0.0);
        for _ in 0..20 {
            result = sn.normalize(&w, true).unwrap();
        }
        let (wn, sigma) = result;
        assert!((sigma - 3.0).abs() <= 1e-3, "sigma {sigma}");
        assert!((wn.values()[0] - 1.0).abs() <= 1e-3);
        assert!((wn.values()[3] - 1.0 / 3.0).abs() <= 1e-3);
    }

    #[test]
    fn spectral_norm_rejects_zero_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let w = Tensor::zeros(&[3, 3]);
        let mut sn = SpectralNorm::new(&[3, 3], &mut rng);
        assert!(matches!(sn.normalize(&w, true), Err(Error::ZeroMatrix)));
    }

    #[test]
    fn adam_first_step_matches_hand_computation() {
        let mut p = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let g = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let mut adam = Adam::new(&[&p], 0.0, 0.9);
        adam.step(&mut [&mut p], &[g], 2e-4);
        let want = -2e-4 / (1.0f64.sqrt() + 1e-8);
        assert!((p.values()[0] - want).abs() <= 1e-18, "update {}", p.values()[0]);
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut p = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let mut adam = Adam::new(&[&p], 0.0, 0.9);
        for _ in 0..100 {
            let g = Tensor::from_vec(&[1], vec![2.0 * p.values()[0]]).unwrap();
            adam.step(&mut [&mut p], &[g], 1e-2);
        }
        assert!(p.values()[0].abs() < 1.0, "no progress: {}", p.values()[0]);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = Tensor::from_vec(&[2], vec![0.3, -0.7]).unwrap();
        let g = Tensor::zeros(&[2]);
        let mut adam = Adam::new(&[&p], 0.0, 0.9);
        adam.step(&mut [&mut p], &[g], 2e-4);
        assert_eq!(p.values(), &[0.3, -0.7]);
    }
}
