//! Network layers with hand-written adjoints. Every `forward` returns the
//! output plus a cache holding exactly what its `backward` needs; caches own
//! their data (cloned at forward time), so a cache can never go stale by a
//! later parameter update.
//!
//! Feature maps are `[n, c, h, w]`, vectors `[n, d]`. All convolutions are
//! stride 1 with square kernels; spatial reductions happen in the pooling
//! layers. Gradients are exact reverse-mode derivatives, checked against
//! central finite differences in the test suite.

use super::tensor::{matmul, Tensor};

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// [out, in]
    pub w: Tensor,
    /// [out]
    pub b: Tensor,
}

pub struct LinearCache {
    x: Tensor,
    /// Weight actually applied (spectrally normalized when enabled).
    pub(crate) w_used: Tensor,
}

impl Linear {
    pub fn new(out_dim: usize, in_dim: usize) -> Self {
        Linear { w: Tensor::zeros(&[out_dim, in_dim]), b: Tensor::zeros(&[out_dim]) }
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, LinearCache) {
        self.forward_with(&self.w, x)
    }

    /// Forward with an explicit weight (used by spectral normalization,
    /// which substitutes w/sigma at call time).
    pub fn forward_with(&self, w: &Tensor, x: &Tensor) -> (Tensor, LinearCache) {
        let n = x.shape()[0];
        let (o, i) = (w.shape()[0], w.shape()[1]);
        assert_eq!(x.shape()[1], i, "linear input dim");
        let mut y = Tensor::zeros(&[n, o]);
        for r in 0..n {
            let xr = &x.values()[r * i..(r + 1) * i];
            let yr = &mut y.values_mut()[r * o..(r + 1) * o];
            for (oc, yv) in yr.iter_mut().enumerate() {
                let wrow = &w.values()[oc * i..(oc + 1) * i];
                let mut acc = self.b.values()[oc];
                for (a, b) in xr.iter().zip(wrow) {
                    acc += a * b;
                }
                *yv = acc;
            }
        }
        (y, LinearCache { x: x.clone(), w_used: w.clone() })
    }

    /// Returns (grad_x, grad_w, grad_b); grad_w is with respect to the
    /// weight actually applied in the forward.
    pub fn backward(&self, cache: &LinearCache, gy: &Tensor) -> (Tensor, Tensor, Tensor) {
        let n = cache.x.shape()[0];
        let (o, i) = (cache.w_used.shape()[0], cache.w_used.shape()[1]);
        assert_eq!(gy.shape(), &[n, o], "linear grad shape");
        // gw = gy^T x, gb = column sums, gx = gy w
        let mut gw = Tensor::zeros(&[o, i]);
        let mut gb = Tensor::zeros(&[o]);
        for r in 0..n {
            let xr = &cache.x.values()[r * i..(r + 1) * i];
            let gr = &gy.values()[r * o..(r + 1) * o];
            for (oc, &g) in gr.iter().enumerate() {
                gb.values_mut()[oc] += g;
                if g == 0.0 {
                    continue;
                }
                let wrow = &mut gw.values_mut()[oc * i..(oc + 1) * i];
                for (wv, &xv) in wrow.iter_mut().zip(xr) {
                    *wv += g * xv;
                }
            }
        }
        let gx = matmul(gy, &cache.w_used);
        (gx, gw, gb)
    }
}

// ---------------------------------------------------------------------------
// Convolution (stride 1)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// [out_c, in_c, k, k]
    pub w: Tensor,
    /// [out_c]
    pub b: Tensor,
    pub pad: usize,
}

pub struct ConvCache {
    x: Tensor,
    pub(crate) w_used: Tensor,
}

impl Conv2d {
    pub fn new(out_c: usize, in_c: usize, k: usize, pad: usize) -> Self {
        Conv2d { w: Tensor::zeros(&[out_c, in_c, k, k]), b: Tensor::zeros(&[out_c]), pad }
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, ConvCache) {
        self.forward_with(&self.w, x)
    }

    pub fn forward_with(&self, wt: &Tensor, x: &Tensor) -> (Tensor, ConvCache) {
        let [n, ic, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let [oc, ick, k, _] = [wt.shape()[0], wt.shape()[1], wt.shape()[2], wt.shape()[3]];
        assert_eq!(ic, ick, "conv channel mismatch");
        let pad = self.pad;
        let mut y = Tensor::zeros(&[n, oc, h, w]);
        for b in 0..n {
            for o in 0..oc {
                let ybase = ((b * oc) + o) * h * w;
                let bias = self.b.values()[o];
                for v in y.values_mut()[ybase..ybase + h * w].iter_mut() {
                    *v = bias;
                }
                for c in 0..ic {
                    let xbase = ((b * ic) + c) * h * w;
                    for u in 0..k {
                        for vk in 0..k {
                            let wv = wt.values()[(((o * ic) + c) * k + u) * k + vk];
                            if wv == 0.0 {
                                continue;
                            }
                            accumulate_shifted(
                                &mut y.values_mut()[ybase..ybase + h * w],
                                &x.values()[xbase..xbase + h * w],
                                h,
                                w,
                                u as isize - pad as isize,
                                vk as isize - pad as isize,
                                wv,
                            );
                        }
                    }
                }
            }
        }
        (y, ConvCache { x: x.clone(), w_used: wt.clone() })
    }

    pub fn backward(&self, cache: &ConvCache, gy: &Tensor) -> (Tensor, Tensor, Tensor) {
        let x = &cache.x;
        let wt = &cache.w_used;
        let [n, ic, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let [oc, _, k, _] = [wt.shape()[0], wt.shape()[1], wt.shape()[2], wt.shape()[3]];
        let pad = self.pad;
        let mut gx = Tensor::zeros(x.shape());
        let mut gw = Tensor::zeros(wt.shape());
        let mut gb = Tensor::zeros(&[oc]);
        for b in 0..n {
            for o in 0..oc {
                let gybase = ((b * oc) + o) * h * w;
                let gyp = &gy.values()[gybase..gybase + h * w];
                gb.values_mut()[o] += gyp.iter().sum::<f64>();
                for c in 0..ic {
                    let xbase = ((b * ic) + c) * h * w;
                    for u in 0..k {
                        for vk in 0..k {
                            let du = u as isize - pad as isize;
                            let dv = vk as isize - pad as isize;
                            // weight grad: correlation of gy with shifted x
                            let s = dot_shifted(gyp, &x.values()[xbase..xbase + h * w], h, w, du, dv);
                            gw.values_mut()[(((o * ic) + c) * k + u) * k + vk] += s;
                            // input grad: scatter gy through the flipped kernel
                            let wv = wt.values()[(((o * ic) + c) * k + u) * k + vk];
                            if wv != 0.0 {
                                scatter_shifted(
                                    &mut gx.values_mut()[xbase..xbase + h * w],
                                    gyp,
                                    h,
                                    w,
                                    du,
                                    dv,
                                    wv,
                                );
                            }
                        }
                    }
                }
            }
        }
        (gx, gw, gb)
    }
}

/// y[i][j] += s * x[i+du][j+dv] over the in-range window.
fn accumulate_shifted(y: &mut [f64], x: &[f64], h: usize, w: usize, du: isize, dv: isize, s: f64) {
    for i in 0..h as isize {
        let ii = i + du;
        if ii < 0 || ii >= h as isize {
            continue;
        }
        let j0 = (-dv).max(0) as usize;
        let j1 = ((w as isize - dv).min(w as isize)).max(0) as usize;
        if j0 >= j1 {
            continue;
        }
        let yrow = &mut y[i as usize * w + j0..i as usize * w + j1];
        let xrow = &x[(ii as usize * w) as usize + (j0 as isize + dv) as usize..];
        for (yv, xv) in yrow.iter_mut().zip(xrow) {
            *yv += s * xv;
        }
    }
}

/// sum over i,j of a[i][j] * b[i+du][j+dv] over the in-range window.
fn dot_shifted(a: &[f64], b: &[f64], h: usize, w: usize, du: isize, dv: isize) -> f64 {
    let mut acc = 0.0;
    for i in 0..h as isize {
        let ii = i + du;
        if ii < 0 || ii >= h as isize {
            continue;
        }
        let j0 = (-dv).max(0) as usize;
        let j1 = ((w as isize - dv).min(w as isize)).max(0) as usize;
        if j0 >= j1 {
            continue;
        }
        let arow = &a[i as usize * w + j0..i as usize * w + j1];
        let brow = &b[ii as usize * w + (j0 as isize + dv) as usize..];
        for (av, bv) in arow.iter().zip(brow) {
            acc += av * bv;
        }
    }
    acc
}

/// g[i+du][j+dv] += s * gy[i][j] over the in-range window (adjoint of
/// `accumulate_shifted` in its x argument).
fn scatter_shifted(g: &mut [f64], gy: &[f64], h: usize, w: usize, du: isize, dv: isize, s: f64) {
    for i in 0..h as isize {
        let ii = i + du;
        if ii < 0 || ii >= h as isize {
            continue;
        }
        let j0 = (-dv).max(0) as usize;
        let j1 = ((w as isize - dv).min(w as isize)).max(0) as usize;
        if j0 >= j1 {
            continue;
        }
        let gyrow = &gy[i as usize * w + j0..i as usize * w + j1];
        let grow = &mut g[ii as usize * w + (j0 as isize + dv) as usize..];
        for (gv, yv) in grow.iter_mut().zip(gyrow) {
            *gv += s * yv;
        }
    }
}

// ---------------------------------------------------------------------------
// Batch normalization (2-D feature maps, per-channel statistics)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

pub struct BnCache {
    x_hat: Tensor,
    inv_std: Vec<f64>,
    train: bool,
}

impl BatchNorm2d {
    pub fn new(c: usize) -> Self {
        BatchNorm2d {
            gamma: Tensor::filled(&[c], 1.0),
            beta: Tensor::zeros(&[c]),
            running_mean: Tensor::zeros(&[c]),
            running_var: Tensor::filled(&[c], 1.0),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Inference-mode forward against the frozen running statistics; takes
    /// `&self` so a trained network can run forward passes without any
    /// mutable state (bitwise deterministic).
    pub fn forward_infer(&self, x: &Tensor) -> (Tensor, BnCache) {
        let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let plane = h * w;
        let mut y = Tensor::zeros(x.shape());
        let mut x_hat = Tensor::zeros(x.shape());
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let mean = self.running_mean.values()[ch];
            let var = self.running_var.values()[ch];
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std[ch] = istd;
            let g = self.gamma.values()[ch];
            let be = self.beta.values()[ch];
            for b in 0..n {
                let base = ((b * c) + ch) * plane;
                for i in base..base + plane {
                    let xh = (x.values()[i] - mean) * istd;
                    x_hat.values_mut()[i] = xh;
                    y.values_mut()[i] = g * xh + be;
                }
            }
        }
        (y, BnCache { x_hat, inv_std, train: false })
    }

    /// Training mode uses batch statistics and updates the running ones;
    /// inference delegates to [`Self::forward_infer`].
    pub fn forward(&mut self, x: &Tensor, train: bool) -> (Tensor, BnCache) {
        if !train {
            return self.forward_infer(x);
        }
        let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let m = (n * h * w) as f64;
        let plane = h * w;
        let mut y = Tensor::zeros(x.shape());
        let mut x_hat = Tensor::zeros(x.shape());
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            let mut s2 = 0.0;
            for b in 0..n {
                let base = ((b * c) + ch) * plane;
                for &v in &x.values()[base..base + plane] {
                    s += v;
                    s2 += v * v;
                }
            }
            let mean = s / m;
            let var = (s2 / m - mean * mean).max(0.0);
            self.running_mean.values_mut()[ch] =
                (1.0 - self.momentum) * self.running_mean.values()[ch] + self.momentum * mean;
            self.running_var.values_mut()[ch] =
                (1.0 - self.momentum) * self.running_var.values()[ch] + self.momentum * var;
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std[ch] = istd;
            let g = self.gamma.values()[ch];
            let be = self.beta.values()[ch];
            for b in 0..n {
                let base = ((b * c) + ch) * plane;
                for i in base..base + plane {
                    let xh = (x.values()[i] - mean) * istd;
                    x_hat.values_mut()[i] = xh;
                    y.values_mut()[i] = g * xh + be;
                }
            }
        }
        (y, BnCache { x_hat, inv_std, train: true })
    }

    /// Returns (grad_x, grad_gamma, grad_beta).
    pub fn backward(&self, cache: &BnCache, gy: &Tensor) -> (Tensor, Tensor, Tensor) {
        let x_hat = &cache.x_hat;
        let [n, c, h, w] = [x_hat.shape()[0], x_hat.shape()[1], x_hat.shape()[2], x_hat.shape()[3]];
        let m = (n * h * w) as f64;
        let plane = h * w;
        let mut gx = Tensor::zeros(x_hat.shape());
        let mut gg = Tensor::zeros(&[c]);
        let mut gb = Tensor::zeros(&[c]);
        for ch in 0..c {
            let g = self.gamma.values()[ch];
            let istd = cache.inv_std[ch];
            let mut sum_gxh = 0.0;
            let mut sum_gxh_xh = 0.0;
            for b in 0..n {
                let base = ((b * c) + ch) * plane;
                for i in base..base + plane {
                    let gyv = gy.values()[i];
                    let xh = x_hat.values()[i];
                    gb.values_mut()[ch] += gyv;
                    gg.values_mut()[ch] += gyv * xh;
                    sum_gxh += gyv * g;
                    sum_gxh_xh += gyv * g * xh;
                }
            }
            for b in 0..n {
                let base = ((b * c) + ch) * plane;
                for i in base..base + plane {
                    let g_xhat = gy.values()[i] * g;
                    let xh = x_hat.values()[i];
                    gx.values_mut()[i] = if cache.train {
                        (istd / m) * (m * g_xhat - sum_gxh - xh * sum_gxh_xh)
                    } else {
                        g_xhat * istd
                    };
                }
            }
        }
        (gx, gg, gb)
    }
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities
// ---------------------------------------------------------------------------

pub fn relu(x: &Tensor) -> (Tensor, Tensor) {
    let mut y = x.clone();
    for v in y.values_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let cache = x.clone();
    (y, cache)
}

pub fn relu_backward(cache: &Tensor, gy: &Tensor) -> Tensor {
    let mut gx = gy.clone();
    for (g, &x) in gx.values_mut().iter_mut().zip(cache.values()) {
        if x <= 0.0 {
            *g = 0.0;
        }
    }
    gx
}

pub fn tanh(x: &Tensor) -> (Tensor, Tensor) {
    let mut y = x.clone();
    for v in y.values_mut() {
        *v = v.tanh();
    }
    (y.clone(), y)
}

pub fn tanh_backward(y_cache: &Tensor, gy: &Tensor) -> Tensor {
    let mut gx = gy.clone();
    for (g, &y) in gx.values_mut().iter_mut().zip(y_cache.values()) {
        *g *= 1.0 - y * y;
    }
    gx
}

// ---------------------------------------------------------------------------
// Spatial resampling and pooling
// ---------------------------------------------------------------------------

/// Nearest-neighbour 2x upsample.
pub fn upsample2(x: &Tensor) -> Tensor {
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let mut y = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    for p in 0..n * c {
        let xb = p * h * w;
        let yb = p * 4 * h * w;
        for i in 0..h {
            for j in 0..w {
                let v = x.values()[xb + i * w + j];
                let r0 = yb + (2 * i) * 2 * w + 2 * j;
                let r1 = yb + (2 * i + 1) * 2 * w + 2 * j;
                y.values_mut()[r0] = v;
                y.values_mut()[r0 + 1] = v;
                y.values_mut()[r1] = v;
                y.values_mut()[r1 + 1] = v;
            }
        }
    }
    y
}

/// Adjoint of `upsample2`: sum each 2x2 child block.
pub fn upsample2_backward(gy: &Tensor) -> Tensor {
    let [n, c, h2, w2] = [gy.shape()[0], gy.shape()[1], gy.shape()[2], gy.shape()[3]];
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Tensor::zeros(&[n, c, h, w]);
    for p in 0..n * c {
        let gb = p * h2 * w2;
        let xb = p * h * w;
        for i in 0..h {
            for j in 0..w {
                let r0 = gb + (2 * i) * w2 + 2 * j;
                let r1 = gb + (2 * i + 1) * w2 + 2 * j;
                gx.values_mut()[xb + i * w + j] = gy.values()[r0]
                    + gy.values()[r0 + 1]
                    + gy.values()[r1]
                    + gy.values()[r1 + 1];
            }
        }
    }
    gx
}

/// 2x2 average pooling, stride 2 (spatial dims must be even).
pub fn avg_pool2(x: &Tensor) -> Tensor {
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims");
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Tensor::zeros(&[n, c, ho, wo]);
    for p in 0..n * c {
        let xb = p * h * w;
        let yb = p * ho * wo;
        for i in 0..ho {
            for j in 0..wo {
                let r0 = xb + (2 * i) * w + 2 * j;
                let r1 = xb + (2 * i + 1) * w + 2 * j;
                y.values_mut()[yb + i * wo + j] = 0.25
                    * (x.values()[r0] + x.values()[r0 + 1] + x.values()[r1] + x.values()[r1 + 1]);
            }
        }
    }
    y
}

pub fn avg_pool2_backward(gy: &Tensor) -> Tensor {
    let [n, c, ho, wo] = [gy.shape()[0], gy.shape()[1], gy.shape()[2], gy.shape()[3]];
    let (h, w) = (2 * ho, 2 * wo);
    let mut gx = Tensor::zeros(&[n, c, h, w]);
    for p in 0..n * c {
        let gb = p * ho * wo;
        let xb = p * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let g = 0.25 * gy.values()[gb + i * wo + j];
                let r0 = xb + (2 * i) * w + 2 * j;
                let r1 = xb + (2 * i + 1) * w + 2 * j;
                gx.values_mut()[r0] = g;
                gx.values_mut()[r0 + 1] = g;
                gx.values_mut()[r1] = g;
                gx.values_mut()[r1 + 1] = g;
            }
        }
    }
    gx
}

/// 2x2 max pooling, stride 2; the cache records the winning index of each
/// window for the backward scatter.
pub fn max_pool2(x: &Tensor) -> (Tensor, Vec<usize>) {
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even dims");
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Tensor::zeros(&[n, c, ho, wo]);
    let mut arg = vec![0usize; n * c * ho * wo];
    for p in 0..n * c {
        let xb = p * h * w;
        let yb = p * ho * wo;
        for i in 0..ho {
            for j in 0..wo {
                let idx = [
                    xb + (2 * i) * w + 2 * j,
                    xb + (2 * i) * w + 2 * j + 1,
                    xb + (2 * i + 1) * w + 2 * j,
                    xb + (2 * i + 1) * w + 2 * j + 1,
                ];
                let mut best = idx[0];
                for &k in &idx[1..] {
                    if x.values()[k] > x.values()[best] {
                        best = k;
                    }
                }
                y.values_mut()[yb + i * wo + j] = x.values()[best];
                arg[yb + i * wo + j] = best;
            }
        }
    }
    (y, arg)
}

pub fn max_pool2_backward(arg: &[usize], gy: &Tensor, in_shape: &[usize]) -> Tensor {
    let mut gx = Tensor::zeros(in_shape);
    for (o, &src) in arg.iter().enumerate() {
        gx.values_mut()[src] += gy.values()[o];
    }
    gx
}

/// Global sum pooling: [n, c, h, w] -> [n, c].
pub fn global_sum_pool(x: &Tensor) -> Tensor {
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let plane = h * w;
    let mut y = Tensor::zeros(&[n, c]);
    for b in 0..n {
        for ch in 0..c {
            let base = ((b * c) + ch) * plane;
            y.values_mut()[b * c + ch] = x.values()[base..base + plane].iter().sum();
        }
    }
    y
}

pub fn global_sum_pool_backward(gy: &Tensor, in_shape: &[usize]) -> Tensor {
    let [n, c, h, w] = [in_shape[0], in_shape[1], in_shape[2], in_shape[3]];
    let plane = h * w;
    let mut gx = Tensor::zeros(in_shape);
    for b in 0..n {
        for ch in 0..c {
            let g = gy.values()[b * c + ch];
            let base = ((b * c) + ch) * plane;
            for v in gx.values_mut()[base..base + plane].iter_mut() {
                *v = g;
            }
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// Embedding and concatenation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    /// [n_classes, dim]
    pub table: Tensor,
}

impl Embedding {
    pub fn new(n_classes: usize, dim: usize) -> Self {
        Embedding { table: Tensor::zeros(&[n_classes, dim]) }
    }

    /// Look up one row per id: -> [n, dim].
    pub fn forward(&self, ids: &[usize]) -> Tensor {
        let dim = self.table.shape()[1];
        let mut y = Tensor::zeros(&[ids.len(), dim]);
        for (r, &id) in ids.iter().enumerate() {
            assert!(id < self.table.shape()[0], "class id {id} out of range");
            y.values_mut()[r * dim..(r + 1) * dim]
                .copy_from_slice(&self.table.values()[id * dim..(id + 1) * dim]);
        }
        y
    }

    /// Scatter-add row gradients back into the table gradient.
    pub fn backward(&self, ids: &[usize], gy: &Tensor) -> Tensor {
        let dim = self.table.shape()[1];
        let mut gt = Tensor::zeros(self.table.shape());
        for (r, &id) in ids.iter().enumerate() {
            let src = &gy.values()[r * dim..(r + 1) * dim];
            let dst = &mut gt.values_mut()[id * dim..(id + 1) * dim];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        gt
    }
}

/// Concatenate two [n, *] vectors along the feature axis.
pub fn concat_vec(a: &Tensor, b: &Tensor) -> Tensor {
    let n = a.shape()[0];
    assert_eq!(n, b.shape()[0], "concat batch mismatch");
    let (da, db) = (a.shape()[1], b.shape()[1]);
    let mut y = Tensor::zeros(&[n, da + db]);
    for r in 0..n {
        y.values_mut()[r * (da + db)..r * (da + db) + da]
            .copy_from_slice(&a.values()[r * da..(r + 1) * da]);
        y.values_mut()[r * (da + db) + da..(r + 1) * (da + db)]
            .copy_from_slice(&b.values()[r * db..(r + 1) * db]);
    }
    y
}

/// Split the gradient of a concatenation back into the two parts.
pub fn concat_vec_backward(gy: &Tensor, da: usize, db: usize) -> (Tensor, Tensor) {
    let n = gy.shape()[0];
    assert_eq!(gy.shape()[1], da + db, "concat grad width");
    let mut ga = Tensor::zeros(&[n, da]);
    let mut gb = Tensor::zeros(&[n, db]);
    for r in 0..n {
        ga.values_mut()[r * da..(r + 1) * da]
            .copy_from_slice(&gy.values()[r * (da + db)..r * (da + db) + da]);
        gb.values_mut()[r * db..(r + 1) * db]
            .copy_from_slice(&gy.values()[r * (da + db) + da..(r + 1) * (da + db)]);
    }
    (ga, gb)
}

// ---------------------------------------------------------------------------
// Non-local (self-attention) block
// ---------------------------------------------------------------------------

/// Dot-product self-attention over flattened spatial positions:
///   f = theta(x), p = phi(x), v = g(x)
///   A = softmax_j(f_i . p_j),  o = out(A v),  y = x + gamma * o
/// with a learned scalar `gamma` initialized to zero so the block starts as
/// the identity. Inner channels follow the usual c/8 (keys/queries) and c/2
/// (values) reductions, floored at 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NonLocal {
    pub theta: Conv2d,
    pub phi: Conv2d,
    pub g: Conv2d,
    pub out: Conv2d,
    /// [1]
    pub gamma: Tensor,
}

pub struct NonLocalCache {
    x: Tensor,
    th: ConvCache,
    ph: ConvCache,
    gc: ConvCache,
    oc: ConvCache,
    /// Attention inputs, flattened to [n, c, h*w]; the attention matrix is
    /// recomputed in backward rather than cached (it is O((hw)^2)).
    f: Tensor,
    p: Tensor,
    v: Tensor,
    /// out(.) result, needed for the gamma gradient.
    o_final: Tensor,
}

impl NonLocal {
    pub fn new(c: usize) -> Self {
        let ci = (c / 8).max(1);
        let cv = (c / 2).max(1);
        NonLocal {
            theta: Conv2d::new(ci, c, 1, 0),
            phi: Conv2d::new(ci, c, 1, 0),
            g: Conv2d::new(cv, c, 1, 0),
            out: Conv2d::new(c, cv, 1, 0),
            gamma: Tensor::zeros(&[1]),
        }
    }

    fn attention(f: &Tensor, p: &Tensor, b: usize, hw: usize, a: &mut [f64]) {
        let ci = f.shape()[1];
        // scores s[i][j] = sum_c f[c][i] * p[c][j], then row softmax
        for v in a.iter_mut() {
            *v = 0.0;
        }
        for c in 0..ci {
            let frow = &f.values()[(b * ci + c) * hw..(b * ci + c + 1) * hw];
            let prow = &p.values()[(b * ci + c) * hw..(b * ci + c + 1) * hw];
            for (i, &fv) in frow.iter().enumerate() {
                if fv == 0.0 {
                    continue;
                }
                let arow = &mut a[i * hw..(i + 1) * hw];
                for (av, &pv) in arow.iter_mut().zip(prow) {
                    *av += fv * pv;
                }
            }
        }
        for i in 0..hw {
            let row = &mut a[i * hw..(i + 1) * hw];
            let mx = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            let inv = 1.0 / z;
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, NonLocalCache) {
        let [n, h, w] = [x.shape()[0], x.shape()[2], x.shape()[3]];
        let hw = h * w;
        let (f4, th) = self.theta.forward(x);
        let (p4, ph) = self.phi.forward(x);
        let (v4, gc) = self.g.forward(x);
        let ci = f4.shape()[1];
        let cv = v4.shape()[1];
        let f = f4.reshaped(&[n, ci, hw]).unwrap();
        let p = p4.reshaped(&[n, ci, hw]).unwrap();
        let v = v4.reshaped(&[n, cv, hw]).unwrap();

        let mut attended = Tensor::zeros(&[n, cv, h, w]);
        let mut a = vec![0.0; hw * hw];
        for b in 0..n {
            Self::attention(&f, &p, b, hw, &mut a);
            for cc in 0..cv {
                let vrow = &v.values()[(b * cv + cc) * hw..(b * cv + cc + 1) * hw];
                let orow =
                    &mut attended.values_mut()[(b * cv + cc) * hw..(b * cv + cc + 1) * hw];
                for (i, ov) in orow.iter_mut().enumerate() {
                    let arow = &a[i * hw..(i + 1) * hw];
                    let mut acc = 0.0;
                    for (av, vv) in arow.iter().zip(vrow) {
                        acc += av * vv;
                    }
                    *ov = acc;
                }
            }
        }
        let (o_final, oc) = self.out.forward(&attended);
        let gm = self.gamma.values()[0];
        let mut y = x.clone();
        for (yv, &ov) in y.values_mut().iter_mut().zip(o_final.values()) {
            *yv += gm * ov;
        }
        let cache = NonLocalCache { x: x.clone(), th, ph, gc, oc, f, p, v, o_final };
        (y, cache)
    }

    /// Returns (grad_x, parameter grads in `order()` order).
    pub fn backward(&self, cache: &NonLocalCache, gy: &Tensor) -> (Tensor, Vec<Tensor>) {
        let x = &cache.x;
        let [n, h, w] = [x.shape()[0], x.shape()[2], x.shape()[3]];
        let hw = h * w;
        let gm = self.gamma.values()[0];

        // gamma and the out conv
        let mut g_gamma = 0.0;
        for (gv, ov) in gy.values().iter().zip(cache.o_final.values()) {
            g_gamma += gv * ov;
        }
        let mut g_out_in = gy.clone();
        g_out_in.scale(gm);
        let (g_attended, gw_out, gb_out) = self.out.backward(&cache.oc, &g_out_in);

        // back through the attention: o[cc][i] = sum_j A[i][j] v[cc][j]
        let ci = cache.f.shape()[1];
        let cv = cache.v.shape()[1];
        let g_att = g_attended.reshaped(&[n, cv, hw]).unwrap();
        let mut gf = Tensor::zeros(cache.f.shape());
        let mut gp = Tensor::zeros(cache.p.shape());
        let mut gv = Tensor::zeros(cache.v.shape());
        let mut a = vec![0.0; hw * hw];
        let mut ga = vec![0.0; hw * hw];
        for b in 0..n {
            Self::attention(&cache.f, &cache.p, b, hw, &mut a);
            // gv[cc][j] = sum_i A[i][j] gO[cc][i]
            for cc in 0..cv {
                let go = &g_att.values()[(b * cv + cc) * hw..(b * cv + cc + 1) * hw];
                let gvrow = &mut gv.values_mut()[(b * cv + cc) * hw..(b * cv + cc + 1) * hw];
                for (i, &g) in go.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    let arow = &a[i * hw..(i + 1) * hw];
                    for (gvv, &av) in gvrow.iter_mut().zip(arow) {
                        *gvv += g * av;
                    }
                }
            }
            // gA[i][j] = sum_cc gO[cc][i] v[cc][j]
            for v in ga.iter_mut() {
                *v = 0.0;
            }
            for cc in 0..cv {
                let go = &g_att.values()[(b * cv + cc) * hw..(b * cv + cc + 1) * hw];
                let vrow = &cache.v.values()[(b * cv + cc) * hw..(b * cv + cc + 1) * hw];
                for (i, &g) in go.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    let garow = &mut ga[i * hw..(i + 1) * hw];
                    for (gav, &vv) in garow.iter_mut().zip(vrow) {
                        *gav += g * vv;
                    }
                }
            }
            // softmax backward per row: gS = A .* (gA - sum_k gA A)
            for i in 0..hw {
                let arow = &a[i * hw..(i + 1) * hw];
                let garow = &mut ga[i * hw..(i + 1) * hw];
                let dot: f64 = garow.iter().zip(arow).map(|(g, a)| g * a).sum();
                for (g, &av) in garow.iter_mut().zip(arow) {
                    *g = av * (*g - dot);
                }
            }
            // gF[c][i] = sum_j gS[i][j] p[c][j];  gP[c][j] = sum_i gS[i][j] f[c][i]
            for cc in 0..ci {
                let prow = &cache.p.values()[(b * ci + cc) * hw..(b * ci + cc + 1) * hw];
                let frow = &cache.f.values()[(b * ci + cc) * hw..(b * ci + cc + 1) * hw];
                let gfrow = &mut gf.values_mut()[(b * ci + cc) * hw..(b * ci + cc + 1) * hw];
                let gprow = &mut gp.values_mut()[(b * ci + cc) * hw..(b * ci + cc + 1) * hw];
                for i in 0..hw {
                    let gsrow = &ga[i * hw..(i + 1) * hw];
                    let mut acc = 0.0;
                    for (gs, &pv) in gsrow.iter().zip(prow.iter()) {
                        acc += gs * pv;
                    }
                    gfrow[i] += acc;
                    let fv = frow[i];
                    if fv != 0.0 {
                        for (gpv, gs) in gprow.iter_mut().zip(gsrow) {
                            *gpv += fv * gs;
                        }
                    }
                }
            }
        }

        let gf4 = gf.reshaped(&[n, ci, h, w]).unwrap();
        let gp4 = gp.reshaped(&[n, ci, h, w]).unwrap();
        let gv4 = gv.reshaped(&[n, cv, h, w]).unwrap();
        let (gx_t, gw_t, gb_t) = self.theta.backward(&cache.th, &gf4);
        let (gx_p, gw_p, gb_p) = self.phi.backward(&cache.ph, &gp4);
        let (gx_g, gw_g, gb_g) = self.g.backward(&cache.gc, &gv4);

        // skip connection plus the three projection paths
        let mut gx = gy.clone();
        gx.add_assign(&gx_t);
        gx.add_assign(&gx_p);
        gx.add_assign(&gx_g);

        let grads = vec![
            gw_t,
            gb_t,
            gw_p,
            gb_p,
            gw_g,
            gb_g,
            gw_out,
            gb_out,
            Tensor::from_vec(&[1], vec![g_gamma]).unwrap(),
        ];
        (gx, grads)
    }

    /// Parameters in the fixed declared order matching `backward`'s grads.
    pub fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.theta.w,
            &self.theta.b,
            &self.phi.w,
            &self.phi.b,
            &self.g.w,
            &self.g.b,
            &self.out.w,
            &self.out.b,
            &self.gamma,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.theta.w,
            &mut self.theta.b,
            &mut self.phi.w,
            &mut self.phi.b,
            &mut self.g.w,
            &mut self.g.b,
            &mut self.out.w,
            &mut self.out.b,
            &mut self.gamma,
        ]
    }
}
