//! Generator and discriminator architectures.
//!
//! The generator maps a latent vector concatenated with a shared class
//! embedding through a linear layer onto a 4x4 feature map, then two
//! residual upsampling blocks on the 16 -> 4 -> 1 channel schedule,
//! non-parametric 2x upsamplings as needed to reach the target resolution,
//! an optional non-local block, batch norm, and tanh. Convolution and
//! linear weights are spectrally normalized at application time.
//!
//! The discriminator runs one residual downsampling block over the
//! channel-replicated input, an optional non-local block at half
//! resolution, ReLU, 2x2 max pooling, global sum pooling, and a linear
//! logit with projection class conditioning (the class embedding's inner
//! product with the pooled features is added to the logit).

use super::layers::{
    avg_pool2, avg_pool2_backward, concat_vec, concat_vec_backward, global_sum_pool,
    global_sum_pool_backward, max_pool2, max_pool2_backward, relu, relu_backward, tanh,
    tanh_backward, upsample2, upsample2_backward, BatchNorm2d, BnCache, Conv2d, ConvCache,
    Embedding, Linear, LinearCache, NonLocal, NonLocalCache,
};
use super::opt::{orthogonal_init_tensor, sn_grad_raw, SpectralNorm};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use rand::Rng;

// ---------------------------------------------------------------------------
// Configs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    pub embed_dim: usize,
    pub n_classes: usize,
    pub base_channels: usize,
    pub resolution: usize,
    pub use_nonlocal: bool,
}

impl GeneratorConfig {
    /// Small preset sized for tests and interactive runs.
    pub fn desk(n_classes: usize) -> Self {
        GeneratorConfig {
            latent_dim: 32,
            embed_dim: 16,
            n_classes,
            base_channels: 16,
            resolution: 32,
            use_nonlocal: true,
        }
    }

    /// Full-size preset (128x128 output, 128-d latent, 50-d embedding).
    pub fn full(n_classes: usize) -> Self {
        GeneratorConfig {
            latent_dim: 128,
            embed_dim: 50,
            n_classes,
            base_channels: 16,
            resolution: 128,
            use_nonlocal: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.resolution.is_power_of_two() || self.resolution < 8 {
            return Err(Error::BadConfig(format!(
                "resolution {} must be a power of two >= 8",
                self.resolution
            )));
        }
        if self.latent_dim == 0 || self.embed_dim == 0 || self.n_classes == 0 {
            return Err(Error::BadConfig("latent, embed, and class counts must be >= 1".into()));
        }
        if self.base_channels == 0 {
            return Err(Error::BadConfig("base_channels must be >= 1".into()));
        }
        Ok(())
    }

    /// Channel schedule of the two residual blocks: base -> base/4 -> 1.
    fn channels(&self) -> (usize, usize, usize) {
        let c0 = self.base_channels;
        let c1 = (c0 / 4).max(1);
        (c0, c1, 1)
    }

    /// How many 2x upsamplings are needed from the 4x4 seed, how many of
    /// them live inside the two residual blocks, and how many are appended
    /// as plain nearest-neighbour stages.
    fn upsample_plan(&self) -> (bool, bool, usize) {
        let need = (self.resolution / 4).trailing_zeros() as usize;
        (need >= 1, need >= 2, need.saturating_sub(2))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorConfig {
    pub resolution: usize,
    pub channels: usize,
    pub use_nonlocal: bool,
    pub n_classes: usize,
}

impl DiscriminatorConfig {
    pub fn desk(n_classes: usize) -> Self {
        DiscriminatorConfig { resolution: 32, channels: 16, use_nonlocal: true, n_classes }
    }

    pub fn full(n_classes: usize) -> Self {
        DiscriminatorConfig { resolution: 128, channels: 16, use_nonlocal: true, n_classes }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.resolution.is_power_of_two() || self.resolution < 8 {
            return Err(Error::BadConfig(format!(
                "resolution {} must be a power of two >= 8",
                self.resolution
            )));
        }
        if self.channels == 0 || self.n_classes == 0 {
            return Err(Error::BadConfig("channels and class count must be >= 1".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Spectral-norm application helpers
// ---------------------------------------------------------------------------

/// (sigma, u, v) recorded at forward time so the backward transform is
/// independent of later power-iteration advances.
pub(crate) struct SnSnapshot {
    sigma: f64,
    u: Vec<f64>,
    v: Vec<f64>,
}

impl SnSnapshot {
    fn identity() -> Self {
        SnSnapshot { sigma: 1.0, u: Vec::new(), v: Vec::new() }
    }
}

/// Normalize a weight for application. In training the power iteration
/// advances one step; at inference the stored vectors are used as-is. An
/// all-zero weight (or cold state at inference) degrades to the identity:
/// the zero matrix is its own normalization limit, and erroring would make
/// freshly zero-initialized layers unusable.
fn sn_apply(sn: &mut SpectralNorm, w: &Tensor, train: bool) -> (Tensor, SnSnapshot) {
    match sn.normalize(w, train) {
        Ok((wbar, sigma)) => {
            (wbar, SnSnapshot { sigma, u: sn.u.clone(), v: sn.v.clone() })
        }
        Err(_) => (w.clone(), SnSnapshot::identity()),
    }
}

/// Inference-path variant: never mutates the persistent state. sigma is
/// computed from the frozen vectors; a cold or degenerate state degrades
/// to the identity.
fn sn_apply_frozen(sn: &SpectralNorm, w: &Tensor) -> (Tensor, SnSnapshot) {
    if sn.v.iter().all(|&v| v == 0.0) {
        return (w.clone(), SnSnapshot::identity());
    }
    let cols: usize = w.shape()[1..].iter().product();
    let rows = w.shape()[0];
    let mut sigma = 0.0;
    for k in 0..rows {
        let uk = sn.u[k];
        if uk == 0.0 {
            continue;
        }
        let row = &w.values()[k * cols..(k + 1) * cols];
        sigma += uk * row.iter().zip(&sn.v).map(|(a, b)| a * b).sum::<f64>();
    }
    if sigma == 0.0 || !sigma.is_finite() {
        return (w.clone(), SnSnapshot::identity());
    }
    let mut wn = w.clone();
    wn.scale(1.0 / sigma);
    (wn, SnSnapshot { sigma, u: sn.u.clone(), v: sn.v.clone() })
}

fn sn_backward(g_wbar: &Tensor, cache_w: &Tensor, snap: &SnSnapshot) -> Tensor {
    if snap.u.is_empty() {
        return g_wbar.clone();
    }
    sn_grad_raw(g_wbar, cache_w, snap.sigma, &snap.u, &snap.v)
}

// ---------------------------------------------------------------------------
// Residual upsampling block (generator)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ResUpBlock {
    bn1: BatchNorm2d,
    conv1: Conv2d,
    bn2: BatchNorm2d,
    conv2: Conv2d,
    skip: Conv2d,
    sn1: SpectralNorm,
    sn2: SpectralNorm,
    sns: SpectralNorm,
    up: bool,
}

pub(crate) struct UpBlockTrace {
    bn1c: BnCache,
    r1: Tensor,
    c1: ConvCache,
    s1: SnSnapshot,
    bn2c: BnCache,
    r2: Tensor,
    c2: ConvCache,
    s2: SnSnapshot,
    skc: ConvCache,
    ss: SnSnapshot,
}

impl ResUpBlock {
    fn new<R: Rng>(c_in: usize, c_out: usize, up: bool, rng: &mut R) -> Self {
        let mut conv1 = Conv2d::new(c_out, c_in, 3, 1);
        conv1.w = orthogonal_init_tensor(&[c_out, c_in, 3, 3], 1.0, rng);
        let mut conv2 = Conv2d::new(c_out, c_out, 3, 1);
        conv2.w = orthogonal_init_tensor(&[c_out, c_out, 3, 3], 1.0, rng);
        let mut skip = Conv2d::new(c_out, c_in, 1, 0);
        skip.w = orthogonal_init_tensor(&[c_out, c_in, 1, 1], 1.0, rng);
        ResUpBlock {
            bn1: BatchNorm2d::new(c_in),
            sn1: SpectralNorm::new(&[c_out, c_in * 9], rng),
            conv1,
            bn2: BatchNorm2d::new(c_out),
            sn2: SpectralNorm::new(&[c_out, c_out * 9], rng),
            conv2,
            sns: SpectralNorm::new(&[c_out, c_in], rng),
            skip,
            up,
        }
    }

    fn forward(&mut self, x: &Tensor, train: bool) -> (Tensor, UpBlockTrace) {
        let (h, bn1c) = self.bn1.forward(x, train);
        let (h, r1) = relu(&h);
        let h = if self.up { upsample2(&h) } else { h };
        let (wb1, s1) = sn_apply(&mut self.sn1, &self.conv1.w, train);
        let (h, c1) = self.conv1.forward_with(&wb1, &h);
        let (h, bn2c) = self.bn2.forward(&h, train);
        let (h, r2) = relu(&h);
        let (wb2, s2) = sn_apply(&mut self.sn2, &self.conv2.w, train);
        let (h, c2) = self.conv2.forward_with(&wb2, &h);

        let s = if self.up { upsample2(x) } else { x.clone() };
        let (wbs, ss) = sn_apply(&mut self.sns, &self.skip.w, train);
        let (s, skc) = self.skip.forward_with(&wbs, &s);

        let mut y = h;
        y.add_assign(&s);
        (y, UpBlockTrace { bn1c, r1, c1, s1, bn2c, r2, c2, s2, skc, ss })
    }

    fn forward_infer(&self, x: &Tensor) -> (Tensor, UpBlockTrace) {
        let (h, bn1c) = self.bn1.forward_infer(x);
        let (h, r1) = relu(&h);
        let h = if self.up { upsample2(&h) } else { h };
        let (wb1, s1) = sn_apply_frozen(&self.sn1, &self.conv1.w);
        let (h, c1) = self.conv1.forward_with(&wb1, &h);
        let (h, bn2c) = self.bn2.forward_infer(&h);
        let (h, r2) = relu(&h);
        let (wb2, s2) = sn_apply_frozen(&self.sn2, &self.conv2.w);
        let (h, c2) = self.conv2.forward_with(&wb2, &h);

        let s = if self.up { upsample2(x) } else { x.clone() };
        let (wbs, ss) = sn_apply_frozen(&self.sns, &self.skip.w);
        let (s, skc) = self.skip.forward_with(&wbs, &s);

        let mut y = h;
        y.add_assign(&s);
        (y, UpBlockTrace { bn1c, r1, c1, s1, bn2c, r2, c2, s2, skc, ss })
    }

    /// Gradients in parameter order: bn1.gamma, bn1.beta, conv1.w, conv1.b,
    /// bn2.gamma, bn2.beta, conv2.w, conv2.b, skip.w, skip.b.
    fn backward(&self, t: &UpBlockTrace, gy: &Tensor) -> (Tensor, Vec<Tensor>) {
        let (gh, gw2b, gb2) = self.conv2.backward(&t.c2, gy);
        let gw2 = sn_backward(&gw2b, &t.c2.w_used, &t.s2);
        let gh = relu_backward(&t.r2, &gh);
        let (gh, gg2, gbe2) = self.bn2.backward(&t.bn2c, &gh);
        let (gh, gw1b, gb1) = self.conv1.backward(&t.c1, &gh);
        let gw1 = sn_backward(&gw1b, &t.c1.w_used, &t.s1);
        let gh = if self.up { upsample2_backward(&gh) } else { gh };
        let gh = relu_backward(&t.r1, &gh);
        let (mut gx, gg1, gbe1) = self.bn1.backward(&t.bn1c, &gh);

        let (gs, gwsb, gbs) = self.skip.backward(&t.skc, gy);
        let gws = sn_backward(&gwsb, &t.skc.w_used, &t.ss);
        let gs = if self.up { upsample2_backward(&gs) } else { gs };
        gx.add_assign(&gs);

        (gx, vec![gg1, gbe1, gw1, gb1, gg2, gbe2, gw2, gb2, gws, gbs])
    }

    fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.bn1.gamma,
            &self.bn1.beta,
            &self.conv1.w,
            &self.conv1.b,
            &self.bn2.gamma,
            &self.bn2.beta,
            &self.conv2.w,
            &self.conv2.b,
            &self.skip.w,
            &self.skip.b,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.bn1.gamma,
            &mut self.bn1.beta,
            &mut self.conv1.w,
            &mut self.conv1.b,
            &mut self.bn2.gamma,
            &mut self.bn2.beta,
            &mut self.conv2.w,
            &mut self.conv2.b,
            &mut self.skip.w,
            &mut self.skip.b,
        ]
    }
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    pub(crate) embed: Embedding,
    pub(crate) fc: Linear,
    pub(crate) sn_fc: SpectralNorm,
    pub(crate) b1: ResUpBlock,
    pub(crate) b2: ResUpBlock,
    extra_ups: usize,
    pub(crate) nonlocal: Option<NonLocal>,
    pub(crate) bn_f: BatchNorm2d,
}

pub struct GenTrace {
    ids: Vec<usize>,
    fcc: LinearCache,
    s_fc: SnSnapshot,
    b1: UpBlockTrace,
    b2: UpBlockTrace,
    nl: Option<NonLocalCache>,
    bnf: BnCache,
    th: Tensor,
    z_dim: usize,
    seed_shape: Vec<usize>,
}

impl Generator {
    pub fn new<R: Rng>(cfg: &GeneratorConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (c0, c1, c2) = cfg.channels();
        let (up1, up2, extra) = cfg.upsample_plan();
        let in_dim = cfg.embed_dim + cfg.latent_dim;
        let out_dim = 4 * 4 * c0;

        let mut embed = Embedding::new(cfg.n_classes, cfg.embed_dim);
        embed.table = orthogonal_init_tensor(&[cfg.n_classes, cfg.embed_dim], 1.0, rng);
        let mut fc = Linear::new(out_dim, in_dim);
        fc.w = orthogonal_init_tensor(&[out_dim, in_dim], 1.0, rng);
        let sn_fc = SpectralNorm::new(&[out_dim, in_dim], rng);
        let b1 = ResUpBlock::new(c0, c1, up1, rng);
        let b2 = ResUpBlock::new(c1, c2, up2, rng);
        let nonlocal = if cfg.use_nonlocal {
            let mut nl = NonLocal::new(c2);
            nl.theta.w = orthogonal_init_tensor(nl.theta.w.shape(), 1.0, rng);
            nl.phi.w = orthogonal_init_tensor(nl.phi.w.shape(), 1.0, rng);
            nl.g.w = orthogonal_init_tensor(nl.g.w.shape(), 1.0, rng);
            nl.out.w = orthogonal_init_tensor(nl.out.w.shape(), 1.0, rng);
            Some(nl)
        } else {
            None
        };
        Ok(Generator {
            cfg: cfg.clone(),
            embed,
            fc,
            sn_fc,
            b1,
            b2,
            extra_ups: extra,
            nonlocal,
            bn_f: BatchNorm2d::new(c2),
        })
    }

    /// Training-mode forward: batch-norm uses batch statistics and spectral
    /// normalization advances one power-iteration step per weight.
    pub fn forward(&mut self, z: &Tensor, ids: &[usize], train: bool) -> (Tensor, GenTrace) {
        assert_eq!(z.shape()[0], ids.len(), "latent batch vs id count");
        assert_eq!(z.shape()[1], self.cfg.latent_dim, "latent dim");
        if !train {
            return self.infer(z, ids);
        }
        let n = ids.len();
        let (c0, _, _) = self.cfg.channels();
        let e = self.embed.forward(ids);
        let cat = concat_vec(&e, z);
        let (wfc, s_fc) = sn_apply(&mut self.sn_fc, &self.fc.w, true);
        let (h0, fcc) = self.fc.forward_with(&wfc, &cat);
        let seed_shape = vec![n, c0, 4, 4];
        let h = h0.reshaped(&seed_shape).unwrap();
        let (h, tb1) = self.b1.forward(&h, true);
        let (h, tb2) = self.b2.forward(&h, true);
        let mut h = h;
        for _ in 0..self.extra_ups {
            h = upsample2(&h);
        }
        let (h, nl) = match &self.nonlocal {
            Some(block) => {
                let (y, c) = block.forward(&h);
                (y, Some(c))
            }
            None => (h, None),
        };
        let (h, bnf) = self.bn_f.forward(&h, true);
        let (y, th) = tanh(&h);
        let trace = GenTrace {
            ids: ids.to_vec(),
            fcc,
            s_fc,
            b1: tb1,
            b2: tb2,
            nl,
            bnf,
            th,
            z_dim: self.cfg.latent_dim,
            seed_shape,
        };
        (y, trace)
    }

    /// Inference-mode forward: frozen batch-norm statistics, frozen
    /// spectral-norm vectors, no mutation — repeated calls are bitwise
    /// identical. The trace still supports backward (gradients flow wrt the
    /// frozen statistics), which the gradient-refinement surrogate uses.
    pub fn infer(&self, z: &Tensor, ids: &[usize]) -> (Tensor, GenTrace) {
        assert_eq!(z.shape()[0], ids.len(), "latent batch vs id count");
        let n = ids.len();
        let (c0, _, _) = self.cfg.channels();
        let e = self.embed.forward(ids);
        let cat = concat_vec(&e, z);
        let (wfc, s_fc) = sn_apply_frozen(&self.sn_fc, &self.fc.w);
        let (h0, fcc) = self.fc.forward_with(&wfc, &cat);
        let seed_shape = vec![n, c0, 4, 4];
        let h = h0.reshaped(&seed_shape).unwrap();
        let (h, tb1) = self.b1.forward_infer(&h);
        let (h, tb2) = self.b2.forward_infer(&h);
        let mut h = h;
        for _ in 0..self.extra_ups {
            h = upsample2(&h);
        }
        let (h, nl) = match &self.nonlocal {
            Some(block) => {
                let (y, c) = block.forward(&h);
                (y, Some(c))
            }
            None => (h, None),
        };
        let (h, bnf) = self.bn_f.forward_infer(&h);
        let (y, th) = tanh(&h);
        let trace = GenTrace {
            ids: ids.to_vec(),
            fcc,
            s_fc,
            b1: tb1,
            b2: tb2,
            nl,
            bnf,
            th,
            z_dim: self.cfg.latent_dim,
            seed_shape,
        };
        (y, trace)
    }

    /// Reverse-mode pass. Returns the gradient with respect to z and the
    /// parameter gradients in [`Self::params`] order.
    pub fn backward(&self, t: &GenTrace, gy: &Tensor) -> (Tensor, Vec<Tensor>) {
        let gh = tanh_backward(&t.th, gy);
        let (gh, g_gf, g_bf) = self.bn_f.backward(&t.bnf, &gh);
        let (mut gh, nl_grads) = match (&self.nonlocal, &t.nl) {
            (Some(block), Some(cache)) => block.backward(cache, &gh),
            _ => (gh, Vec::new()),
        };
        for _ in 0..self.extra_ups {
            gh = upsample2_backward(&gh);
        }
        let (gh, g2) = self.b2.backward(&t.b2, &gh);
        let (gh, g1) = self.b1.backward(&t.b1, &gh);
        let n = t.seed_shape[0];
        let flat = gh.reshaped(&[n, t.seed_shape[1] * 16]).unwrap();
        let (gcat, gwfc_b, gbfc) = self.fc.backward(&t.fcc, &flat);
        let gwfc = sn_backward(&gwfc_b, &t.fcc.w_used, &t.s_fc);
        let (ge, gz) = concat_vec_backward(&gcat, self.cfg.embed_dim, t.z_dim);
        let g_table = self.embed.backward(&t.ids, &ge);

        let mut grads = vec![g_table, gwfc, gbfc];
        grads.extend(g1);
        grads.extend(g2);
        grads.extend(nl_grads);
        grads.push(g_gf);
        grads.push(g_bf);
        (gz, grads)
    }

    /// Parameters in fixed declared order (matches `backward` and the
    /// checkpoint layout).
    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = vec![&self.embed.table, &self.fc.w, &self.fc.b];
        p.extend(self.b1.params());
        p.extend(self.b2.params());
        if let Some(nl) = &self.nonlocal {
            p.extend(nl.params());
        }
        p.push(&self.bn_f.gamma);
        p.push(&self.bn_f.beta);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = vec![&mut self.embed.table, &mut self.fc.w, &mut self.fc.b];
        p.extend(self.b1.params_mut());
        p.extend(self.b2.params_mut());
        if let Some(nl) = &mut self.nonlocal {
            p.extend(nl.params_mut());
        }
        p.push(&mut self.bn_f.gamma);
        p.push(&mut self.bn_f.beta);
        p
    }

    /// Weight matrices under spectral normalization (for invariant checks).
    pub fn spectral_weights(&self) -> Vec<(&Tensor, &SpectralNorm)> {
        vec![
            (&self.fc.w, &self.sn_fc),
            (&self.b1.conv1.w, &self.b1.sn1),
            (&self.b1.conv2.w, &self.b1.sn2),
            (&self.b1.skip.w, &self.b1.sns),
            (&self.b2.conv1.w, &self.b2.sn1),
            (&self.b2.conv2.w, &self.b2.sn2),
            (&self.b2.skip.w, &self.b2.sns),
        ]
    }

    /// Weight matrices subject to orthogonal regularization.
    pub(crate) fn regularized_weight_indices(&self) -> Vec<usize> {
        // embed table [0], fc.w [1], then within each block conv1.w at +2,
        // conv2.w at +6, skip.w at +8 of the 10-param block layout.
        let mut idx = vec![1usize];
        let b1 = 3;
        idx.extend([b1 + 2, b1 + 6, b1 + 8]);
        let b2 = 13;
        idx.extend([b2 + 2, b2 + 6, b2 + 8]);
        idx
    }

    /// Persistent spectral-norm states in declared order (checkpointing).
    pub(crate) fn sn_states(&self) -> Vec<&SpectralNorm> {
        vec![
            &self.sn_fc,
            &self.b1.sn1,
            &self.b1.sn2,
            &self.b1.sns,
            &self.b2.sn1,
            &self.b2.sn2,
            &self.b2.sns,
        ]
    }

    pub(crate) fn sn_states_mut(&mut self) -> Vec<&mut SpectralNorm> {
        vec![
            &mut self.sn_fc,
            &mut self.b1.sn1,
            &mut self.b1.sn2,
            &mut self.b1.sns,
            &mut self.b2.sn1,
            &mut self.b2.sn2,
            &mut self.b2.sns,
        ]
    }

    /// Batch-norm running statistics in declared order (checkpointing).
    pub(crate) fn bn_stats(&self) -> Vec<&Tensor> {
        vec![
            &self.b1.bn1.running_mean,
            &self.b1.bn1.running_var,
            &self.b1.bn2.running_mean,
            &self.b1.bn2.running_var,
            &self.b2.bn1.running_mean,
            &self.b2.bn1.running_var,
            &self.b2.bn2.running_mean,
            &self.b2.bn2.running_var,
            &self.bn_f.running_mean,
            &self.bn_f.running_var,
        ]
    }

    pub(crate) fn bn_stats_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.b1.bn1.running_mean,
            &mut self.b1.bn1.running_var,
            &mut self.b1.bn2.running_mean,
            &mut self.b1.bn2.running_var,
            &mut self.b2.bn1.running_mean,
            &mut self.b2.bn1.running_var,
            &mut self.b2.bn2.running_mean,
            &mut self.b2.bn2.running_var,
            &mut self.bn_f.running_mean,
            &mut self.bn_f.running_var,
        ]
    }
}

// ---------------------------------------------------------------------------
// Discriminator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub cfg: DiscriminatorConfig,
    pub(crate) conv1: Conv2d,
    pub(crate) conv2: Conv2d,
    pub(crate) skip: Conv2d,
    pub(crate) nonlocal: Option<NonLocal>,
    pub(crate) lin: Linear,
    pub(crate) embed: Embedding,
}

pub struct DiscTrace {
    ids: Vec<usize>,
    c1: ConvCache,
    r1: Tensor,
    c2: ConvCache,
    skc: ConvCache,
    nl: Option<NonLocalCache>,
    r2: Tensor,
    mp_arg: Vec<usize>,
    pub(crate) pooled: Tensor,
    /// Embedding rows as applied (forward-time copy).
    e: Tensor,
    linc: LinearCache,
    pre_pool_shape: Vec<usize>,
}

impl Discriminator {
    pub fn new<R: Rng>(cfg: &DiscriminatorConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let ch = cfg.channels;
        let mut conv1 = Conv2d::new(ch, 3, 3, 1);
        conv1.w = orthogonal_init_tensor(&[ch, 3, 3, 3], 1.0, rng);
        let mut conv2 = Conv2d::new(ch, ch, 3, 1);
        conv2.w = orthogonal_init_tensor(&[ch, ch, 3, 3], 1.0, rng);
        let mut skip = Conv2d::new(ch, 3, 1, 0);
        skip.w = orthogonal_init_tensor(&[ch, 3, 1, 1], 1.0, rng);
        let nonlocal = if cfg.use_nonlocal {
            let mut nl = NonLocal::new(ch);
            nl.theta.w = orthogonal_init_tensor(nl.theta.w.shape(), 1.0, rng);
            nl.phi.w = orthogonal_init_tensor(nl.phi.w.shape(), 1.0, rng);
            nl.g.w = orthogonal_init_tensor(nl.g.w.shape(), 1.0, rng);
            nl.out.w = orthogonal_init_tensor(nl.out.w.shape(), 1.0, rng);
            Some(nl)
        } else {
            None
        };
        let mut lin = Linear::new(1, ch);
        lin.w = orthogonal_init_tensor(&[1, ch], 1.0, rng);
        let mut embed = Embedding::new(cfg.n_classes, ch);
        embed.table = orthogonal_init_tensor(&[cfg.n_classes, ch], 1.0, rng);
        Ok(Discriminator { cfg: cfg.clone(), conv1, conv2, skip, nonlocal, lin, embed })
    }

    /// Forward to per-sample logits [n]. Class conditioning is the
    /// projection term <embed[id], pooled features> added to the linear
    /// logit.
    pub fn forward(&self, x: &Tensor, ids: &[usize]) -> (Tensor, DiscTrace) {
        assert_eq!(x.shape()[0], ids.len(), "input batch vs id count");
        assert_eq!(x.shape()[1], 3, "discriminator expects 3 channels");
        assert_eq!(x.shape()[2], self.cfg.resolution, "resolution mismatch");
        let (h, c1) = self.conv1.forward(x);
        let (h, r1) = relu(&h);
        let (h, c2) = self.conv2.forward(&h);
        let h = avg_pool2(&h);
        let xs = avg_pool2(x);
        let (s, skc) = self.skip.forward(&xs);
        let mut h2 = h;
        h2.add_assign(&s);

        let (h3, nl) = match &self.nonlocal {
            Some(block) => {
                let (y, c) = block.forward(&h2);
                (y, Some(c))
            }
            None => (h2, None),
        };
        let (h4, r2) = relu(&h3);
        let pre_pool_shape = h4.shape().to_vec();
        let (h5, mp_arg) = max_pool2(&h4);
        let pooled = global_sum_pool(&h5);
        let (lin_out, linc) = self.lin.forward(&pooled);

        let e = self.embed.forward(ids);
        let n = ids.len();
        let ch = self.cfg.channels;
        let mut logits = Tensor::zeros(&[n]);
        for r in 0..n {
            let mut proj = 0.0;
            for c in 0..ch {
                proj += e.values()[r * ch + c] * pooled.values()[r * ch + c];
            }
            logits.values_mut()[r] = lin_out.values()[r] + proj;
        }
        let trace = DiscTrace {
            ids: ids.to_vec(),
            c1,
            r1,
            c2,
            skc,
            nl,
            r2,
            mp_arg,
            pooled,
            e,
            linc,
            pre_pool_shape,
        };
        (logits, trace)
    }

    /// Reverse pass from per-sample logit gradients [n]. Returns the input
    /// gradient and parameter gradients in [`Self::params`] order.
    pub fn backward(&self, t: &DiscTrace, g_logits: &Tensor) -> (Tensor, Vec<Tensor>) {
        let n = g_logits.shape()[0];
        let ch = self.cfg.channels;
        // linear head
        let glin = g_logits.clone().reshaped(&[n, 1]).unwrap();
        let (g_pooled_lin, gw_lin, gb_lin) = self.lin.backward(&t.linc, &glin);
        // projection head: logit += <e[id], pooled>
        let mut g_pooled = g_pooled_lin;
        let mut g_embed_rows = Tensor::zeros(&[n, ch]);
        for r in 0..n {
            let g = g_logits.values()[r];
            for c in 0..ch {
                g_pooled.values_mut()[r * ch + c] += g * t.e.values()[r * ch + c];
                g_embed_rows.values_mut()[r * ch + c] = g * t.pooled.values()[r * ch + c];
            }
        }
        let g_table = self.embed.backward(&t.ids, &g_embed_rows);

        let gh5 = global_sum_pool_backward(
            &g_pooled,
            &[n, ch, t.pre_pool_shape[2] / 2, t.pre_pool_shape[3] / 2],
        );
        let gh4 = max_pool2_backward(&t.mp_arg, &gh5, &t.pre_pool_shape);
        let gh3 = relu_backward(&t.r2, &gh4);
        let (gh2, nl_grads) = match (&self.nonlocal, &t.nl) {
            (Some(block), Some(cache)) => block.backward(cache, &gh3),
            _ => (gh3, Vec::new()),
        };
        // residual block backward: y = avgpool(conv2(relu(conv1(x)))) + skip(avgpool(x))
        let (gs, gw_skip, gb_skip) = self.skip.backward(&t.skc, &gh2);
        let gx_skip = avg_pool2_backward(&gs);
        let gmain = avg_pool2_backward(&gh2);
        let (gmain, gw2, gb2) = self.conv2.backward(&t.c2, &gmain);
        let gmain = relu_backward(&t.r1, &gmain);
        let (gx_main, gw1, gb1) = self.conv1.backward(&t.c1, &gmain);
        let mut gx = gx_main;
        gx.add_assign(&gx_skip);

        let mut grads = vec![gw1, gb1, gw2, gb2, gw_skip, gb_skip];
        grads.extend(nl_grads);
        grads.push(gw_lin);
        grads.push(gb_lin);
        grads.push(g_table);
        (gx, grads)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = vec![
            &self.conv1.w,
            &self.conv1.b,
            &self.conv2.w,
            &self.conv2.b,
            &self.skip.w,
            &self.skip.b,
        ];
        if let Some(nl) = &self.nonlocal {
            p.extend(nl.params());
        }
        p.push(&self.lin.w);
        p.push(&self.lin.b);
        p.push(&self.embed.table);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = vec![
            &mut self.conv1.w,
            &mut self.conv1.b,
            &mut self.conv2.w,
            &mut self.conv2.b,
            &mut self.skip.w,
            &mut self.skip.b,
        ];
        if let Some(nl) = &mut self.nonlocal {
            p.extend(nl.params_mut());
        }
        p.push(&mut self.lin.w);
        p.push(&mut self.lin.b);
        p.push(&mut self.embed.table);
        p
    }

    /// Weight matrices subject to orthogonal regularization.
    pub(crate) fn regularized_weight_indices(&self) -> Vec<usize> {
        let mut idx = vec![0usize, 2, 4];
        let lin_w = if self.nonlocal.is_some() { 6 + 9 } else { 6 };
        idx.push(lin_w);
        idx
    }
}

/// Replicate a single-channel map to the 3 channels the discriminator
/// expects.
pub fn replicate_channels(x: &Tensor) -> Tensor {
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    assert_eq!(c, 1, "replicate_channels wants single-channel input");
    let plane = h * w;
    let mut y = Tensor::zeros(&[n, 3, h, w]);
    for b in 0..n {
        let src = &x.values()[b * plane..(b + 1) * plane];
        for ch in 0..3 {
            y.values_mut()[((b * 3) + ch) * plane..((b * 3) + ch + 1) * plane]
                .copy_from_slice(src);
        }
    }
    y
}

/// Adjoint of [`replicate_channels`]: sum the three channel gradients.
pub fn replicate_channels_backward(gy: &Tensor) -> Tensor {
    let [n, _, h, w] = [gy.shape()[0], gy.shape()[1], gy.shape()[2], gy.shape()[3]];
    let plane = h * w;
    let mut gx = Tensor::zeros(&[n, 1, h, w]);
    for b in 0..n {
        let dst = &mut gx.values_mut()[b * plane..(b + 1) * plane];
        for ch in 0..3 {
            let src = &gy.values()[((b * 3) + ch) * plane..((b * 3) + ch + 1) * plane];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    gx
}
