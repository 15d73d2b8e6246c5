//! Alternating adversarial training: one discriminator ascent step (binary
//! cross-entropy on logits) followed by `g_steps_per_d` generator steps with
//! the non-saturating loss, orthogonal regularization on both networks,
//! spectral normalization on the generator only, and collapse detection
//! that rolls back to the last snapshot taken before the discriminator's
//! real/fake accuracy saturated.
//!
//! Everything is single-threaded with fixed reduction order, so a fixed
//! seed reproduces the loss history bitwise.

use super::nets::{
    replicate_channels, replicate_channels_backward, Discriminator, DiscriminatorConfig,
    Generator, GeneratorConfig,
};
use super::opt::{orthogonal_regularizer, Adam};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::grid::Grid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Orthogonal-regularization strength added to both losses.
const BETA_ORTH: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Generator updates per discriminator update.
    pub g_steps_per_d: usize,
    /// Learning-rate multiplier applied once per epoch.
    pub lr_decay: f64,
    pub max_iters: usize,
    /// Consecutive iterations of saturated discriminator accuracy that
    /// count as mode collapse; also the snapshot cadence, so a snapshot
    /// from before any collapse window always exists.
    pub collapse_window: usize,
    pub seed: u64,
}

impl TrainingConfig {
    pub fn desk(max_iters: usize, seed: u64) -> Self {
        TrainingConfig {
            batch_size: 32,
            lr: 2e-4,
            beta1: 0.0,
            beta2: 0.9,
            g_steps_per_d: 2,
            lr_decay: 0.99,
            max_iters,
            collapse_window: 50,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::BadConfig(format!("learning rate {} must be positive", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::BadConfig(format!("{name} {b} must be in [0, 1)")));
            }
        }
        if !(0.0..=1.0).contains(&self.lr_decay) || self.lr_decay == 0.0 {
            return Err(Error::BadConfig(format!("lr_decay {} must be in (0, 1]", self.lr_decay)));
        }
        if self.batch_size == 0 || self.g_steps_per_d == 0 || self.collapse_window == 0 {
            return Err(Error::BadConfig(
                "batch size, generator steps, and collapse window must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Full training state at one instant; enough to run the generator
/// deterministically and to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub adam_g: Adam,
    pub adam_d: Adam,
    /// Completed training iterations.
    pub iteration: usize,
    /// Discriminator loss per iteration.
    pub d_loss: Vec<f64>,
    /// Generator loss per generator update (g_steps_per_d per iteration).
    pub g_loss: Vec<f64>,
    pub train_cfg: TrainingConfig,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
}

impl Checkpoint {
    pub fn generator(&self) -> &Generator {
        &self.generator
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Snapshots in iteration order; the last one is the selected model
    /// (on collapse: the newest snapshot predating the collapse window).
    pub checkpoints: Vec<Checkpoint>,
    /// Iteration count at which collapse was detected, if any.
    pub collapsed_at: Option<usize>,
    pub d_updates: usize,
    pub g_updates: usize,
}

impl TrainOutcome {
    /// The trained model to use: the final checkpoint, which on collapse is
    /// the last one from before the discriminator saturated.
    pub fn selected(&self) -> &Checkpoint {
        self.checkpoints.last().expect("training always emits a baseline checkpoint")
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Stack dataset images (by index) into one [batch, 1, s, s] tensor.
fn stack_batch(images: &[Tensor], idx: &[usize]) -> Tensor {
    let plane = images[0].len();
    let s = images[0].shape()[1];
    let mut out = Tensor::zeros(&[idx.len(), 1, s, s]);
    for (b, &i) in idx.iter().enumerate() {
        out.values_mut()[b * plane..(b + 1) * plane].copy_from_slice(images[i].values());
    }
    out
}

fn gaussian_batch(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::zeros(&[n, dim]);
    for v in t.values_mut() {
        *v = rng.sample::<f64, _>(StandardNormal);
    }
    t
}

struct Session<'a> {
    gen: Generator,
    disc: Discriminator,
    adam_g: Adam,
    adam_d: Adam,
    d_loss: Vec<f64>,
    g_loss: Vec<f64>,
    tcfg: &'a TrainingConfig,
}

impl Session<'_> {
    fn snapshot(&self, iteration: usize, rng: &ChaCha8Rng) -> Checkpoint {
        Checkpoint {
            generator: self.gen.clone(),
            discriminator: self.disc.clone(),
            adam_g: self.adam_g.clone(),
            adam_d: self.adam_d.clone(),
            iteration,
            d_loss: self.d_loss.clone(),
            g_loss: self.g_loss.clone(),
            train_cfg: self.tcfg.clone(),
            rng_seed: rng.get_seed(),
            rng_stream: rng.get_stream(),
            rng_word_pos: rng.get_word_pos(),
        }
    }
}

/// Train the conditional GAN on labeled square grids with entries in
/// [-1, 1]. Returns the snapshot sequence; see [`TrainOutcome::selected`]
/// for the model choice under collapse.
pub fn gan_train(
    data: &[(Grid, usize)],
    gcfg: &GeneratorConfig,
    dcfg: &DiscriminatorConfig,
    tcfg: &TrainingConfig,
) -> Result<TrainOutcome> {
    gcfg.validate()?;
    dcfg.validate()?;
    tcfg.validate()?;
    if gcfg.resolution != dcfg.resolution || gcfg.n_classes != dcfg.n_classes {
        return Err(Error::InconsistentConfig(
            "generator and discriminator disagree on resolution or class count".into(),
        ));
    }
    if data.is_empty() || tcfg.batch_size > data.len() {
        return Err(Error::BadConfig(format!(
            "batch size {} exceeds dataset size {}",
            tcfg.batch_size,
            data.len()
        )));
    }

    let s = gcfg.resolution;
    let mut class_counts = vec![0usize; gcfg.n_classes];
    let mut images = Vec::with_capacity(data.len());
    let mut labels = Vec::with_capacity(data.len());
    for (g, y) in data {
        if g.rows() != s || g.cols() != s {
            return Err(Error::ShapeMismatch(format!(
                "training grid {}x{} does not match resolution {s}",
                g.rows(),
                g.cols()
            )));
        }
        if !g.is_finite() || g.data().iter().any(|v| v.abs() > 1.0) {
            return Err(Error::BadConfig("training grids must have entries in [-1, 1]".into()));
        }
        if *y >= gcfg.n_classes {
            return Err(Error::BadConfig(format!(
                "label {y} out of range for {} classes",
                gcfg.n_classes
            )));
        }
        class_counts[*y] += 1;
        images.push(Tensor::from_vec(&[1, s, s], g.data().to_vec())?);
        labels.push(*y);
    }
    if let Some(c) = class_counts.iter().position(|&n| n == 0) {
        return Err(Error::EmptyClass(c));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let gen = Generator::new(gcfg, &mut rng)?;
    let disc = Discriminator::new(dcfg, &mut rng)?;
    let adam_g = Adam::new(&gen.params(), tcfg.beta1, tcfg.beta2);
    let adam_d = Adam::new(&disc.params(), tcfg.beta1, tcfg.beta2);
    let mut sess = Session {
        gen,
        disc,
        adam_g,
        adam_d,
        d_loss: Vec::with_capacity(tcfg.max_iters),
        g_loss: Vec::with_capacity(tcfg.max_iters * tcfg.g_steps_per_d),
        tcfg,
    };

    let b = tcfg.batch_size;
    let iters_per_epoch = data.len().div_ceil(b);
    let g_reg = sess.gen.regularized_weight_indices();
    let d_reg = sess.disc.regularized_weight_indices();

    let mut checkpoints = vec![sess.snapshot(0, &rng)];
    let mut saturated_streak = 0usize;
    let mut collapsed_at = None;
    let mut d_updates = 0usize;
    let mut g_updates = 0usize;

    for iter in 0..tcfg.max_iters {
        let lr = tcfg.lr * tcfg.lr_decay.powi((iter / iters_per_epoch) as i32);

        // -- discriminator step ---------------------------------------------
        let real_idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..data.len())).collect();
        let x_real = stack_batch(&images, &real_idx);
        let y_real: Vec<usize> = real_idx.iter().map(|&i| labels[i]).collect();
        let z = gaussian_batch(b, gcfg.latent_dim, &mut rng);
        let y_fake: Vec<usize> = (0..b).map(|_| rng.random_range(0..gcfg.n_classes)).collect();
        let (x_fake, _) = sess.gen.forward(&z, &y_fake, true);
        if !x_fake.is_finite() {
            return Err(Error::DivergedLoss(iter));
        }

        let (l_real, t_real) = sess.disc.forward(&replicate_channels(&x_real), &y_real);
        let (l_fake, t_fake) = sess.disc.forward(&replicate_channels(&x_fake), &y_fake);

        let mut loss_d = 0.0;
        let inv_b = 1.0 / b as f64;
        let mut gl_real = Tensor::zeros(&[b]);
        let mut gl_fake = Tensor::zeros(&[b]);
        let mut real_hits = 0usize;
        let mut fake_hits = 0usize;
        for i in 0..b {
            let lr_i = l_real.values()[i];
            let lf_i = l_fake.values()[i];
            loss_d += (softplus(-lr_i) + softplus(lf_i)) * inv_b;
            gl_real.values_mut()[i] = -sigmoid(-lr_i) * inv_b;
            gl_fake.values_mut()[i] = sigmoid(lf_i) * inv_b;
            real_hits += (lr_i > 0.0) as usize;
            fake_hits += (lf_i < 0.0) as usize;
        }
        let (_, grads_real) = sess.disc.backward(&t_real, &gl_real);
        let (_, grads_fake) = sess.disc.backward(&t_fake, &gl_fake);
        let mut d_grads = grads_real;
        for (a, b2) in d_grads.iter_mut().zip(&grads_fake) {
            a.add_assign(b2);
        }
        for &wi in &d_reg {
            let (penalty, grad) = orthogonal_regularizer(sess.disc.params()[wi], BETA_ORTH);
            loss_d += penalty;
            d_grads[wi].add_assign(&grad);
        }
        if !loss_d.is_finite() {
            return Err(Error::DivergedLoss(iter));
        }
        sess.d_loss.push(loss_d);
        let mut d_params = sess.disc.params_mut();
        sess.adam_d.step(&mut d_params, &d_grads, lr);
        d_updates += 1;

        // -- generator steps --------------------------------------------------
        for _ in 0..tcfg.g_steps_per_d {
            let z = gaussian_batch(b, gcfg.latent_dim, &mut rng);
            let y: Vec<usize> = (0..b).map(|_| rng.random_range(0..gcfg.n_classes)).collect();
            let (x_fake, g_trace) = sess.gen.forward(&z, &y, true);
            if !x_fake.is_finite() {
                return Err(Error::DivergedLoss(iter));
            }
            let (l, d_trace) = sess.disc.forward(&replicate_channels(&x_fake), &y);
            let mut loss_g = 0.0;
            let mut gl = Tensor::zeros(&[b]);
            for i in 0..b {
                loss_g += softplus(-l.values()[i]) * inv_b;
                gl.values_mut()[i] = -sigmoid(-l.values()[i]) * inv_b;
            }
            let (gx3, _) = sess.disc.backward(&d_trace, &gl);
            let gy = replicate_channels_backward(&gx3);
            let (_, mut g_grads) = sess.gen.backward(&g_trace, &gy);
            for &wi in &g_reg {
                let (penalty, grad) = orthogonal_regularizer(sess.gen.params()[wi], BETA_ORTH);
                loss_g += penalty;
                g_grads[wi].add_assign(&grad);
            }
            if !loss_g.is_finite() {
                return Err(Error::DivergedLoss(iter));
            }
            sess.g_loss.push(loss_g);
            let mut g_params = sess.gen.params_mut();
            sess.adam_g.step(&mut g_params, &g_grads, lr);
            g_updates += 1;
        }

        // -- collapse detection and snapshots ---------------------------------
        let done = iter + 1;
        if real_hits as f64 * inv_b > 0.99 && fake_hits as f64 * inv_b > 0.99 {
            saturated_streak += 1;
        } else {
            saturated_streak = 0;
        }
        if saturated_streak >= tcfg.collapse_window {
            collapsed_at = Some(done);
            // keep only snapshots from before the discriminator saturated
            let cutoff = done - tcfg.collapse_window;
            checkpoints.retain(|c| c.iteration <= cutoff);
            break;
        }
        if done % tcfg.collapse_window == 0 {
            checkpoints.push(sess.snapshot(done, &rng));
        }
    }

    if collapsed_at.is_none()
        && checkpoints.last().map(|c| c.iteration) != Some(tcfg.max_iters)
    {
        checkpoints.push(sess.snapshot(tcfg.max_iters, &rng));
    }

    Ok(TrainOutcome { checkpoints, collapsed_at, d_updates, g_updates })
}
