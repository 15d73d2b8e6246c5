//! Purification by latent projection: find the generator output whose
//! eigenvalue spectrum best matches a suspect spectrogram grid, then rebuild
//! the waveform from the synthesized magnitude and the untouched analysis
//! phase.
//!
//! The search is gradient-free: perturb the current latent candidate with a
//! uniformly scaled Gaussian step and keep the move only if the chordal loss
//! strictly decreases. The loss itself goes through a QZ decomposition, which
//! is not differentiated; an optional refinement stage polishes the winning
//! latent with gradient steps on a mean-squared surrogate, still gated on the
//! chordal loss never increasing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::ccgan::{Generator, Tensor};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::pencil::{chordal_loss, DEFAULT_BETA_TOLERANCE};
use crate::signal::Waveform;
use crate::tfa::{
    cwt_forward, cwt_inverse, from_rgb_range, resize_bilinear, to_rgb, unresize_bilinear,
    Spectrogram, SquareGrid, TfaConfig,
};

/// Cap on surrogate gradient-descent steps after the random search.
const MAX_REFINE_STEPS: usize = 50;
const REFINE_STEP_INIT: f64 = 0.05;
const REFINE_STEP_GROW: f64 = 1.2;
const REFINE_STEP_SHRINK: f64 = 0.5;
const REFINE_STEP_MIN: f64 = 1e-10;

/// How the defense learns the class id it conditions the generator on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassStrategy {
    /// The caller supplies the class.
    Known(usize),
    /// Run one search per class and keep the minimum-loss result.
    SearchAllClasses,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DefenseConfig {
    /// Proposal budget per restart.
    pub k_max: usize,
    /// Convergence threshold coefficient: stop at loss <= xi_coeff * mean
    /// eigenvalue magnitude of the target grid.
    pub xi_coeff: f64,
    /// Standard deviation of both the initial latent draw and the proposal
    /// noise.
    pub perturb_std: f64,
    /// Independent searches from fresh initial latents; best result wins.
    pub restarts: usize,
    pub class_strategy: ClassStrategy,
    /// Polish the winning latent with surrogate gradient steps.
    pub use_gradient_refinement: bool,
    pub seed: u64,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        DefenseConfig {
            k_max: 400,
            xi_coeff: 0.05,
            perturb_std: 0.4,
            restarts: 4,
            class_strategy: ClassStrategy::SearchAllClasses,
            use_gradient_refinement: false,
            seed: 0,
        }
    }
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_max < 1 {
            return Err(Error::BadConfig("k_max must be >= 1".into()));
        }
        if !(self.perturb_std > 0.0) {
            return Err(Error::BadConfig(format!(
                "perturb_std {} must be positive",
                self.perturb_std
            )));
        }
        if self.restarts < 1 {
            return Err(Error::BadConfig("restarts must be >= 1".into()));
        }
        if !(self.xi_coeff >= 0.0) {
            return Err(Error::BadConfig(format!("xi_coeff {} must be >= 0", self.xi_coeff)));
        }
        Ok(())
    }
}

/// Result of one latent search: the best latent found and how it was found.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub z_star: Vec<f64>,
    /// Proposals evaluated, summed over restarts (refinement steps are
    /// budgeted separately and not counted here).
    pub k_used: usize,
    /// Accepted-moves-only loss history of the winning restart; non-increasing.
    pub loss_trace: Vec<f64>,
    pub final_loss: f64,
    /// Whether final_loss reached the xi threshold.
    pub converged: bool,
}

/// Full purification record: the search outcome plus the reconstructed
/// waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct DefenseResult {
    pub z_star: Vec<f64>,
    pub class_used: usize,
    pub k_used: usize,
    pub loss_trace: Vec<f64>,
    pub final_loss: f64,
    pub converged: bool,
    pub output: Waveform,
}

// ---------------------------------------------------------------------------
// Latent search
// ---------------------------------------------------------------------------

/// Chordal-loss evaluations of generator outputs against one fixed target.
struct LossEval<'a> {
    gen: &'a Generator,
    target: &'a SquareGrid,
    class_id: usize,
}

impl LossEval<'_> {
    fn grid(&self, z: &[f64]) -> Result<SquareGrid> {
        let s = self.gen.cfg.resolution;
        let zt = Tensor::from_vec(&[1, z.len()], z.to_vec())?;
        let (gz, _) = self.gen.infer(&zt, &[self.class_id]);
        SquareGrid::new(Grid::from_vec(s, s, gz.values().to_vec())?, None)
    }

    /// Total chordal loss and the target's mean eigenvalue magnitude.
    fn loss(&self, z: &[f64]) -> Result<(f64, f64)> {
        let report = chordal_loss(&self.grid(z)?, self.target, DEFAULT_BETA_TOLERANCE)?;
        Ok((report.total, report.mean_eig_magnitude))
    }
}

/// Deterministic per-(class, restart) random stream, so restarts and
/// per-class searches are independent of execution order.
fn restart_rng(seed: u64, class_id: usize, restart: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((class_id as u64) << 16) | restart as u64);
    rng
}

fn gaussian_vec<R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

struct Restart {
    z: Vec<f64>,
    loss: f64,
    trace: Vec<f64>,
    k: usize,
    converged: bool,
}

/// One accept-if-better random search from a fresh initial latent.
fn run_restart(
    eval: &LossEval,
    cfg: &DefenseConfig,
    rng: &mut ChaCha8Rng,
    xi: &mut Option<f64>,
) -> Result<Restart> {
    let d = eval.gen.cfg.latent_dim;
    let mut z = gaussian_vec(rng, d, cfg.perturb_std);
    let (mut loss, mean_mag) = eval.loss(&z)?;
    let xi = *xi.get_or_insert(cfg.xi_coeff * mean_mag);
    let mut trace = vec![loss];
    let mut k = 0;
    while loss > xi && k < cfg.k_max {
        k += 1;
        // Uniform in (0, 1]: a zero scale would waste the proposal.
        let s = 1.0 - rng.random::<f64>();
        let eta = gaussian_vec(rng, d, cfg.perturb_std);
        let cand: Vec<f64> = z.iter().zip(&eta).map(|(&zi, &ei)| zi + s * ei).collect();
        // A proposal whose joint pencil defeats the QZ iteration is treated
        // as rejected rather than aborting the whole search.
        if let Ok((l, _)) = eval.loss(&cand) {
            if l < loss {
                z = cand;
                loss = l;
                trace.push(l);
            }
        }
    }
    Ok(Restart { z, loss, trace, k, converged: loss <= xi })
}

/// Polish `best` with gradient steps on the mean-squared grid distance, the
/// differentiable stand-in for the chordal loss. Every step is re-scored with
/// the true chordal loss and kept only if it strictly decreases; the step
/// size backtracks on rejection.
fn refine(eval: &LossEval, xi: f64, best: &mut Restart) -> Result<()> {
    let s = eval.gen.cfg.resolution;
    let cells = (s * s) as f64;
    let zt_shape = [1, eval.gen.cfg.latent_dim];
    let mut step = REFINE_STEP_INIT;
    for _ in 0..MAX_REFINE_STEPS {
        if best.loss <= xi || step < REFINE_STEP_MIN {
            break;
        }
        let zt = Tensor::from_vec(&zt_shape, best.z.clone())?;
        let (gz, trace) = eval.gen.infer(&zt, &[eval.class_id]);
        let gy: Vec<f64> = gz
            .values()
            .iter()
            .zip(eval.target.values().data())
            .map(|(&g, &t)| 2.0 * (g - t) / cells)
            .collect();
        let gy = Tensor::from_vec(gz.shape(), gy)?;
        let (g_z, _) = eval.gen.backward(&trace, &gy);
        let cand: Vec<f64> =
            best.z.iter().zip(g_z.values()).map(|(&zi, &gi)| zi - step * gi).collect();
        match eval.loss(&cand) {
            Ok((l, _)) if l < best.loss => {
                best.z = cand;
                best.loss = l;
                best.trace.push(l);
                step *= REFINE_STEP_GROW;
            }
            _ => step *= REFINE_STEP_SHRINK,
        }
    }
    best.converged = best.loss <= xi;
    Ok(())
}

/// Project `x` onto the generator's range for one class: accept-if-better
/// random search over the latent space, restarted from fresh draws, stopping
/// early once the total chordal loss falls to xi_coeff times the target's
/// mean eigenvalue magnitude.
pub fn latent_search(
    x: &SquareGrid,
    class_id: usize,
    gen: &Generator,
    cfg: &DefenseConfig,
) -> Result<SearchOutcome> {
    cfg.validate()?;
    if x.side() != gen.cfg.resolution {
        return Err(Error::ShapeMismatch(format!(
            "target grid is {0}x{0} but the generator emits {1}x{1}",
            x.side(),
            gen.cfg.resolution
        )));
    }
    if class_id >= gen.cfg.n_classes {
        return Err(Error::GeneratorUnavailable(format!(
            "class {class_id} outside the generator's {} classes",
            gen.cfg.n_classes
        )));
    }
    let eval = LossEval { gen, target: x, class_id };
    let mut xi = None;
    let mut best: Option<Restart> = None;
    let mut k_total = 0;
    for r in 0..cfg.restarts {
        let mut rng = restart_rng(cfg.seed, class_id, r);
        let out = run_restart(&eval, cfg, &mut rng, &mut xi)?;
        k_total += out.k;
        // Strict < keeps the earliest restart on ties, making the reduction
        // independent of any parallel execution order.
        if best.as_ref().map_or(true, |b| out.loss < b.loss) {
            best = Some(out);
        }
        if best.as_ref().is_some_and(|b| b.converged) {
            // Further restarts could only polish a loss already below xi.
            break;
        }
    }
    let mut best = best.expect("restarts >= 1");
    let xi = xi.expect("first restart ran");
    if cfg.use_gradient_refinement {
        refine(&eval, xi, &mut best)?;
    }
    Ok(SearchOutcome {
        z_star: best.z,
        k_used: k_total,
        loss_trace: best.trace,
        final_loss: best.loss,
        converged: best.converged,
    })
}

// ---------------------------------------------------------------------------
// Full pipeline
// ---------------------------------------------------------------------------

/// Swap a spectrogram's magnitude for the best generator reconstruction,
/// leaving the phase grid untouched. Returns the synthesized spectrogram,
/// the class the winning search conditioned on, and the search record.
pub fn purify_spectrogram(
    spec: &Spectrogram,
    gen: &Generator,
    cfg: &DefenseConfig,
) -> Result<(Spectrogram, usize, SearchOutcome)> {
    cfg.validate()?;
    let s = gen.cfg.resolution;
    let g = resize_bilinear(&spec.magnitude_db, s)?;
    let rgb = to_rgb(&g);
    // The generator works in the (-1, 1) tanh range, so the search target is
    // the normalized grid; norm_min/norm_max let the winner map back to dB.
    let normed = Grid::from_vec(s, s, rgb.data[..s * s].to_vec())?;
    let target = SquareGrid::new(normed, g.source_dims())?;

    let classes: Vec<usize> = match cfg.class_strategy {
        ClassStrategy::Known(c) => vec![c],
        ClassStrategy::SearchAllClasses => (0..gen.cfg.n_classes).collect(),
    };
    let mut best: Option<(usize, SearchOutcome)> = None;
    for &c in &classes {
        let out = latent_search(&target, c, gen, cfg)?;
        if best.as_ref().map_or(true, |(_, b)| out.final_loss < b.final_loss) {
            best = Some((c, out));
        }
    }
    let (class_used, search) = best.expect("n_classes >= 1");

    let zt = Tensor::from_vec(&[1, gen.cfg.latent_dim], search.z_star.clone())?;
    let (gz, _) = gen.infer(&zt, &[class_used]);
    let synth = Grid::from_vec(s, s, gz.values().to_vec())?;
    let synth_db = from_rgb_range(&synth, rgb.norm_min, rgb.norm_max);
    let native = unresize_bilinear(&SquareGrid::new(synth_db, g.source_dims())?)?;

    let purified = Spectrogram {
        magnitude_db: native,
        phase: spec.phase.clone(),
        config: spec.config.clone(),
        original_length: spec.original_length,
    };
    Ok((purified, class_used, search))
}

/// End-to-end defense: analyze the waveform, project its log-magnitude grid
/// onto the generator's range, and resynthesize with the original phase and
/// the quantization filter. The input waveform is never modified.
pub fn defend(
    x_in: &Waveform,
    gen: &Generator,
    tfa_cfg: &TfaConfig,
    cfg: &DefenseConfig,
) -> Result<DefenseResult> {
    let spec = cwt_forward(x_in, tfa_cfg)?;
    let (purified, class_used, search) = purify_spectrogram(&spec, gen, cfg)?;
    let output = cwt_inverse(&purified)?;
    Ok(DefenseResult {
        z_star: search.z_star,
        class_used,
        k_used: search.k_used,
        loss_trace: search.loss_trace,
        final_loss: search.final_loss,
        converged: search.converged,
        output,
    })
}
