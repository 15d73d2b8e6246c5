//! Iterated gradient-sign perturbation oracle against the probe classifier.
//! The heavyweight attacks on production recognizers are out of scope; this
//! keeps their evaluation shape (craft, inject, defend, score) at desk scale.
//!
//! The gradient travels the whole analysis path analytically: probe
//! cross-entropy -> replicated channels -> min-max normalization (including
//! the range terms through the extremal cells) -> bilinear resize adjoint ->
//! the log-magnitude chain rule -> the wavelet analysis adjoint, landing on
//! waveform samples. The attack takes several sign steps, each followed by
//! projection onto the max-norm ball the loudness bound allows, so the final
//! perturbation sits at the bound instead of merely under it.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::normalized_grid;
use crate::error::{Error, Result};
use crate::eval::probe::{cross_entropy, grid_batch, ProbeClassifier};
use crate::grid::Grid;
use crate::signal::{psd_distortion_db, relative_loudness_db, Perturbation, Waveform};
use crate::tfa::{
    coefficients, cwt_forward, resize_adjoint, resize_bilinear, synthesize_adjoint, to_rgb,
    TfaConfig,
};

/// Distortion measurements of a crafted perturbation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackReport {
    /// Peak loudness of the perturbation relative to the carrier, dB;
    /// `None` for an all-zero perturbation.
    pub relative_loudness_db: Option<f64>,
    /// Peak PSD distortion, dB; `None` when the signal is too short to frame
    /// or either PSD is degenerate.
    pub psd_distortion_db: Option<f64>,
    /// The class the step descends toward.
    pub target: usize,
}

const PSD_FRAME: usize = 256;
const PSD_HOP: usize = 128;
/// Sign-descent iterations; each re-evaluates the gradient at the current
/// iterate.
const ATTACK_STEPS: usize = 30;
/// Decay for the accumulated gradient direction; smooths the sign pattern
/// across steps so oscillating coordinates stop flapping at the ball's rim.
const MOMENTUM: f64 = 0.9;
/// Extra gradient evaluations per step at noise-jittered copies of the
/// iterate. The log-magnitude floor makes pointwise gradients spike on
/// near-silent cells whose influence saturates immediately; averaging over
/// jitter keeps only directions that survive a small neighborhood.
const SMOOTHING_DRAWS: usize = 2;
/// The descent is deterministic by construction: the random start and the
/// smoothing jitter come from a fixed-seed generator.
const ATTACK_SEED: u64 = 0x0A77_AC4D;

/// Craft a targeted perturbation: `ATTACK_STEPS` momentum-smoothed signed
/// gradient-descent steps on the probe's cross-entropy toward `target`,
/// every step projected back onto the max-norm ball of radius `min(eps,
/// amplitude at loudness_bound_db)`, so the result respects both caps by
/// construction.  The iterate with the lowest target loss wins, and the
/// loop exits early once the probe predicts the target class.
pub fn craft_perturbation(
    x: &Waveform,
    probe: &ProbeClassifier,
    target: usize,
    eps: f64,
    loudness_bound_db: f64,
    tfa_cfg: &TfaConfig,
) -> Result<(Perturbation, AttackReport)> {
    if !(eps >= 0.0) {
        return Err(Error::BadConfig(format!("eps {eps} must be >= 0")));
    }
    if target >= probe.n_classes {
        return Err(Error::BadConfig(format!(
            "target class {target} outside the probe's {} classes",
            probe.n_classes
        )));
    }

    let peak = x.samples.iter().fold(0.0_f64, |m, s| m.max(s.abs()));
    let radius = eps.min(peak * 10f64.powf(loudness_bound_db / 20.0));
    let step = 2.5 * radius / ATTACK_STEPS as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(ATTACK_SEED);
    let mut delta: Vec<f64> = (0..x.len())
        .map(|_| radius * (2.0 * rng.random::<f64>() - 1.0))
        .collect();
    let mut smoothed = vec![0.0; x.len()];
    let mut best: Option<(f64, Vec<f64>)> = None;
    let steps = if radius > 0.0 { ATTACK_STEPS } else { 0 };
    for _ in 0..steps {
        let mut g = waveform_gradient(&inject_delta(x, &delta), probe, target, tfa_cfg)?;
        for _ in 0..SMOOTHING_DRAWS {
            let jittered: Vec<f64> = delta
                .iter()
                .map(|d| d + 0.25 * radius * (2.0 * rng.random::<f64>() - 1.0))
                .collect();
            let gj = waveform_gradient(&inject_delta(x, &jittered), probe, target, tfa_cfg)?;
            for (a, b) in g.iter_mut().zip(&gj) {
                *a += b;
            }
        }
        let l1: f64 = g.iter().map(|v| v.abs()).sum();
        if l1 == 0.0 {
            break;
        }
        for ((m, d), &gv) in smoothed.iter_mut().zip(delta.iter_mut()).zip(&g) {
            *m = MOMENTUM * *m + gv / l1;
            // descend: the loss toward `target` shrinks along -gradient
            *d = (*d - step * m.signum()).clamp(-radius, radius);
        }
        let (loss, predicted) = target_loss(x, &delta, probe, target, tfa_cfg)?;
        if best.as_ref().is_none_or(|(b, _)| loss < *b) {
            best = Some((loss, delta.clone()));
        }
        if predicted == target {
            break;
        }
    }
    let delta = best.map_or(delta, |(_, d)| d);
    if delta.iter().all(|&d| d == 0.0) {
        return Ok((
            Perturbation::new(delta),
            AttackReport { relative_loudness_db: None, psd_distortion_db: None, target },
        ));
    }

    let mut perturbation = Perturbation::new(delta);
    let rel = relative_loudness_db(x, &perturbation)?;
    perturbation.loudness_db_rel = Some(rel);

    let psd = if x.len() >= PSD_FRAME {
        psd_distortion_db(x, &perturbation, PSD_FRAME, PSD_HOP).ok()
    } else {
        None
    };
    Ok((
        perturbation,
        AttackReport { relative_loudness_db: Some(rel), psd_distortion_db: psd, target },
    ))
}

/// `x + delta` without clipping, for gradient evaluation at an iterate.
fn inject_delta(x: &Waveform, delta: &[f64]) -> Waveform {
    Waveform {
        samples: x.samples.iter().zip(delta).map(|(a, b)| a + b).collect(),
        sample_rate: x.sample_rate,
        source_path: None,
    }
}

/// Probe loss toward `target` and the predicted class at `x + delta`,
/// scored the way a consumer hears it: samples clipped to the
/// representable range before analysis.
fn target_loss(
    x: &Waveform,
    delta: &[f64],
    probe: &ProbeClassifier,
    target: usize,
    tfa_cfg: &TfaConfig,
) -> Result<(f64, usize)> {
    let adv = Waveform {
        samples: x
            .samples
            .iter()
            .zip(delta)
            .map(|(a, b)| (a + b).clamp(-1.0, 1.0))
            .collect(),
        sample_rate: x.sample_rate,
        source_path: None,
    };
    let spec = cwt_forward(&adv, tfa_cfg)?;
    let grid = normalized_grid(&spec.magnitude_db, probe.resolution)?;
    let input = grid_batch(&[&grid], probe.resolution)?;
    let (logits, _) = probe.forward(&input);
    let (loss, _) = cross_entropy(&logits, &[target]);
    let row = logits.values();
    let mut predicted = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[predicted] {
            predicted = i;
        }
    }
    Ok((loss, predicted))
}

/// d(cross-entropy toward `target`) / d(waveform samples).
fn waveform_gradient(
    x: &Waveform,
    probe: &ProbeClassifier,
    target: usize,
    tfa_cfg: &TfaConfig,
) -> Result<Vec<f64>> {
    let s = probe.resolution;
    let spec = cwt_forward(x, tfa_cfg)?;
    let sq = resize_bilinear(&spec.magnitude_db, s)?;
    let rgb = to_rgb(&sq);
    let norm = Grid::from_vec(s, s, rgb.data[..s * s].to_vec())?;

    let input = grid_batch(&[&norm], s)?;
    let (logits, trace) = probe.forward(&input);
    let (_, glogits) = cross_entropy(&logits, &[target]);
    let (gx, _) = probe.backward(&trace, &glogits);

    // A constant magnitude grid normalizes to all zeros with no usable
    // direction, so its gradient vanishes.
    if rgb.norm_max <= rgb.norm_min {
        return Ok(vec![0.0; x.len()]);
    }

    // Channel sum undoes the replication. The normalization
    // n = (v - lo) * 2/d - 1 with d = hi - lo contributes the affine factor
    // 2/d at every cell, plus range terms through lo = min(v) at the
    // minimizing cell (dn/dlo = (n - 1)/d) and hi = max(v) at the maximizing
    // cell (dn/dhi = -(n + 1)/d).
    let d = rgb.norm_max - rgb.norm_min;
    let mut gsum = vec![0.0; s * s];
    for ch in 0..3 {
        let chan = &gx.values()[ch * s * s..(ch + 1) * s * s];
        for (a, &g) in gsum.iter_mut().zip(chan) {
            *a += g;
        }
    }
    let vals = sq.values().data();
    let (mut imin, mut imax) = (0usize, 0usize);
    for (i, &v) in vals.iter().enumerate() {
        if v < vals[imin] {
            imin = i;
        }
        if v > vals[imax] {
            imax = i;
        }
    }
    let mut glo = 0.0;
    let mut ghi = 0.0;
    for (c, &g) in gsum.iter().enumerate() {
        glo += g * (rgb.data[c] - 1.0) / d;
        ghi -= g * (rgb.data[c] + 1.0) / d;
    }
    let mut gsq: Vec<f64> = gsum.iter().map(|&g| g * 2.0 / d).collect();
    gsq[imin] += glo;
    gsq[imax] += ghi;
    let g_square = Grid::from_vec(s, s, gsq)?;
    let g_mag = resize_adjoint(&g_square, (spec.magnitude_db.rows(), spec.magnitude_db.cols()));

    // magnitude_db = 20*log10(|W| + eps), so d(db)/d|W| = 20/(ln10*(|W|+eps));
    // d|W|/dW is the unit phasor W/|W| (zero at W = 0).
    let coeffs = coefficients(&spec);
    let db_scale = 20.0 / std::f64::consts::LN_10;
    let g_coeffs: Vec<Vec<Complex64>> = coeffs
        .iter()
        .enumerate()
        .map(|(j, row)| {
            row.iter()
                .enumerate()
                .map(|(m, &w)| {
                    let a = w.norm();
                    if a == 0.0 {
                        Complex64::new(0.0, 0.0)
                    } else {
                        let g_abs = g_mag.at(j, m) * db_scale / (a + tfa_cfg.log_floor_eps);
                        w / a * g_abs
                    }
                })
                .collect()
        })
        .collect();
    Ok(synthesize_adjoint(&g_coeffs, tfa_cfg, x.len()))
}
