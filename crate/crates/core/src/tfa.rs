//! Time-frequency analysis: complex-Morlet wavelet spectrograms, bilinear
//! resizing to the square working resolution, and phase-preserving inversion.
//!
//! The analysis is a discretized continuous wavelet transform over log-spaced
//! scales. A critically-sampled orthogonal DWT would not expose the per-cell
//! complex phase that the reconstruction stage depends on, so the analytic
//! Morlet CWT is used instead; kernels are truncated to the 50 ms frame
//! window, and columns are evaluated every `hop` samples.

use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::grid::Grid;
use crate::signal::{Waveform, SAMPLE_RATE};
use crate::{Error, Result};

pub const DEFAULT_SQUARE: usize = 128;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TfaConfig {
    pub n_scales: usize,
    pub freq_min: f64,
    pub freq_max: f64,
    /// Wavelet support cap per analysis column, milliseconds.
    pub frame_len_ms: f64,
    /// Column spacing in samples.
    pub hop: usize,
    /// Morlet center frequency omega0 (dimensionless).
    pub morlet_center: f64,
    /// Additive floor inside the log-magnitude map.
    pub log_floor_eps: f64,
}

impl Default for TfaConfig {
    fn default() -> Self {
        TfaConfig {
            n_scales: 128,
            freq_min: 80.0,
            freq_max: 7600.0,
            frame_len_ms: 50.0,
            hop: 256,
            morlet_center: 6.0,
            log_floor_eps: 1e-10,
        }
    }
}

impl TfaConfig {
    pub fn validate(&self) -> Result<()> {
        let nyquist = SAMPLE_RATE as f64 / 2.0;
        if !(self.freq_min > 0.0 && self.freq_min < self.freq_max && self.freq_max <= nyquist) {
            return Err(Error::BadConfig(format!(
                "frequency band [{}, {}] must satisfy 0 < min < max <= {}",
                self.freq_min, self.freq_max, nyquist
            )));
        }
        if self.n_scales < 2 {
            return Err(Error::BadConfig(format!("n_scales {} < 2", self.n_scales)));
        }
        if self.hop < 1 {
            return Err(Error::BadConfig("hop must be >= 1".into()));
        }
        if self.morlet_center < 5.0 {
            return Err(Error::BadConfig(format!(
                "morlet_center {} below admissibility regime (>= 5)",
                self.morlet_center
            )));
        }
        if !(self.frame_len_ms > 0.0) {
            return Err(Error::BadConfig("frame_len_ms must be positive".into()));
        }
        if !(self.log_floor_eps > 0.0) {
            return Err(Error::BadConfig("log_floor_eps must be positive".into()));
        }
        Ok(())
    }

    /// Minimum analyzable signal length: one frame window.
    pub fn min_samples(&self) -> usize {
        (self.frame_len_ms / 1000.0 * SAMPLE_RATE as f64).round() as usize
    }

    /// Log-spaced center frequencies, ascending, `n_scales` of them.
    pub fn center_frequencies(&self) -> Vec<f64> {
        let n = self.n_scales;
        let ratio = self.freq_max / self.freq_min;
        (0..n)
            .map(|j| self.freq_min * ratio.powf(j as f64 / (n - 1) as f64))
            .collect()
    }

    /// Morlet scale (in samples) for a center frequency in Hz.
    pub fn scale_for_frequency(&self, f_hz: f64) -> f64 {
        self.morlet_center * SAMPLE_RATE as f64 / (2.0 * std::f64::consts::PI * f_hz)
    }

    pub fn magnitude_floor_db(&self) -> f64 {
        20.0 * self.log_floor_eps.log10()
    }
}

/// Complex-wavelet spectrogram split into log magnitude and phase.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    /// `20*log10(|W| + eps)`, n_scales x n_frames, row = scale (ascending frequency).
    pub magnitude_db: Grid,
    /// `arg(W)` in (-pi, pi], same dims.
    pub phase: Grid,
    pub config: TfaConfig,
    pub original_length: usize,
}

impl Spectrogram {
    pub fn validate(&self) -> Result<()> {
        if self.magnitude_db.rows() != self.phase.rows()
            || self.magnitude_db.cols() != self.phase.cols()
        {
            return Err(Error::InconsistentConfig(format!(
                "magnitude {}x{} vs phase {}x{}",
                self.magnitude_db.rows(),
                self.magnitude_db.cols(),
                self.phase.rows(),
                self.phase.cols()
            )));
        }
        if self.magnitude_db.rows() != self.config.n_scales {
            return Err(Error::InconsistentConfig(format!(
                "grid has {} rows but config declares {} scales",
                self.magnitude_db.rows(),
                self.config.n_scales
            )));
        }
        self.config.validate()
    }
}

/// Square working grid plus the native dimensions it was resized from.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareGrid {
    values: Grid,
    source_dims: Option<(usize, usize)>,
}

impl SquareGrid {
    pub fn new(values: Grid, source_dims: Option<(usize, usize)>) -> Result<Self> {
        if !values.is_square() {
            return Err(Error::ShapeMismatch(format!(
                "square grid required, got {}x{}",
                values.rows(),
                values.cols()
            )));
        }
        if values.rows() < 8 {
            return Err(Error::GridTooSmall { rows: values.rows(), cols: values.cols() });
        }
        Ok(SquareGrid { values, source_dims })
    }

    pub fn side(&self) -> usize {
        self.values.rows()
    }

    pub fn values(&self) -> &Grid {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Grid {
        &mut self.values
    }

    pub fn source_dims(&self) -> Option<(usize, usize)> {
        self.source_dims
    }
}

/// Channel-replicated normalized grid: 3 identical S x S channels in [-1, 1],
/// with the dB range recorded so generator output can be mapped back.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbGrid {
    pub side: usize,
    /// Channel-major: 3 * side * side.
    pub data: Vec<f64>,
    /// Source grid min/max used for the affine map (equal when degenerate).
    pub norm_min: f64,
    pub norm_max: f64,
}

// ---------------------------------------------------------------------------
// Bilinear resizing
// ---------------------------------------------------------------------------

/// Corner-aligned bilinear sample of `g` at fractional position (r, c).
fn bilinear_at(g: &Grid, r: f64, c: f64) -> f64 {
    let r0 = r.floor() as usize;
    let c0 = c.floor() as usize;
    let r1 = (r0 + 1).min(g.rows() - 1);
    let c1 = (c0 + 1).min(g.cols() - 1);
    let fr = r - r0 as f64;
    let fc = c - c0 as f64;
    let top = g.at(r0, c0) * (1.0 - fc) + g.at(r0, c1) * fc;
    let bot = g.at(r1, c0) * (1.0 - fc) + g.at(r1, c1) * fc;
    top * (1.0 - fr) + bot * fr
}

/// Corner-aligned bilinear interpolation of an arbitrary grid to any target
/// shape. Output values stay within [min, max] of the input (convexity).
pub fn resize_grid(g: &Grid, rows: usize, cols: usize) -> Result<Grid> {
    if g.rows() < 2 || g.cols() < 2 {
        return Err(Error::GridTooSmall { rows: g.rows(), cols: g.cols() });
    }
    if rows == 0 || cols == 0 {
        return Err(Error::BadConfig("resize target must be nonzero".into()));
    }
    if rows == g.rows() && cols == g.cols() {
        return Ok(g.clone());
    }
    let rstep = if rows > 1 { (g.rows() - 1) as f64 / (rows - 1) as f64 } else { 0.0 };
    let cstep = if cols > 1 { (g.cols() - 1) as f64 / (cols - 1) as f64 } else { 0.0 };
    Ok(Grid::from_fn(rows, cols, |r, c| bilinear_at(g, r as f64 * rstep, c as f64 * cstep)))
}

/// Resize any source grid to S x S, recording the source dims for unresize.
pub fn resize_bilinear(g: &Grid, target: usize) -> Result<SquareGrid> {
    if target < 8 {
        return Err(Error::BadConfig(format!("square resolution {target} < 8")));
    }
    let values = resize_grid(g, target, target)?;
    SquareGrid::new(values, Some((g.rows(), g.cols())))
}

/// Map an S x S grid back to the native dimensions recorded at resize time.
pub fn unresize_bilinear(g: &SquareGrid) -> Result<Grid> {
    let (rows, cols) = g.source_dims().ok_or(Error::MissingSourceDims)?;
    resize_grid(g.values(), rows, cols)
}

/// Adjoint (transpose) of the corner-aligned bilinear resize from
/// `source_dims` to S x S: scatters a gradient on the square grid back to
/// native dimensions. This is the linearization used for gradient plumbing,
/// distinct from `unresize_bilinear` which interpolates values.
pub fn resize_adjoint(grad: &Grid, source_dims: (usize, usize)) -> Grid {
    let (rows, cols) = source_dims;
    let mut out = Grid::zeros(rows, cols);
    let s_r = grad.rows();
    let s_c = grad.cols();
    let rstep = if s_r > 1 { (rows - 1) as f64 / (s_r - 1) as f64 } else { 0.0 };
    let cstep = if s_c > 1 { (cols - 1) as f64 / (s_c - 1) as f64 } else { 0.0 };
    for r in 0..s_r {
        for c in 0..s_c {
            let g = grad.at(r, c);
            if g == 0.0 {
                continue;
            }
            let sr = r as f64 * rstep;
            let sc = c as f64 * cstep;
            let r0 = sr.floor() as usize;
            let c0 = sc.floor() as usize;
            let r1 = (r0 + 1).min(rows - 1);
            let c1 = (c0 + 1).min(cols - 1);
            let fr = sr - r0 as f64;
            let fc = sc - c0 as f64;
            *out.data_mut().get_mut(r0 * cols + c0).unwrap() += g * (1.0 - fr) * (1.0 - fc);
            *out.data_mut().get_mut(r0 * cols + c1).unwrap() += g * (1.0 - fr) * fc;
            *out.data_mut().get_mut(r1 * cols + c0).unwrap() += g * fr * (1.0 - fc);
            *out.data_mut().get_mut(r1 * cols + c1).unwrap() += g * fr * fc;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// RGB normalization
// ---------------------------------------------------------------------------

/// Min-max normalize to [-1, 1] and replicate into three identical channels.
/// A constant grid maps to all-zero channels (degenerate range policy) with
/// min == max recorded.
pub fn to_rgb(g: &SquareGrid) -> RgbGrid {
    let (lo, hi) = g.values().min_max();
    let s = g.side();
    let mut chan = Vec::with_capacity(s * s);
    if hi > lo {
        let scale = 2.0 / (hi - lo);
        for &v in g.values().data() {
            chan.push((v - lo) * scale - 1.0);
        }
    } else {
        chan.resize(s * s, 0.0);
    }
    let mut data = Vec::with_capacity(3 * s * s);
    for _ in 0..3 {
        data.extend_from_slice(&chan);
    }
    RgbGrid { side: s, data, norm_min: lo, norm_max: hi }
}

/// Invert the `to_rgb` affine map for one channel's worth of values in
/// [-1, 1], restoring the recorded dB range. Degenerate range maps every
/// value back to the recorded constant.
pub fn from_rgb_range(values: &Grid, norm_min: f64, norm_max: f64) -> Grid {
    if norm_max > norm_min {
        let half = (norm_max - norm_min) / 2.0;
        Grid::from_fn(values.rows(), values.cols(), |r, c| {
            (values.at(r, c) + 1.0) * half + norm_min
        })
    } else {
        Grid::from_fn(values.rows(), values.cols(), |_, _| norm_min)
    }
}

// ---------------------------------------------------------------------------
// Forward transform
// ---------------------------------------------------------------------------

/// One truncated, sampled Morlet kernel: psi(t) = pi^(-1/4) a^(-1/2)
/// exp(-(t/a)^2/2) exp(i w0 t / a) for t in [-half, half].
struct MorletKernel {
    half: usize,
    /// Samples at t = -half..=half.
    taps: Vec<Complex64>,
}

/// Kernel half-width in samples: four e-foldings of the Gaussian envelope,
/// capped by the configured frame window.
fn kernel_half(cfg: &TfaConfig, scale: f64) -> usize {
    let frame_half = ((cfg.frame_len_ms / 1000.0 * SAMPLE_RATE as f64) / 2.0).round() as usize;
    ((4.0 * scale).ceil() as usize).clamp(1, frame_half.max(1))
}

/// Widest kernel half-width of the configured scale bank; the amount of
/// internal zero-padding analysis and synthesis agree on, so kernels never
/// overhang the signal edges.
pub(crate) fn max_kernel_half(cfg: &TfaConfig) -> usize {
    cfg.center_frequencies()
        .iter()
        .map(|&f| kernel_half(cfg, cfg.scale_for_frequency(f)))
        .max()
        .unwrap_or(1)
}

fn morlet_kernel(cfg: &TfaConfig, scale: f64) -> MorletKernel {
    let half = kernel_half(cfg, scale);
    let norm = std::f64::consts::PI.powf(-0.25) / scale.sqrt();
    let taps = (-(half as isize)..=half as isize)
        .map(|t| {
            let u = t as f64 / scale;
            let gauss = (-0.5 * u * u).exp();
            Complex64::from_polar(norm * gauss, cfg.morlet_center * u)
        })
        .collect();
    MorletKernel { half, taps }
}

fn next_pow2(n: usize) -> usize {
    n.next_power_of_two()
}

/// Number of analysis columns for a signal of `len` samples.
fn frame_count(len: usize, hop: usize) -> usize {
    (len - 1) / hop + 1
}

/// Forward complex-Morlet wavelet spectrogram: coefficients
/// W(j, m) = sum_t x(t) conj(psi_j(t - m*hop)), stored as log magnitude and
/// phase. Kernels are evaluated by FFT convolution, which matches direct
/// convolution to rounding error. The signal is zero-padded internally by
/// the widest kernel half-width so frames cover the edges; frame m is
/// centered at sample m*hop - pad of the original signal.
pub fn cwt_forward(w: &Waveform, cfg: &TfaConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    let min = cfg.min_samples();
    if w.len() < min {
        return Err(Error::SignalTooShort { len: w.len(), min });
    }

    let freqs = cfg.center_frequencies();
    let scales: Vec<f64> = freqs.iter().map(|&f| cfg.scale_for_frequency(f)).collect();
    let kernels: Vec<MorletKernel> = scales.iter().map(|&a| morlet_kernel(cfg, a)).collect();
    let max_half = kernels.iter().map(|k| k.half).max().unwrap();

    let len = w.len();
    let pad = max_half;
    let padded_len = len + 2 * pad;
    let n_frames = frame_count(padded_len, cfg.hop);
    let fft_len = next_pow2(padded_len + 2 * max_half + 1);

    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(fft_len);
    let ifft = planner.plan_fft_inverse(fft_len);

    // Signal spectrum once.
    let mut sig = vec![Complex64::new(0.0, 0.0); fft_len];
    for (i, &s) in w.samples.iter().enumerate() {
        sig[i + pad] = Complex64::new(s, 0.0);
    }
    fft.process(&mut sig);

    let mut mag = Grid::zeros(cfg.n_scales, n_frames);
    let mut phase = Grid::zeros(cfg.n_scales, n_frames);

    let mut kbuf = vec![Complex64::new(0.0, 0.0); fft_len];
    let mut conv = vec![Complex64::new(0.0, 0.0); fft_len];
    let inv_scale = 1.0 / fft_len as f64;

    for (j, kernel) in kernels.iter().enumerate() {
        // Correlation with the conjugate kernel: place conj taps so that tap
        // t sits at signal offset +t, i.e. reversed-conjugated impulse
        // response h(u) = conj(psi(-u)) centered with wraparound.
        for v in kbuf.iter_mut() {
            *v = Complex64::new(0.0, 0.0);
        }
        let h = kernel.half as isize;
        for (ti, tap) in kernel.taps.iter().enumerate() {
            let t = ti as isize - h; // tap position in psi
            // h(u) = conj(psi(t)) at u = -t  -> index (-t) mod fft_len
            let idx = ((-t).rem_euclid(fft_len as isize)) as usize;
            kbuf[idx] = tap.conj();
        }
        fft.process(&mut kbuf);
        for i in 0..fft_len {
            conv[i] = sig[i] * kbuf[i];
        }
        ifft.process(&mut conv);
        for m in 0..n_frames {
            let wv = conv[m * cfg.hop] * inv_scale;
            let a = wv.norm();
            mag.set(j, m, 20.0 * (a + cfg.log_floor_eps).log10());
            let mut ph = if a == 0.0 { 0.0 } else { wv.im.atan2(wv.re) };
            if ph <= -std::f64::consts::PI {
                ph = std::f64::consts::PI;
            }
            phase.set(j, m, ph);
        }
    }

    Ok(Spectrogram { magnitude_db: mag, phase, config: cfg.clone(), original_length: len })
}

// ---------------------------------------------------------------------------
// Inverse transform
// ---------------------------------------------------------------------------

/// Rebuild complex coefficients from the stored log magnitude and phase.
/// Values at (or below) the log floor decode to exactly zero, so silent
/// cells cannot leak rounding residue into the synthesis.
pub(crate) fn coefficients(s: &Spectrogram) -> Vec<Vec<Complex64>> {
    let eps = s.config.log_floor_eps;
    let floor = s.config.magnitude_floor_db();
    (0..s.magnitude_db.rows())
        .map(|j| {
            (0..s.magnitude_db.cols())
                .map(|m| {
                    let db = s.magnitude_db.at(j, m);
                    let a = if db <= floor {
                        0.0
                    } else {
                        (10f64.powf(db / 20.0) - eps).max(0.0)
                    };
                    Complex64::from_polar(a, s.phase.at(j, m))
                })
                .collect()
        })
        .collect()
}

/// Overlap-add synthesis from coefficients: y(t) = sum_{j,m} w_j *
/// Re[W(j,m) psi_j(t - m hop)], the delta-function reconstruction with
/// per-scale weights w_j = dln(a)/sqrt(a_j). Also the exact adjoint of the
/// forward analysis when w_j = 1 (used by gradient plumbing).
pub(crate) fn synthesize(
    coeffs: &[Vec<Complex64>],
    cfg: &TfaConfig,
    out_len: usize,
    scale_weights: Option<&[f64]>,
) -> Vec<f64> {
    let freqs = cfg.center_frequencies();
    let scales: Vec<f64> = freqs.iter().map(|&f| cfg.scale_for_frequency(f)).collect();
    let mut out = vec![0.0; out_len];
    for (j, row) in coeffs.iter().enumerate() {
        let kernel = morlet_kernel(cfg, scales[j]);
        let wj = scale_weights.map(|w| w[j]).unwrap_or(1.0);
        if wj == 0.0 {
            continue;
        }
        let h = kernel.half as isize;
        for (m, &c) in row.iter().enumerate() {
            if c.re == 0.0 && c.im == 0.0 {
                continue;
            }
            let center = (m * cfg.hop) as isize;
            let lo = (center - h).max(0);
            let hi = (center + h).min(out_len as isize - 1);
            for t in lo..=hi {
                let tap = kernel.taps[(t - center + h) as usize];
                out[t as usize] += wj * (c * tap).re;
            }
        }
    }
    out
}

/// Frequency response of analysis-then-weighted-synthesis, computed from
/// the actual truncated kernels. Taking the real part of the complex
/// overlap-add maps a real input spectrum X(w) to X(w) * G(w) / hop with
/// G(w) = (S(w) + S(-w)) / 2 and S(w) = sum_j w_j |psi_hat_j(w)|^2; the
/// symmetrization matters because the analytic kernels have no
/// negative-frequency energy while the synthesized signal does. Dividing
/// the synthesized spectrum by G equalizes the gain across the band.
fn frame_response(cfg: &TfaConfig, weights: &[f64], fft_len: usize) -> Vec<f64> {
    let freqs = cfg.center_frequencies();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(fft_len);
    let mut s = vec![0.0; fft_len];
    let mut buf = vec![Complex64::new(0.0, 0.0); fft_len];
    for (j, &f) in freqs.iter().enumerate() {
        let kernel = morlet_kernel(cfg, cfg.scale_for_frequency(f));
        for v in buf.iter_mut() {
            *v = Complex64::new(0.0, 0.0);
        }
        let h = kernel.half as isize;
        for (ti, tap) in kernel.taps.iter().enumerate() {
            let t = ti as isize - h;
            let idx = t.rem_euclid(fft_len as isize) as usize;
            buf[idx] = *tap;
        }
        fft.process(&mut buf);
        for (i, v) in buf.iter().enumerate() {
            s[i] += weights[j] * v.norm_sqr();
        }
    }
    let c = 1.0 / (2.0 * cfg.hop as f64);
    (0..fft_len).map(|i| c * (s[i] + s[(fft_len - i) % fft_len])).collect()
}

/// Peak-normalize to [-1, 1] and round onto the 16-bit grid. An all-zero
/// input stays all-zero (the silent case emits zeros rather than erroring).
pub fn quantization_filter(samples: &[f64]) -> Vec<f64> {
    let peak = samples.iter().fold(0.0_f64, |m, s| m.max(s.abs()));
    if peak == 0.0 {
        return vec![0.0; samples.len()];
    }
    samples
        .iter()
        .map(|s| {
            let v = (s / peak * 32768.0).round().clamp(-32768.0, 32767.0);
            v / 32768.0
        })
        .collect()
}

/// Adjoint of the forward analysis map (coefficients -> signal domain),
/// trimmed to the original signal length. Used to pull gradients on
/// complex coefficients back onto waveform samples.
pub(crate) fn synthesize_adjoint(
    coeffs: &[Vec<Complex64>],
    cfg: &TfaConfig,
    len: usize,
) -> Vec<f64> {
    let pad = max_kernel_half(cfg);
    let full = synthesize(coeffs, cfg, len + 2 * pad, None);
    full[pad..pad + len].to_vec()
}

/// Phase-preserving inversion: delta-function overlap-add synthesis weighted
/// by scale^(-1/2), followed by frequency-domain gain equalization against
/// the numerically computed frame response, then the quantization filter
/// (peak normalization + 16-bit rounding). Synthesis runs over the same
/// padded domain the analysis used, so edge frames land where they were
/// measured; the pad is trimmed after equalization.
pub fn cwt_inverse(s: &Spectrogram) -> Result<Waveform> {
    s.validate()?;
    let cfg = &s.config;
    let coeffs = coefficients(s);
    let freqs = cfg.center_frequencies();
    let dln = (freqs[1] / freqs[0]).ln();
    let weights: Vec<f64> =
        freqs.iter().map(|&f| dln / cfg.scale_for_frequency(f).sqrt()).collect();

    let pad = max_kernel_half(cfg);
    let len = s.original_length;
    let padded_len = len + 2 * pad;
    let raw = synthesize(&coeffs, cfg, padded_len, Some(&weights));

    // Equalize: divide the spectrum by the analysis-synthesis response,
    // regularized so out-of-band noise is not amplified.
    let fft_len = next_pow2(padded_len.max(2) * 2);
    let g = frame_response(cfg, &weights, fft_len);
    let gmax = g.iter().fold(0.0_f64, |m, &v| m.max(v));
    if gmax == 0.0 {
        return Ok(Waveform {
            samples: quantization_filter(&raw[pad..pad + len]),
            sample_rate: SAMPLE_RATE,
            source_path: None,
        });
    }
    let floor = 1e-3 * gmax;
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(fft_len);
    let ifft = planner.plan_fft_inverse(fft_len);
    let mut buf = vec![Complex64::new(0.0, 0.0); fft_len];
    for (i, &v) in raw.iter().enumerate() {
        buf[i] = Complex64::new(v, 0.0);
    }
    fft.process(&mut buf);
    for (i, v) in buf.iter_mut().enumerate() {
        *v /= g[i].max(floor);
    }
    ifft.process(&mut buf);
    let inv = 1.0 / fft_len as f64;
    let eq: Vec<f64> = buf[pad..pad + len].iter().map(|c| c.re * inv).collect();

    Ok(Waveform { samples: quantization_filter(&eq), sample_rate: SAMPLE_RATE, source_path: None })
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

const SPEC_MAGIC: &[u8; 4] = b"CWSP";
const SPEC_VERSION: u8 = 1;

/// Flat binary container: magic, version, config fields, dims, then
/// row-major magnitude and phase as little-endian f64.
pub fn save_spectrogram(path: &Path, s: &Spectrogram) -> Result<()> {
    s.validate()?;
    let file = std::fs::File::create(path)?;
    let mut out = std::io::BufWriter::new(file);
    out.write_all(SPEC_MAGIC)?;
    out.write_all(&[SPEC_VERSION])?;
    let c = &s.config;
    out.write_all(&(c.n_scales as u64).to_le_bytes())?;
    out.write_all(&c.freq_min.to_le_bytes())?;
    out.write_all(&c.freq_max.to_le_bytes())?;
    out.write_all(&c.frame_len_ms.to_le_bytes())?;
    out.write_all(&(c.hop as u64).to_le_bytes())?;
    out.write_all(&c.morlet_center.to_le_bytes())?;
    out.write_all(&c.log_floor_eps.to_le_bytes())?;
    out.write_all(&(s.original_length as u64).to_le_bytes())?;
    out.write_all(&(s.magnitude_db.rows() as u64).to_le_bytes())?;
    out.write_all(&(s.magnitude_db.cols() as u64).to_le_bytes())?;
    for &v in s.magnitude_db.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    for &v in s.phase.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| Error::CorruptFile(format!("truncated {what}")))?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read, what: &str) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| Error::CorruptFile(format!("truncated {what}")))?;
    Ok(f64::from_le_bytes(b))
}

pub fn load_spectrogram(path: &Path) -> Result<Spectrogram> {
    let file = std::fs::File::open(path)?;
    let mut r = std::io::BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::CorruptFile(format!("{}: missing header", path.display())))?;
    if &magic != SPEC_MAGIC {
        return Err(Error::UnsupportedFormat(format!(
            "{}: not a spectrogram container",
            path.display()
        )));
    }
    let mut ver = [0u8; 1];
    r.read_exact(&mut ver)
        .map_err(|_| Error::CorruptFile(format!("{}: missing version", path.display())))?;
    if ver[0] != SPEC_VERSION {
        return Err(Error::UnsupportedFormat(format!(
            "{}: spectrogram container version {} (expected {})",
            path.display(),
            ver[0],
            SPEC_VERSION
        )));
    }
    let n_scales = read_u64(&mut r, "n_scales")? as usize;
    let freq_min = read_f64(&mut r, "freq_min")?;
    let freq_max = read_f64(&mut r, "freq_max")?;
    let frame_len_ms = read_f64(&mut r, "frame_len_ms")?;
    let hop = read_u64(&mut r, "hop")? as usize;
    let morlet_center = read_f64(&mut r, "morlet_center")?;
    let log_floor_eps = read_f64(&mut r, "log_floor_eps")?;
    let original_length = read_u64(&mut r, "original_length")? as usize;
    let rows = read_u64(&mut r, "rows")? as usize;
    let cols = read_u64(&mut r, "cols")? as usize;
    if rows != n_scales || rows == 0 || cols == 0 || rows * cols > (1 << 28) {
        return Err(Error::CorruptFile(format!("{}: implausible dims {rows}x{cols}", path.display())));
    }
    let mut read_grid = |what: &str| -> Result<Grid> {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(read_f64(&mut r, what)?);
        }
        Grid::from_vec(rows, cols, data)
    };
    let magnitude_db = read_grid("magnitude")?;
    let phase = read_grid("phase")?;
    let s = Spectrogram {
        magnitude_db,
        phase,
        config: TfaConfig {
            n_scales,
            freq_min,
            freq_max,
            frame_len_ms,
            hop,
            morlet_center,
            log_floor_eps,
        },
        original_length,
    };
    s.validate()?;
    Ok(s)
}
