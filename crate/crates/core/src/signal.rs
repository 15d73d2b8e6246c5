//! Waveform I/O and the loudness / spectral-distortion meters.
//!
//! All audio is mono 16 kHz PCM16. Samples live in `f64` scaled by 1/32768,
//! so a full-scale file round-trips with error at most one quantisation step.
//! Loudness follows the peak convention `20*log10(max |s|)`: a full-scale
//! signal sits at 0 dB and silence is an error rather than -inf, which keeps
//! every value returned by this module finite.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::grid::Grid;
use crate::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

/// Mono 16 kHz waveform. Samples are finite; file I/O keeps them in [-1, 1],
/// but in-memory arithmetic (perturbation injection without clamping) may
/// leave that range.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub source_path: Option<PathBuf>,
}

impl Waveform {
    pub fn from_samples(samples: Vec<f64>) -> Result<Self> {
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("waveform samples"));
        }
        Ok(Waveform { samples, sample_rate: SAMPLE_RATE, source_path: None })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Additive waveform perturbation, same length as its carrier signal.
#[derive(Debug, Clone)]
pub struct Perturbation {
    pub delta: Vec<f64>,
    /// Loudness relative to the carrier, cached by whoever crafted it.
    pub loudness_db_rel: Option<f64>,
}

impl Perturbation {
    pub fn new(delta: Vec<f64>) -> Self {
        Perturbation { delta, loudness_db_rel: None }
    }
}

// ---------------------------------------------------------------------------
// WAV files
// ---------------------------------------------------------------------------

fn read_u16(r: &mut impl Read) -> std::io::Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_tag(r: &mut impl Read) -> std::io::Result<[u8; 4]> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(b)
}

/// Read a PCM16 mono 16 kHz RIFF/WAVE file. Unknown chunks are skipped;
/// anything other than that exact format is `UnsupportedFormat`, and
/// truncated or malformed structure is `CorruptFile`.
pub fn load_wav(path: &Path) -> Result<Waveform> {
    let file = std::fs::File::open(path)?;
    let mut r = std::io::BufReader::new(file);

    let corrupt = |what: &str| Error::CorruptFile(format!("{}: {}", path.display(), what));

    if &read_tag(&mut r).map_err(|_| corrupt("missing RIFF header"))? != b"RIFF" {
        return Err(corrupt("not a RIFF file"));
    }
    let _riff_size = read_u32(&mut r).map_err(|_| corrupt("truncated RIFF size"))?;
    if &read_tag(&mut r).map_err(|_| corrupt("missing WAVE tag"))? != b"WAVE" {
        return Err(corrupt("not a WAVE file"));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (format, channels, rate, bits)
    let mut samples: Option<Vec<f64>> = None;

    loop {
        let tag = match read_tag(&mut r) {
            Ok(t) => t,
            Err(_) => break, // clean EOF between chunks
        };
        let size = read_u32(&mut r).map_err(|_| corrupt("truncated chunk size"))? as usize;
        match &tag {
            b"fmt " => {
                if size < 16 {
                    return Err(corrupt("fmt chunk too small"));
                }
                let mut body = vec![0u8; size];
                r.read_exact(&mut body).map_err(|_| corrupt("truncated fmt chunk"))?;
                let mut c = &body[..];
                let audio_format = read_u16(&mut c).unwrap();
                let channels = read_u16(&mut c).unwrap();
                let rate = read_u32(&mut c).unwrap();
                let _byte_rate = read_u32(&mut c).unwrap();
                let _block_align = read_u16(&mut c).unwrap();
                let bits = read_u16(&mut c).unwrap();
                fmt = Some((audio_format, channels, rate, bits));
            }
            b"data" => {
                let (audio_format, channels, rate, bits) = fmt.ok_or_else(|| corrupt("data chunk before fmt chunk"))?;
                if audio_format != 1 || bits != 16 {
                    return Err(Error::UnsupportedFormat(format!(
                        "{}: need PCM16, got format {} with {} bits",
                        path.display(),
                        audio_format,
                        bits
                    )));
                }
                if channels != 1 {
                    return Err(Error::UnsupportedFormat(format!(
                        "{}: need mono, got {} channels",
                        path.display(),
                        channels
                    )));
                }
                if rate != SAMPLE_RATE {
                    return Err(Error::UnsupportedFormat(format!(
                        "{}: need {} Hz, got {} Hz",
                        path.display(),
                        SAMPLE_RATE,
                        rate
                    )));
                }
                if size % 2 != 0 {
                    return Err(corrupt("odd data chunk size for 16-bit samples"));
                }
                let mut body = vec![0u8; size];
                r.read_exact(&mut body).map_err(|_| corrupt("truncated data chunk"))?;
                let out: Vec<f64> = body
                    .chunks_exact(2)
                    .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0)
                    .collect();
                samples = Some(out);
            }
            _ => {
                // skip unknown chunk plus RIFF pad byte
                let skip = size + (size & 1);
                let mut sink = vec![0u8; skip];
                r.read_exact(&mut sink).map_err(|_| corrupt("truncated chunk body"))?;
            }
        }
        if size & 1 == 1 && tag == *b"data" {
            let mut pad = [0u8; 1];
            let _ = r.read_exact(&mut pad);
        }
    }

    let samples = samples.ok_or_else(|| corrupt("no data chunk"))?;
    Ok(Waveform { samples, sample_rate: SAMPLE_RATE, source_path: Some(path.to_path_buf()) })
}

/// Write PCM16 mono 16 kHz. Samples are clamped to [-1, 1] and quantised to
/// the 16-bit grid (1.0 saturates to 32767), so load(save(w)) differs from w
/// by at most 1/32768 per sample.
pub fn save_wav(path: &Path, w: &Waveform) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut out = std::io::BufWriter::new(file);
    write_wav(&mut out, w)?;
    out.flush()?;
    Ok(())
}

/// The same PCM16 encoding as [`save_wav`], as an in-memory byte buffer
/// (used to stream audio to an external recognizer's standard input).
pub fn wav_bytes(w: &Waveform) -> Vec<u8> {
    let mut buf = Vec::with_capacity(44 + w.samples.len() * 2);
    write_wav(&mut buf, w).expect("writing to a Vec cannot fail");
    buf
}

fn write_wav(out: &mut impl Write, w: &Waveform) -> std::io::Result<()> {
    let data_len = (w.samples.len() * 2) as u32;
    out.write_all(b"RIFF")?;
    out.write_all(&(36 + data_len).to_le_bytes())?;
    out.write_all(b"WAVE")?;
    out.write_all(b"fmt ")?;
    out.write_all(&16u32.to_le_bytes())?;
    out.write_all(&1u16.to_le_bytes())?; // PCM
    out.write_all(&1u16.to_le_bytes())?; // mono
    out.write_all(&SAMPLE_RATE.to_le_bytes())?;
    out.write_all(&(SAMPLE_RATE * 2).to_le_bytes())?; // byte rate
    out.write_all(&2u16.to_le_bytes())?; // block align
    out.write_all(&16u16.to_le_bytes())?;
    out.write_all(b"data")?;
    out.write_all(&data_len.to_le_bytes())?;
    for &s in &w.samples {
        out.write_all(&quantize_i16(s).to_le_bytes())?;
    }
    Ok(())
}

#[inline]
pub(crate) fn quantize_i16(s: f64) -> i16 {
    let v = (s.clamp(-1.0, 1.0) * 32768.0).round();
    v.clamp(-32768.0, 32767.0) as i16
}

// ---------------------------------------------------------------------------
// Loudness
// ---------------------------------------------------------------------------

/// Peak loudness `20*log10(max |s|)`. Errors on empty and all-zero input.
pub fn loudness_db(samples: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptySignal);
    }
    let peak = samples.iter().fold(0.0_f64, |m, s| m.max(s.abs()));
    if peak == 0.0 {
        return Err(Error::SilentSignal("loudness of all-zero signal"));
    }
    Ok(20.0 * peak.log10())
}

/// Loudness of a perturbation relative to its carrier:
/// `loudness_db(delta) - loudness_db(x)`. A silent perturbation on a
/// nonsilent carrier is reported as -inf-like failure, so it errors instead.
pub fn relative_loudness_db(x: &Waveform, delta: &Perturbation) -> Result<f64> {
    if x.len() != delta.delta.len() {
        return Err(Error::LengthMismatch { left: x.len(), right: delta.delta.len() });
    }
    Ok(loudness_db(&delta.delta)? - loudness_db(&x.samples)?)
}

/// `x + delta`, optionally clipped to [-1, 1].
pub fn inject_perturbation(x: &Waveform, delta: &Perturbation, clamp: bool) -> Result<Waveform> {
    if x.len() != delta.delta.len() {
        return Err(Error::LengthMismatch { left: x.len(), right: delta.delta.len() });
    }
    let samples = x
        .samples
        .iter()
        .zip(&delta.delta)
        .map(|(a, b)| {
            let s = a + b;
            if clamp {
                s.clamp(-1.0, 1.0)
            } else {
                s
            }
        })
        .collect();
    Ok(Waveform { samples, sample_rate: x.sample_rate, source_path: None })
}

// ---------------------------------------------------------------------------
// Power spectral density
// ---------------------------------------------------------------------------

/// Periodic Hann window of length `n`.
fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Framed periodogram: Hann-windowed frames of `frame_len` samples every
/// `hop` samples, one-sided squared DFT magnitude divided by `frame_len`.
/// Rows are frames, columns are the `frame_len/2 + 1` DFT bins.
pub fn psd(samples: &[f64], frame_len: usize, hop: usize) -> Result<Grid> {
    if samples.is_empty() {
        return Err(Error::EmptySignal);
    }
    if frame_len == 0 || hop == 0 {
        return Err(Error::BadFraming(format!("frame_len {frame_len}, hop {hop}")));
    }
    if frame_len > samples.len() {
        return Err(Error::BadFraming(format!(
            "frame_len {} exceeds signal length {}",
            frame_len,
            samples.len()
        )));
    }
    let window = hann(frame_len);
    let n_frames = (samples.len() - frame_len) / hop + 1;
    let n_bins = frame_len / 2 + 1;

    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(frame_len);
    let mut grid = Grid::zeros(n_frames, n_bins);
    let mut buf = vec![Complex64::new(0.0, 0.0); frame_len];
    for f in 0..n_frames {
        let start = f * hop;
        for i in 0..frame_len {
            buf[i] = Complex64::new(samples[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for b in 0..n_bins {
            grid.set(f, b, buf[b].norm_sqr() / frame_len as f64);
        }
    }
    Ok(grid)
}

/// Spectral distortion of a perturbation against its carrier:
/// `10*log10(max(psd(delta))^2) - 10*log10(max(psd(x))^2)`.
///
/// Uniform scaling of the perturbation by `a` shifts this by `40*log10(a)`
/// because the PSD is quadratic in amplitude and enters squared again here.
pub fn psd_distortion_db(
    x: &Waveform,
    delta: &Perturbation,
    frame_len: usize,
    hop: usize,
) -> Result<f64> {
    if x.len() != delta.delta.len() {
        return Err(Error::LengthMismatch { left: x.len(), right: delta.delta.len() });
    }
    let px = psd(&x.samples, frame_len, hop)?;
    let pd = psd(&delta.delta, frame_len, hop)?;
    let mx = px.max_abs();
    let md = pd.max_abs();
    if mx == 0.0 {
        return Err(Error::SilentSignal("psd distortion of silent carrier"));
    }
    if md == 0.0 {
        return Err(Error::SilentSignal("psd distortion of silent perturbation"));
    }
    Ok(10.0 * (md * md).log10() - 10.0 * (mx * mx).log10())
}

// ---------------------------------------------------------------------------
// Signal-to-noise ratio (used by reconstruction and defense checks)
// ---------------------------------------------------------------------------

/// SNR in dB of `estimate` against `reference` after peak alignment: both are
/// scaled to unit peak, then `10*log10(sum ref^2 / sum (ref - est)^2)`.
pub fn snr_db(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::LengthMismatch { left: reference.len(), right: estimate.len() });
    }
    if reference.is_empty() {
        return Err(Error::EmptySignal);
    }
    let rp = reference.iter().fold(0.0_f64, |m, s| m.max(s.abs()));
    let ep = estimate.iter().fold(0.0_f64, |m, s| m.max(s.abs()));
    if rp == 0.0 {
        return Err(Error::SilentSignal("snr reference"));
    }
    let ep = if ep == 0.0 { 1.0 } else { ep };
    let mut sig = 0.0;
    let mut err = 0.0;
    for (r, e) in reference.iter().zip(estimate) {
        let rn = r / rp;
        let en = e / ep;
        sig += rn * rn;
        err += (rn - en) * (rn - en);
    }
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (sig / err).log10())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loudness_of_full_scale_is_zero_db() {
        let s = vec![0.0, 0.25, -1.0, 0.5];
        assert_eq!(loudness_db(&s).unwrap(), 0.0);
    }

    #[test]
    fn loudness_of_half_scale() {
        let s = vec![0.5, -0.1];
        let got = loudness_db(&s).unwrap();
        assert!((got - (-6.020599913279624)).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn silence_is_an_error() {
        assert!(matches!(loudness_db(&[0.0; 8]), Err(Error::SilentSignal(_))));
        assert!(matches!(loudness_db(&[]), Err(Error::EmptySignal)));
    }

    #[test]
    fn relative_loudness_tenth_amplitude() {
        let x = Waveform::from_samples(vec![0.8, -0.4, 0.2, 0.1]).unwrap();
        let d = Perturbation::new(x.samples.iter().map(|s| 0.1 * s).collect());
        let got = relative_loudness_db(&x, &d).unwrap();
        assert!((got - (-20.0)).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn wav_round_trip_error_within_one_step() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.wav");
        let samples: Vec<f64> =
            (0..2048).map(|i| (i as f64 * 0.37).sin() * 0.9 + 0.05 * (i as f64 * 2.1).cos()).collect();
        let w = Waveform::from_samples(samples.clone()).unwrap();
        save_wav(&path, &w).unwrap();
        let back = load_wav(&path).unwrap();
        assert_eq!(back.len(), w.len());
        for (a, b) in samples.iter().zip(&back.samples) {
            assert!((a - b).abs() <= 1.0 / 32768.0 + 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn full_scale_sample_saturates_to_32767() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sat.wav");
        let w = Waveform::from_samples(vec![1.0, -1.0, 0.5]).unwrap();
        save_wav(&path, &w).unwrap();
        let back = load_wav(&path).unwrap();
        assert_eq!(back.samples[0], 32767.0 / 32768.0);
        assert_eq!(back.samples[1], -1.0);
        assert_eq!(back.samples[2], 0.5);
    }

    #[test]
    fn constant_pcm_block_loads_scaled() {
        // hand-built file: 16 samples of value 16384 -> 0.5
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("const.wav");
        let w = Waveform::from_samples(vec![0.5; 16]).unwrap();
        save_wav(&path, &w).unwrap();
        let back = load_wav(&path).unwrap();
        assert!(back.samples.iter().all(|&s| s == 0.5));
        assert_eq!(loudness_db(&back.samples).unwrap(), 20.0 * 0.5_f64.log10());
    }

    #[test]
    fn truncated_wav_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.wav");
        let w = Waveform::from_samples(vec![0.1; 64]).unwrap();
        save_wav(&path, &w).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(load_wav(&path), Err(Error::CorruptFile(_))));
    }

    #[test]
    fn stereo_wav_is_unsupported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stereo.wav");
        // patch the channel count in a valid mono file
        let w = Waveform::from_samples(vec![0.1; 32]).unwrap();
        save_wav(&path, &w).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[22] = 2; // fmt chunk channel count
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_wav(&path), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn psd_peaks_at_bin_centered_tone() {
        // bin-centered: k cycles per frame_len samples
        let frame_len = 256;
        let k = 19;
        let n = 1024;
        let s: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * k as f64 * i as f64 / frame_len as f64).sin())
            .collect();
        let g = psd(&s, frame_len, 128).unwrap();
        for f in 0..g.rows() {
            let row: Vec<f64> = (0..g.cols()).map(|b| g.at(f, b)).collect();
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, k, "frame {f}");
        }
    }

    #[test]
    fn psd_distortion_for_scaled_copies() {
        let x = Waveform::from_samples(
            (0..2048).map(|i| (i as f64 * 0.13).sin() * 0.7).collect(),
        )
        .unwrap();
        // delta = 2x -> psd scales by 4, squared -> 10*log10(16)
        let d2 = Perturbation::new(x.samples.iter().map(|s| 2.0 * s).collect());
        let got = psd_distortion_db(&x, &d2, 256, 128).unwrap();
        assert!((got - 12.041199826559248).abs() < 1e-9, "got {got}");
        // delta = 0.1x -> -40 dB
        let d01 = Perturbation::new(x.samples.iter().map(|s| 0.1 * s).collect());
        let got = psd_distortion_db(&x, &d01, 256, 128).unwrap();
        assert!((got - (-40.0)).abs() < 1e-9, "got {got}");
    }

    #[test]
    fn inject_clamps_only_when_asked() {
        let x = Waveform::from_samples(vec![0.9, -0.9]).unwrap();
        let d = Perturbation::new(vec![0.3, -0.3]);
        let free = inject_perturbation(&x, &d, false).unwrap();
        assert!((free.samples[0] - 1.2).abs() < 1e-15);
        let clamped = inject_perturbation(&x, &d, true).unwrap();
        assert_eq!(clamped.samples[0], 1.0);
        assert_eq!(clamped.samples[1], -1.0);
    }

    #[test]
    fn framing_errors() {
        assert!(matches!(psd(&[0.1; 10], 16, 4), Err(Error::BadFraming(_))));
        assert!(matches!(psd(&[0.1; 10], 0, 4), Err(Error::BadFraming(_))));
        assert!(matches!(psd(&[], 4, 2), Err(Error::EmptySignal)));
    }

    #[test]
    fn snr_of_exact_copy_is_infinite() {
        let x: Vec<f64> = (0..100).map(|i| (i as f64 * 0.2).sin()).collect();
        assert_eq!(snr_db(&x, &x).unwrap(), f64::INFINITY);
        // scaled copy is perfect after peak alignment, up to rounding
        let y: Vec<f64> = x.iter().map(|s| 0.3 * s).collect();
        assert!(snr_db(&x, &y).unwrap() > 250.0);
    }
}
