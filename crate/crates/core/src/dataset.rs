//! Labeled corpora: spectrogram-directory loading for training, WAV +
//! transcript indexes for evaluation, and a synthetic two-class band corpus
//! for desk-scale experiments.
//!
//! Directory conventions are deliberately plain text: a dataset directory
//! holds the payload files plus `labels.tsv` (`filename<TAB>class_id`) and,
//! for speech sets, `transcripts.tsv` (`filename<TAB>transcript`).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::signal::{save_wav, Waveform, SAMPLE_RATE};
use crate::tfa::{load_spectrogram, resize_bilinear, to_rgb};

pub const LABELS_FILE: &str = "labels.tsv";
pub const TRANSCRIPTS_FILE: &str = "transcripts.tsv";

/// Resize a native log-magnitude grid to `resolution` and min-max normalize
/// it into [-1, 1]: the working representation every model in this crate
/// trains and classifies on.
pub fn normalized_grid(magnitude_db: &Grid, resolution: usize) -> Result<Grid> {
    let sq = resize_bilinear(magnitude_db, resolution)?;
    let rgb = to_rgb(&sq);
    Grid::from_vec(resolution, resolution, rgb.data[..resolution * resolution].to_vec())
}

/// One `name<TAB>value` index file, sorted by name for deterministic
/// iteration order.
fn read_index(path: &Path) -> Result<BTreeMap<String, String>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.display().to_string()));
    }
    let text = std::fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (name, value) = line.split_once('\t').ok_or_else(|| {
            Error::CorruptFile(format!(
                "{}:{}: expected name<TAB>value",
                path.display(),
                lineno + 1
            ))
        })?;
        map.insert(name.to_string(), value.to_string());
    }
    Ok(map)
}

fn parse_class(path: &Path, name: &str, value: &str) -> Result<usize> {
    value.trim().parse().map_err(|_| {
        Error::CorruptFile(format!("{}: bad class id {value:?} for {name}", path.display()))
    })
}

/// Load a directory of serialized spectrograms with a `labels.tsv` sidecar
/// into normalized working grids. Returns the items (index order) and the
/// class count (max id + 1).
pub fn load_grid_dataset(dir: &Path, resolution: usize) -> Result<(Vec<(Grid, usize)>, usize)> {
    let labels = read_index(&dir.join(LABELS_FILE))?;
    if labels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut items = Vec::with_capacity(labels.len());
    let mut n_classes = 0;
    for (name, value) in &labels {
        let class_id = parse_class(&dir.join(LABELS_FILE), name, value)?;
        n_classes = n_classes.max(class_id + 1);
        let spec = load_spectrogram(&dir.join(name))?;
        items.push((normalized_grid(&spec.magnitude_db, resolution)?, class_id));
    }
    Ok((items, n_classes))
}

/// One utterance of a speech evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeechItem {
    pub name: String,
    pub path: PathBuf,
    pub transcript: String,
    /// Present when the directory has a `labels.tsv`.
    pub class_id: Option<usize>,
}

/// Load a directory of WAV files with a `transcripts.tsv` index (required)
/// and a `labels.tsv` index (optional), sorted by filename.
pub fn load_speech_dir(dir: &Path) -> Result<Vec<SpeechItem>> {
    let transcripts = read_index(&dir.join(TRANSCRIPTS_FILE))?;
    if transcripts.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let labels_path = dir.join(LABELS_FILE);
    let labels = if labels_path.exists() { read_index(&labels_path)? } else { BTreeMap::new() };
    let mut items = Vec::with_capacity(transcripts.len());
    for (name, transcript) in &transcripts {
        let path = dir.join(name);
        if !path.exists() {
            return Err(Error::MissingArtifact(path.display().to_string()));
        }
        let class_id = match labels.get(name) {
            Some(v) => Some(parse_class(&labels_path, name, v)?),
            None => None,
        };
        items.push(SpeechItem {
            name: name.clone(),
            path,
            transcript: transcript.clone(),
            class_id,
        });
    }
    Ok(items)
}

// ---------------------------------------------------------------------------
// Synthetic band corpus
// ---------------------------------------------------------------------------

/// Tone frequencies of the two synthetic classes: a low band triple and a
/// high band triple, both inside the default analysis band.
pub const BAND_CLASS_FREQS: [[f64; 3]; 2] = [[400.0, 700.0, 1100.0], [1800.0, 2700.0, 3600.0]];

const BAND_TRANSCRIPTS: [&str; 2] = ["low band tone", "high band tone"];

/// Sum of tones with per-item random phases and mild amplitude jitter, plus
/// a -40 dB noise floor, peak-normalized to 0.5.
fn band_waveform<R: Rng>(freqs: &[f64], len: usize, rng: &mut R) -> Waveform {
    let mut samples = vec![0.0; len];
    for &f in freqs {
        let amp = 0.7 + 0.3 * rng.random::<f64>();
        let phase = 2.0 * std::f64::consts::PI * rng.random::<f64>();
        let w = 2.0 * std::f64::consts::PI * f / SAMPLE_RATE as f64;
        for (t, s) in samples.iter_mut().enumerate() {
            *s += amp * (w * t as f64 + phase).sin();
        }
    }
    let peak = samples.iter().fold(0.0_f64, |m, s| m.max(s.abs()));
    let noise_amp = 0.01 * peak;
    for s in samples.iter_mut() {
        *s += noise_amp * (2.0 * rng.random::<f64>() - 1.0);
    }
    let peak = samples.iter().fold(0.0_f64, |m, s| m.max(s.abs()));
    let scale = 0.5 / peak;
    for s in samples.iter_mut() {
        *s *= scale;
    }
    Waveform { samples, sample_rate: SAMPLE_RATE, source_path: None }
}

/// A labeled synthetic utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticItem {
    pub wave: Waveform,
    pub class_id: usize,
    pub name: String,
    pub transcript: String,
}

/// Deterministic two-class corpus of band-pattern waveforms: `n_per_class`
/// items per class, each `len` samples.
pub fn synthetic_speech_corpus(n_per_class: usize, len: usize, seed: u64) -> Vec<SyntheticItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(2 * n_per_class);
    for i in 0..n_per_class {
        for (class_id, freqs) in BAND_CLASS_FREQS.iter().enumerate() {
            items.push(SyntheticItem {
                wave: band_waveform(freqs, len, &mut rng),
                class_id,
                name: format!("c{class_id}_{i:03}.wav"),
                transcript: BAND_TRANSCRIPTS[class_id].to_string(),
            });
        }
    }
    items
}

/// Write a synthetic corpus as a speech directory: WAV files plus the
/// `labels.tsv` and `transcripts.tsv` indexes.
pub fn write_speech_dir(dir: &Path, items: &[SyntheticItem]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut labels = String::new();
    let mut transcripts = String::new();
    for item in items {
        save_wav(&dir.join(&item.name), &item.wave)?;
        labels.push_str(&format!("{}\t{}\n", item.name, item.class_id));
        transcripts.push_str(&format!("{}\t{}\n", item.name, item.transcript));
    }
    std::fs::write(dir.join(LABELS_FILE), labels)?;
    std::fs::write(dir.join(TRANSCRIPTS_FILE), transcripts)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::loudness_db;
    use crate::tfa::{cwt_forward, save_spectrogram, TfaConfig};

    fn small_tfa() -> TfaConfig {
        TfaConfig { n_scales: 16, freq_min: 100.0, freq_max: 4000.0, hop: 128, ..TfaConfig::default() }
    }

    #[test]
    fn synthetic_corpus_is_deterministic_and_balanced() {
        let a = synthetic_speech_corpus(3, 1600, 7);
        let b = synthetic_speech_corpus(3, 1600, 7);
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
        assert_eq!(a.iter().filter(|i| i.class_id == 0).count(), 3);
        for item in &a {
            assert_eq!(item.wave.len(), 1600);
            // peak-normalized to 0.5 -> about -6 dB
            let db = loudness_db(&item.wave.samples).unwrap();
            assert!((db - (-6.0206)).abs() < 0.01, "loudness {db}");
        }
        let c = synthetic_speech_corpus(3, 1600, 8);
        assert_ne!(a, c);
    }

    #[test]
    fn band_classes_have_distinct_spectra() {
        let items = synthetic_speech_corpus(2, 2000, 3);
        let tfa = small_tfa();
        let grid = |i: usize| {
            normalized_grid(&cwt_forward(&items[i].wave, &tfa).unwrap().magnitude_db, 16).unwrap()
        };
        let mean_abs_diff = |a: &Grid, b: &Grid| {
            a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / 256.0
        };
        // items 0/2 are class 0, items 1/3 are class 1
        let (a0, b0, a1, b1) = (grid(0), grid(2), grid(1), grid(3));
        let (lo, hi) = a0.min_max();
        assert!(lo >= -1.0 && hi <= 1.0);
        let intra = mean_abs_diff(&a0, &b0).max(mean_abs_diff(&a1, &b1));
        let inter = mean_abs_diff(&a0, &a1).min(mean_abs_diff(&b0, &b1));
        assert!(
            inter > 2.0 * intra,
            "classes should differ more across ({inter}) than within ({intra})"
        );
    }

    #[test]
    fn speech_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let items = synthetic_speech_corpus(2, 1600, 11);
        write_speech_dir(dir.path(), &items).unwrap();
        let loaded = load_speech_dir(dir.path()).unwrap();
        assert_eq!(loaded.len(), 4);
        // BTreeMap ordering: all class-0 names sort before class-1 names.
        assert_eq!(loaded[0].name, "c0_000.wav");
        assert_eq!(loaded[0].class_id, Some(0));
        assert_eq!(loaded[0].transcript, "low band tone");
        assert!(loaded.iter().all(|i| i.path.exists()));
    }

    #[test]
    fn missing_transcripts_index_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        match load_speech_dir(dir.path()) {
            Err(Error::MissingArtifact(_)) => {}
            other => panic!("expected MissingArtifact, got {other:?}"),
        }
    }

    #[test]
    fn grid_dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let tfa = small_tfa();
        let items = synthetic_speech_corpus(2, 1600, 13);
        let mut labels = String::new();
        for item in &items {
            let spec = cwt_forward(&item.wave, &tfa).unwrap();
            let name = item.name.replace(".wav", ".spec");
            save_spectrogram(&dir.path().join(&name), &spec).unwrap();
            labels.push_str(&format!("{name}\t{}\n", item.class_id));
        }
        std::fs::write(dir.path().join(LABELS_FILE), labels).unwrap();
        let (grids, n_classes) = load_grid_dataset(dir.path(), 16).unwrap();
        assert_eq!(grids.len(), 4);
        assert_eq!(n_classes, 2);
        for (g, class_id) in &grids {
            assert_eq!((g.rows(), g.cols()), (16, 16));
            assert!(*class_id < 2);
            assert!(g.data().iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn malformed_label_line_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(LABELS_FILE), "no-tab-here\n").unwrap();
        match load_grid_dataset(dir.path(), 16) {
            Err(Error::CorruptFile(_)) => {}
            other => panic!("expected CorruptFile, got {other:?}"),
        }
    }
}
