//! End-to-end evaluation harness: one labeled WAV corpus pushed through up
//! to three arms — clean, attacked, defended — each scored against the
//! external recognizer (word error rate, sentence-level accuracy) and the
//! probe classifier, with a deterministic text report at the end.
//!
//! Every arm carries a row for every item, so arms can be compared
//! item-by-item. The headline numbers aggregate the final arm; when both the
//! attack and the defense ran, they aggregate only the items the attack
//! actually flipped, since those are the ones a defense exists for.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::ccgan::{Checkpoint, Generator};
use crate::dataset::{load_speech_dir, normalized_grid};
use crate::defense::{defend, ClassStrategy, DefenseConfig};
use crate::error::{Error, Result};
use crate::eval::attack::craft_perturbation;
use crate::eval::probe::{train_probe, ProbeClassifier};
use crate::eval::recognizer::{recognize, RecognizerSpec};
use crate::eval::score::{sla, tokenize, wer, TranscriptPair};
use crate::grid::Grid;
use crate::signal::{inject_perturbation, load_wav, Waveform};
use crate::tfa::{cwt_forward, TfaConfig};

/// Pseudo-recognizer command that echoes each item's reference transcript,
/// for closed-loop plumbing runs without a real recognizer.
pub const REFERENCE_RECOGNIZER: &str = "@reference";

#[derive(Debug, Clone, PartialEq)]
pub struct AttackArm {
    /// Sign-step amplitude.
    pub eps: f64,
    /// Cap on the perturbation's peak loudness relative to the carrier.
    pub loudness_bound_db: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DefenseArm {
    /// Trained generator checkpoint.
    pub checkpoint: PathBuf,
    pub k_max: usize,
    pub restarts: usize,
    pub xi_coeff: f64,
    pub perturb_std: f64,
    /// Condition the generator on the item's label instead of searching
    /// every class.
    pub known_class: bool,
    pub gradient_refinement: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSource {
    /// Load this classifier instead of training one. A loaded checkpoint
    /// carries its own resolution, which then wins over `resolution`.
    pub checkpoint: Option<PathBuf>,
    /// Training epochs when no checkpoint is given.
    pub epochs: usize,
    /// Grid side for a freshly trained probe.
    pub resolution: usize,
}

/// Parsed experiment description. Built from a sectioned key = value text
/// (see [`ExperimentConfig::parse`]); unknown sections or keys are errors.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub wav_dir: PathBuf,
    /// Keep only the first N items (after the name sort).
    pub limit: Option<usize>,
    pub tfa: TfaConfig,
    pub attack: Option<AttackArm>,
    pub defense: Option<DefenseArm>,
    pub probe: ProbeSource,
    pub recognizer: RecognizerSpec,
    /// File the rendered report is written to.
    pub report_out: Option<PathBuf>,
}

fn parse_value<T: std::str::FromStr>(section: &str, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| {
        Error::BadConfig(format!("[{section}] {key}: cannot parse {v:?}"))
    })
}

fn parse_bool(section: &str, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::BadConfig(format!(
            "[{section}] {key}: expected true or false, got {v:?}"
        ))),
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => {
                Error::MissingArtifact(format!("config {}", path.display()))
            }
            _ => Error::Io(e),
        })?;
        Self::parse(&text)
    }

    /// Parse the sectioned `key = value` format:
    ///
    /// ```text
    /// seed = 7
    ///
    /// [dataset]
    /// wav_dir = corpus/
    ///
    /// [recognizer]
    /// command = @reference
    /// ```
    ///
    /// Sections: `dataset` (wav_dir, limit), `tfa` (any analysis field),
    /// `attack` (enabled, eps, loudness_bound_db), `defense` (enabled,
    /// checkpoint, k_max, restarts, xi_coeff, perturb_std, class_strategy
    /// auto|known, gradient_refinement), `probe` (checkpoint, epochs,
    /// resolution), `recognizer` (command, timeout_s), `report` (out).
    /// A section's presence enables its arm unless it says `enabled = false`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut seed = 0u64;
        let mut wav_dir: Option<PathBuf> = None;
        let mut limit = None;
        let mut tfa = TfaConfig::default();
        let mut attack: Option<AttackArm> = None;
        let mut attack_on = true;
        let mut defense_ck: Option<PathBuf> = None;
        let mut defense = DefenseArm {
            checkpoint: PathBuf::new(),
            k_max: 400,
            restarts: 4,
            xi_coeff: 0.05,
            perturb_std: 0.4,
            known_class: false,
            gradient_refinement: false,
        };
        let mut defense_present = false;
        let mut defense_on = true;
        let mut probe = ProbeSource { checkpoint: None, epochs: 5, resolution: 32 };
        let mut command: Option<String> = None;
        let mut timeout_s = 10u64;
        let mut report_out = None;

        let mut section = String::new();
        let mut seen = BTreeSet::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| {
                        Error::BadConfig(format!("line {}: unterminated section", ln + 1))
                    })?
                    .trim();
                match name {
                    "dataset" | "tfa" | "attack" | "defense" | "probe" | "recognizer"
                    | "report" => {}
                    _ => {
                        return Err(Error::BadConfig(format!("unknown section [{name}]")));
                    }
                }
                if name == "attack" {
                    attack = Some(AttackArm { eps: 0.5, loudness_bound_db: -15.0 });
                }
                if name == "defense" {
                    defense_present = true;
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::BadConfig(format!("line {}: expected key = value, got {line:?}", ln + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert((section.clone(), key.to_string())) {
                return Err(Error::BadConfig(format!(
                    "duplicate key {key:?} in section [{section}]"
                )));
            }
            match (section.as_str(), key) {
                ("", "seed") => seed = parse_value("", key, value)?,
                ("dataset", "wav_dir") => wav_dir = Some(PathBuf::from(value)),
                ("dataset", "limit") => {
                    let n: usize = parse_value("dataset", key, value)?;
                    if n == 0 {
                        return Err(Error::BadConfig("[dataset] limit must be >= 1".into()));
                    }
                    limit = Some(n);
                }
                ("tfa", "n_scales") => tfa.n_scales = parse_value("tfa", key, value)?,
                ("tfa", "freq_min") => tfa.freq_min = parse_value("tfa", key, value)?,
                ("tfa", "freq_max") => tfa.freq_max = parse_value("tfa", key, value)?,
                ("tfa", "frame_len_ms") => tfa.frame_len_ms = parse_value("tfa", key, value)?,
                ("tfa", "hop") => tfa.hop = parse_value("tfa", key, value)?,
                ("tfa", "morlet_center") => tfa.morlet_center = parse_value("tfa", key, value)?,
                ("tfa", "log_floor_eps") => tfa.log_floor_eps = parse_value("tfa", key, value)?,
                ("attack", "enabled") => attack_on = parse_bool("attack", key, value)?,
                ("attack", "eps") => {
                    attack.as_mut().unwrap().eps = parse_value("attack", key, value)?;
                }
                ("attack", "loudness_bound_db") => {
                    attack.as_mut().unwrap().loudness_bound_db =
                        parse_value("attack", key, value)?;
                }
                ("defense", "enabled") => defense_on = parse_bool("defense", key, value)?,
                ("defense", "checkpoint") => defense_ck = Some(PathBuf::from(value)),
                ("defense", "k_max") => defense.k_max = parse_value("defense", key, value)?,
                ("defense", "restarts") => {
                    defense.restarts = parse_value("defense", key, value)?;
                }
                ("defense", "xi_coeff") => {
                    defense.xi_coeff = parse_value("defense", key, value)?;
                }
                ("defense", "perturb_std") => {
                    defense.perturb_std = parse_value("defense", key, value)?;
                }
                ("defense", "class_strategy") => {
                    defense.known_class = match value {
                        "auto" => false,
                        "known" => true,
                        _ => {
                            return Err(Error::BadConfig(format!(
                                "[defense] class_strategy: expected auto or known, got {value:?}"
                            )));
                        }
                    };
                }
                ("defense", "gradient_refinement") => {
                    defense.gradient_refinement = parse_bool("defense", key, value)?;
                }
                ("probe", "checkpoint") => probe.checkpoint = Some(PathBuf::from(value)),
                ("probe", "epochs") => probe.epochs = parse_value("probe", key, value)?,
                ("probe", "resolution") => {
                    probe.resolution = parse_value("probe", key, value)?;
                }
                ("recognizer", "command") => command = Some(value.to_string()),
                ("recognizer", "timeout_s") => {
                    timeout_s = parse_value("recognizer", key, value)?;
                }
                ("report", "out") => report_out = Some(PathBuf::from(value)),
                _ => {
                    return Err(Error::BadConfig(format!(
                        "unknown key {key:?} in section [{section}]"
                    )));
                }
            }
        }

        let wav_dir = wav_dir
            .ok_or_else(|| Error::BadConfig("[dataset] wav_dir is required".into()))?;
        let command = command
            .ok_or_else(|| Error::BadConfig("[recognizer] command is required".into()))?;
        tfa.validate()?;
        let defense = if defense_present && defense_on {
            let checkpoint = defense_ck.ok_or_else(|| {
                Error::BadConfig("[defense] checkpoint is required".into())
            })?;
            Some(DefenseArm { checkpoint, ..defense })
        } else {
            None
        };
        Ok(ExperimentConfig {
            seed,
            wav_dir,
            limit,
            tfa,
            attack: if attack_on { attack } else { None },
            defense,
            probe,
            recognizer: RecognizerSpec { command, timeout_s },
            report_out,
        })
    }
}

/// One item's scores within one arm.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemRecord {
    pub name: String,
    pub wer: f64,
    /// Probe prediction vs the item's label; `None` for unlabeled items.
    pub probe_correct: Option<bool>,
    /// Latent-search proposals spent on this item (defended arm only).
    pub k_used: Option<usize>,
}

/// Aggregates and per-item rows of one arm.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmReport {
    pub name: String,
    pub items: Vec<ItemRecord>,
    pub mean_wer: f64,
    pub sla: f64,
    /// Probe accuracy over labeled items; `None` when none are labeled.
    pub probe_accuracy: Option<f64>,
}

/// Whole-experiment result. The headline fields aggregate the final arm,
/// restricted to attack-flipped items when both attack and defense ran.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub n_items: usize,
    pub arms: Vec<ArmReport>,
    pub wer: f64,
    pub sla: f64,
    /// Items the headline aggregates run over.
    pub n_total: usize,
    /// Of those, items the probe classifies correctly in the final arm.
    pub n_correct: usize,
    /// Mean latent-search budget spent, zero when no defense ran.
    pub mean_k: f64,
}

fn must_exist(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(format!("{what} {}", path.display())))
    }
}

fn arm_report(name: &str, rows: Vec<ItemRecord>, pairs: &[TranscriptPair]) -> Result<ArmReport> {
    let mean_wer = rows.iter().map(|r| r.wer).sum::<f64>() / rows.len() as f64;
    let sla = sla(pairs)?;
    let labeled = rows.iter().filter(|r| r.probe_correct.is_some()).count();
    let correct = rows.iter().filter(|r| r.probe_correct == Some(true)).count();
    let probe_accuracy =
        (labeled > 0).then(|| 100.0 * correct as f64 / labeled as f64);
    Ok(ArmReport { name: name.into(), items: rows, mean_wer, sla, probe_accuracy })
}

/// Run the configured experiment and render its report (also written to
/// `report.out` when configured).
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<EvalReport> {
    if let Some(d) = &cfg.defense {
        must_exist(&d.checkpoint, "generator checkpoint")?;
    }
    if let Some(p) = &cfg.probe.checkpoint {
        must_exist(p, "probe checkpoint")?;
    }

    let mut items = load_speech_dir(&cfg.wav_dir)?;
    items.sort_by(|a, b| a.name.cmp(&b.name));
    if let Some(limit) = cfg.limit {
        items.truncate(limit);
    }
    if items.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let waves: Vec<Waveform> =
        items.iter().map(|i| load_wav(&i.path)).collect::<Result<_>>()?;

    // The clean analysis grids serve both probe training and the clean arm.
    let probe = match &cfg.probe.checkpoint {
        Some(p) => ProbeClassifier::load(p)?,
        None => {
            let mut data = Vec::with_capacity(items.len());
            for (item, wave) in items.iter().zip(&waves) {
                let label = item.class_id.ok_or_else(|| {
                    Error::BadConfig(format!(
                        "probe training needs a label for {}",
                        item.name
                    ))
                })?;
                let spec = cwt_forward(wave, &cfg.tfa)?;
                data.push((normalized_grid(&spec.magnitude_db, cfg.probe.resolution)?, label));
            }
            let n_classes = data.iter().map(|(_, l)| l + 1).max().unwrap();
            train_probe(&data, n_classes, cfg.probe.epochs, cfg.seed)?.0
        }
    };

    let generator: Option<Generator> = match &cfg.defense {
        Some(d) => Some(Checkpoint::load(&d.checkpoint)?.generator),
        None => None,
    };

    let hypothesize = |w: &Waveform, transcript: &str| -> Result<Vec<String>> {
        if cfg.recognizer.command.trim() == REFERENCE_RECOGNIZER {
            Ok(tokenize(transcript))
        } else {
            recognize(w, &cfg.recognizer)
        }
    };
    let probe_grid = |w: &Waveform| -> Result<Grid> {
        let spec = cwt_forward(w, &cfg.tfa)?;
        normalized_grid(&spec.magnitude_db, probe.resolution)
    };
    let probe_check = |w: &Waveform, label: Option<usize>| -> Result<Option<bool>> {
        match label {
            Some(l) => Ok(Some(probe.predict(&probe_grid(w)?)? == l)),
            None => Ok(None),
        }
    };

    let n = items.len();
    let mut clean_rows = Vec::with_capacity(n);
    let mut clean_pairs = Vec::with_capacity(n);
    let mut attacked_rows = Vec::new();
    let mut attacked_pairs = Vec::new();
    let mut defended_rows = Vec::new();
    let mut defended_pairs = Vec::new();
    let mut attack_flipped = vec![false; n];

    for (i, item) in items.iter().enumerate() {
        let wave = &waves[i];
        let reference = tokenize(&item.transcript);

        let pair = TranscriptPair {
            reference: reference.clone(),
            hypothesis: hypothesize(wave, &item.transcript)?,
        };
        clean_rows.push(ItemRecord {
            name: item.name.clone(),
            wer: wer(&pair)?,
            probe_correct: probe_check(wave, item.class_id)?,
            k_used: None,
        });
        clean_pairs.push(pair);

        let mut x_final = wave.clone();
        if let Some(atk) = &cfg.attack {
            let label = item.class_id.ok_or_else(|| {
                Error::BadConfig(format!("the attack needs a label for {}", item.name))
            })?;
            let target = (label + 1) % probe.n_classes;
            let (delta, _) = craft_perturbation(
                wave,
                &probe,
                target,
                atk.eps,
                atk.loudness_bound_db,
                &cfg.tfa,
            )?;
            let x_adv = inject_perturbation(wave, &delta, true)?;
            let pair = TranscriptPair {
                reference: reference.clone(),
                hypothesis: hypothesize(&x_adv, &item.transcript)?,
            };
            let correct = probe_check(&x_adv, Some(label))?;
            attack_flipped[i] = correct == Some(false);
            attacked_rows.push(ItemRecord {
                name: item.name.clone(),
                wer: wer(&pair)?,
                probe_correct: correct,
                k_used: None,
            });
            attacked_pairs.push(pair);
            x_final = x_adv;
        }

        if let Some(def) = &cfg.defense {
            let class_strategy = if def.known_class {
                ClassStrategy::Known(item.class_id.ok_or_else(|| {
                    Error::BadConfig(format!(
                        "class_strategy known needs a label for {}",
                        item.name
                    ))
                })?)
            } else {
                ClassStrategy::SearchAllClasses
            };
            let dcfg = DefenseConfig {
                k_max: def.k_max,
                xi_coeff: def.xi_coeff,
                perturb_std: def.perturb_std,
                restarts: def.restarts,
                class_strategy,
                use_gradient_refinement: def.gradient_refinement,
                // Independent noise streams per item, derived from the run
                // seed with a fixed odd stride.
                seed: cfg.seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(i as u64 + 1)),
            };
            let res = defend(&x_final, generator.as_ref().unwrap(), &cfg.tfa, &dcfg)?;
            let pair = TranscriptPair {
                reference: reference.clone(),
                hypothesis: hypothesize(&res.output, &item.transcript)?,
            };
            defended_rows.push(ItemRecord {
                name: item.name.clone(),
                wer: wer(&pair)?,
                probe_correct: probe_check(&res.output, item.class_id)?,
                k_used: Some(res.k_used),
            });
            defended_pairs.push(pair);
        }
    }

    let mut arms = vec![arm_report("clean", clean_rows, &clean_pairs)?];
    if cfg.attack.is_some() {
        arms.push(arm_report("attacked", attacked_rows, &attacked_pairs)?);
    }
    if cfg.defense.is_some() {
        arms.push(arm_report("defended", defended_rows, &defended_pairs)?);
    }

    let subset: Vec<usize> = if cfg.attack.is_some() && cfg.defense.is_some() {
        (0..n).filter(|&i| attack_flipped[i]).collect()
    } else {
        (0..n).collect()
    };
    let (wer, sla, n_total, n_correct, mean_k) = {
        let last = arms.last().unwrap();
        if subset.is_empty() {
            (0.0, 0.0, 0, 0, 0.0)
        } else {
            let rows: Vec<&ItemRecord> = subset.iter().map(|&i| &last.items[i]).collect();
            let m = rows.len() as f64;
            (
                rows.iter().map(|r| r.wer).sum::<f64>() / m,
                100.0 * rows.iter().filter(|r| r.wer == 0.0).count() as f64 / m,
                rows.len(),
                rows.iter().filter(|r| r.probe_correct == Some(true)).count(),
                rows.iter().map(|r| r.k_used.unwrap_or(0) as f64).sum::<f64>() / m,
            )
        }
    };
    let report = EvalReport { n_items: n, arms, wer, sla, n_total, n_correct, mean_k };

    if let Some(out) = &cfg.report_out {
        std::fs::write(out, render_report(&report))?;
    }
    Ok(report)
}

/// Plain-text rendering of a report; bytewise deterministic for a
/// deterministic report.
pub fn render_report(r: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "n_items = {}", r.n_items);
    let _ = writeln!(s, "wer = {}", r.wer);
    let _ = writeln!(s, "sla = {}", r.sla);
    let _ = writeln!(s, "n_total = {}", r.n_total);
    let _ = writeln!(s, "n_correct = {}", r.n_correct);
    let _ = writeln!(s, "mean_k = {}", r.mean_k);
    for arm in &r.arms {
        let _ = writeln!(s);
        let _ = writeln!(s, "[{}]", arm.name);
        let _ = writeln!(s, "mean_wer = {}", arm.mean_wer);
        let _ = writeln!(s, "sla = {}", arm.sla);
        match arm.probe_accuracy {
            Some(a) => {
                let _ = writeln!(s, "probe_accuracy = {a}");
            }
            None => {
                let _ = writeln!(s, "probe_accuracy = none");
            }
        }
        for item in &arm.items {
            let probe = match item.probe_correct {
                Some(true) => "correct",
                Some(false) => "wrong",
                None => "unlabeled",
            };
            let k = item.k_used.map_or("-".into(), |k| k.to_string());
            let _ = writeln!(s, "item {} wer={} probe={probe} k={k}", item.name, item.wer);
        }
    }
    s
}
