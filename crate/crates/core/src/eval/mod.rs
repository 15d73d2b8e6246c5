//! Evaluation: transcript scoring, the probe classifier and its gradient-
//! sign perturbation oracle, the external-recognizer bridge, and experiment
//! orchestration over a speech directory.

pub mod attack;
pub mod experiment;
pub mod probe;
pub mod recognizer;
pub mod score;

pub use attack::{craft_perturbation, AttackReport};
pub use experiment::{
    render_report, run_experiment, ArmReport, EvalReport, ExperimentConfig, ItemRecord,
};
pub use probe::{train_probe, ProbeClassifier, ProbeReport};
pub use recognizer::{recognize, RecognizerSpec};
pub use score::{align, sla, tokenize, wer, EditCounts, TranscriptPair};
