//! Adversarial purification for speech audio.
//!
//! The pipeline: a waveform is lifted to a complex-wavelet spectrogram
//! ([`tfa`]), projected onto the range of a class-conditional generator by a
//! latent search that minimises a matrix-pencil chordal loss ([`pencil`],
//! [`defense`]), and resynthesised with the original phase. The generator is
//! trained from scratch ([`ccgan`]); [`eval`] scores the round trip against a
//! recogniser and a probe classifier. [`signal`] holds waveform I/O and the
//! loudness / spectral-distortion meters used to size perturbations.

pub mod ccgan;
pub mod dataset;
pub mod defense;
pub mod error;
pub mod eval;
pub mod grid;
pub mod pencil;
pub mod signal;
pub mod tfa;

pub use error::{Error, Result};
pub use grid::Grid;
