//! Crate-wide error type and the process exit codes derived from it.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    // -- waveform / file I/O --------------------------------------------------
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported wav format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt file: {0}")]
    CorruptFile(String),
    #[error("signal is silent ({0})")]
    SilentSignal(&'static str),
    #[error("empty signal")]
    EmptySignal,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("bad framing: {0}")]
    BadFraming(String),
    #[error("signal too short: {len} samples, need at least {min}")]
    SignalTooShort { len: usize, min: usize },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    // -- configuration --------------------------------------------------------
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("inconsistent config: {0}")]
    InconsistentConfig(String),

    // -- grids / spectrograms -------------------------------------------------
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("grid too small: {rows}x{cols}")]
    GridTooSmall { rows: usize, cols: usize },
    #[error("square grid has no recorded source dimensions to restore")]
    MissingSourceDims,

    // -- numerics ------------------------------------------------------------
    #[error("iteration did not converge within {0} sweeps")]
    NonConvergence(usize),
    #[error("zero matrix where a nonzero one is required")]
    ZeroMatrix,
    #[error("training loss diverged at iteration {0}")]
    DivergedLoss(usize),

    // -- data sets / models ---------------------------------------------------
    #[error("class {0} has no examples")]
    EmptyClass(usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty reference transcript")]
    EmptyReference,
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("generator unavailable: {0}")]
    GeneratorUnavailable(String),

    // -- external recogniser ---------------------------------------------------
    #[error("recognizer failure: {0}")]
    RecognizerFailure(String),
    #[error("recognizer timed out after {0} s")]
    Timeout(u64),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// CLI exit code: 1 usage, 2 data, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        use Error::*;
        match self {
            BadConfig(_) | InconsistentConfig(_) => 1,
            NonConvergence(_) | ZeroMatrix | DivergedLoss(_) | NonFinite(_) => 3,
            _ => 2,
        }
    }
}
