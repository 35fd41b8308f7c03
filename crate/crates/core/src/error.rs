use std::path::PathBuf;

/// Errors produced by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("waveform is empty")]
    EmptyWaveform,

    #[error("waveform of {len} samples is too short (need more than {min})")]
    WaveformTooShort { len: usize, min: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid STFT config: {0}")]
    InvalidConfig(String),

    #[error("degenerate overlap-add: window envelope is {value:e} at sample {index}")]
    DegenerateOverlap { index: usize, value: f64 },

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("length mismatch in {context}: {left} vs {right}")]
    LengthMismatch {
        context: &'static str,
        left: usize,
        right: usize,
    },

    #[error("sample rate mismatch: {left} Hz vs {right} Hz")]
    SampleRateMismatch { left: u32, right: u32 },

    #[error("negative magnitude {value} at ({frame}, {bin})")]
    NegativeMagnitude { frame: usize, bin: usize, value: f64 },

    #[error("value {value} exceeds decompression cap {cap}")]
    DecompressOverflow { value: f64, cap: f64 },

    #[error("mask value {value} outside [0, 1] at ({frame}, {bin})")]
    MaskOutOfRange { frame: usize, bin: usize, value: f64 },

    #[error("invalid band table: {0}")]
    InvalidBands(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: bad WAV {field}: {message}")]
    Wav {
        path: PathBuf,
        field: &'static str,
        message: String,
    },

    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("model file: {0}")]
    ModelFile(String),

    #[error("unsupported model file version {found} (expected {expected})")]
    ModelVersion { found: u32, expected: u32 },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("invalid training config: {0}")]
    InvalidTrainConfig(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
