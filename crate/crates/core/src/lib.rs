//! Speech enhancement toolkit.
//!
//! Centered STFT analysis/synthesis, perceptual contrast stretching (PCS),
//! ideal-ratio-mask estimation and application, the wSDR / magnitude-L1 /
//! consistency-preserving magnitude-L1 training objective with analytic
//! gradients, a compact trainable mask estimator, and objective metrics.

pub mod audio_io;
pub mod dsp;
pub mod error;
pub mod estimator;
pub mod gradcheck;
pub mod losses;
pub mod masking;
pub mod metrics;
pub mod pcs;

pub use dsp::{
    compress, consistency_project, decompose, decompress, istft, recompose, stft,
    MagnitudeSpectrum, PhaseSpectrum, Spectrogram, StftConfig, StftEngine, Waveform, WindowKind,
};
pub use error::{Error, Result};
pub use estimator::{Architecture, EstimatorModel, TrainConfig};
pub use losses::{LossBreakdown, LossWeights};
pub use masking::{MaskDomain, MaskEstimate, MaskModel};
pub use pcs::{BandImportanceWeights, PcsMode};
