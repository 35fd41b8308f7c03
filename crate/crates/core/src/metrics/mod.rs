//! Objective quality measures and corpus-level evaluation.

pub mod report;
pub mod resample;
pub mod sdr;
pub mod stoi;

pub use report::{evaluate_manifest, EvalConfig, EvalFailure, EvalMode, EvalReport, EvalRow};
pub use resample::resample;
pub use sdr::{seg_snr, si_sdr, SEG_SNR_MAX_DB, SEG_SNR_MIN_DB, SI_SDR_CAP_DB};
pub use stoi::stoi;
