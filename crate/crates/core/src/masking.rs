//! Ratio masks: the oracle IRM, mask application, and resynthesis with the
//! noisy phase.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::dsp::{self, MagnitudeSpectrum, PhaseSpectrum, StftConfig, StftEngine, Waveform};
use crate::error::{Error, Result};

/// Denominator floor for the oracle ratio.
pub const IRM_EPSILON: f64 = 1e-8;

/// Per-bin mask values in `[0, 1]`, `n_frames x n_bins`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskEstimate {
    values: Array2<f64>,
}

impl MaskEstimate {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        for ((frame, bin), &value) in values.indexed_iter() {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::MaskOutOfRange { frame, bin, value });
            }
        }
        Ok(Self { values })
    }

    pub fn constant(n_frames: usize, n_bins: usize, value: f64) -> Result<Self> {
        Self::new(Array2::from_elem((n_frames, n_bins), value))
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.values
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }
}

/// Where the mask multiplies the noisy magnitude.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskDomain {
    /// `m * |Y|`.
    #[default]
    Linear,
    /// `exp(m * log(1 + |Y|)) - 1`.
    Compressed,
}

impl MaskDomain {
    /// Enhanced magnitude for one bin.
    #[inline]
    pub fn apply(self, mask: f64, noisy_mag: f64) -> f64 {
        match self {
            MaskDomain::Linear => mask * noisy_mag,
            MaskDomain::Compressed => (mask * noisy_mag.ln_1p()).exp_m1(),
        }
    }

    /// Derivative of [`apply`](Self::apply) with respect to the mask.
    #[inline]
    pub fn derivative(self, mask: f64, noisy_mag: f64) -> f64 {
        match self {
            MaskDomain::Linear => noisy_mag,
            MaskDomain::Compressed => {
                let c = noisy_mag.ln_1p();
                c * (mask * c).exp()
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MaskDomain::Linear => "linear",
            MaskDomain::Compressed => "compressed",
        }
    }
}

fn check_same_shape(context: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            context,
            expected: a,
            actual: b,
        });
    }
    Ok(())
}

/// Clean-to-noisy magnitude ratio per bin, floored denominator, clipped to
/// `[0, 1]`.
pub fn irm_oracle(clean_mag: &MagnitudeSpectrum, noisy_mag: &MagnitudeSpectrum) -> Result<MaskEstimate> {
    check_same_shape("irm_oracle", noisy_mag.dim(), clean_mag.dim())?;
    clean_mag.check_nonnegative()?;
    noisy_mag.check_nonnegative()?;
    let values = Zip::from(clean_mag.values())
        .and(noisy_mag.values())
        .map_collect(|&c, &n| (c / n.max(IRM_EPSILON)).clamp(0.0, 1.0));
    MaskEstimate::new(values)
}

/// Element-wise `mask * noisy_mag`.
pub fn apply_mask(noisy_mag: &MagnitudeSpectrum, m: &MaskEstimate) -> Result<MagnitudeSpectrum> {
    apply_mask_in(noisy_mag, m, MaskDomain::Linear)
}

pub fn apply_mask_in(
    noisy_mag: &MagnitudeSpectrum,
    m: &MaskEstimate,
    domain: MaskDomain,
) -> Result<MagnitudeSpectrum> {
    check_same_shape("apply_mask", noisy_mag.dim(), m.dim())?;
    noisy_mag.check_nonnegative()?;
    Ok(MagnitudeSpectrum::new(
        Zip::from(noisy_mag.values())
            .and(m.values())
            .map_collect(|&y, &g| domain.apply(g, y)),
    ))
}

/// iSTFT of `enhanced_mag * e^{i noisy_phase}`, trimmed to `length`.
pub fn reconstruct(
    enhanced_mag: &MagnitudeSpectrum,
    noisy_phase: &PhaseSpectrum,
    cfg: &StftConfig,
    length: usize,
    sample_rate: u32,
) -> Result<Waveform> {
    let engine = StftEngine::new(*cfg)?;
    reconstruct_with(&engine, enhanced_mag, noisy_phase, length, sample_rate)
}

pub fn reconstruct_with(
    engine: &StftEngine,
    enhanced_mag: &MagnitudeSpectrum,
    noisy_phase: &PhaseSpectrum,
    length: usize,
    sample_rate: u32,
) -> Result<Waveform> {
    let bins = dsp::recompose_bins(enhanced_mag, noisy_phase)?;
    let samples = engine.synthesize(&bins, length)?;
    Waveform::new(samples, sample_rate)
}

/// Anything that maps compressed noisy magnitudes to a ratio mask.
pub trait MaskModel {
    fn predict(
        &self,
        noisy_compressed: &MagnitudeSpectrum,
        external: Option<&Array2<f64>>,
    ) -> Result<MaskEstimate>;

    fn mask_domain(&self) -> MaskDomain {
        MaskDomain::Linear
    }

    /// Sample rate the model was built for, if it cares.
    fn sample_rate(&self) -> Option<u32> {
        None
    }
}

/// Inference chain: STFT, compress, predict a mask, apply it to the noisy
/// magnitude and resynthesize with the noisy phase. Preserves length.
pub fn enhance<M: MaskModel + ?Sized>(
    noisy: &Waveform,
    model: &M,
    cfg: &StftConfig,
) -> Result<Waveform> {
    let engine = StftEngine::new(*cfg)?;
    enhance_with(&engine, noisy, model, None)
}

pub fn enhance_with<M: MaskModel + ?Sized>(
    engine: &StftEngine,
    noisy: &Waveform,
    model: &M,
    external: Option<&Array2<f64>>,
) -> Result<Waveform> {
    if let Some(rate) = model.sample_rate() {
        if rate != noisy.sample_rate() {
            return Err(Error::SampleRateMismatch {
                left: rate,
                right: noisy.sample_rate(),
            });
        }
    }
    let spec = engine.stft(noisy)?;
    let (mag, phase) = dsp::decompose(&spec);
    let features = dsp::compress(&mag)?;
    let mask = model.predict(&features, external)?;
    let enhanced = apply_mask_in(&mag, &mask, model.mask_domain())?;
    reconstruct_with(engine, &enhanced, &phase, noisy.len(), noisy.sample_rate())
}

/// Oracle enhancement: IRM from the clean/noisy pair applied to the noisy
/// magnitude.
pub fn oracle_enhance(noisy: &Waveform, clean: &Waveform, cfg: &StftConfig) -> Result<Waveform> {
    let engine = StftEngine::new(*cfg)?;
    oracle_enhance_with(&engine, noisy, clean)
}

pub fn oracle_enhance_with(
    engine: &StftEngine,
    noisy: &Waveform,
    clean: &Waveform,
) -> Result<Waveform> {
    if noisy.len() != clean.len() {
        return Err(Error::LengthMismatch {
            context: "oracle enhancement",
            left: noisy.len(),
            right: clean.len(),
        });
    }
    let noisy_spec = engine.stft(noisy)?;
    let clean_spec = engine.stft(clean)?;
    let (noisy_mag, noisy_phase) = dsp::decompose(&noisy_spec);
    let mask = irm_oracle(&clean_spec.magnitude(), &noisy_mag)?;
    let enhanced = apply_mask(&noisy_mag, &mask)?;
    reconstruct_with(engine, &enhanced, &noisy_phase, noisy.len(), noisy.sample_rate())
}

/// A model that ignores its input and returns a constant mask.
#[derive(Clone, Copy, Debug)]
pub struct ConstantMask(pub f64);

impl MaskModel for ConstantMask {
    fn predict(
        &self,
        noisy_compressed: &MagnitudeSpectrum,
        _external: Option<&Array2<f64>>,
    ) -> Result<MaskEstimate> {
        let (t, f) = noisy_compressed.dim();
        MaskEstimate::constant(t, f, self.0)
    }
}
