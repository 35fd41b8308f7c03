//! Scale-invariant SDR and segmental SNR.

use crate::dsp::Waveform;
use crate::error::{Error, Result};

/// SI-SDR saturates at +/- this value instead of returning infinities.
pub const SI_SDR_CAP_DB: f64 = 100.0;

pub const SEG_SNR_MIN_DB: f64 = -10.0;
pub const SEG_SNR_MAX_DB: f64 = 35.0;

fn check_pair(clean: &Waveform, processed: &Waveform, context: &'static str) -> Result<()> {
    if clean.sample_rate() != processed.sample_rate() {
        return Err(Error::SampleRateMismatch {
            left: clean.sample_rate(),
            right: processed.sample_rate(),
        });
    }
    if clean.len() != processed.len() {
        return Err(Error::LengthMismatch {
            context,
            left: clean.len(),
            right: processed.len(),
        });
    }
    if clean.is_empty() {
        return Err(Error::EmptyWaveform);
    }
    Ok(())
}

fn ratio_db(num: f64, den: f64, cap: f64) -> f64 {
    if num == 0.0 {
        return -cap;
    }
    if den == 0.0 {
        return cap;
    }
    (10.0 * (num / den).log10()).clamp(-cap, cap)
}

/// 10·log10(‖αs‖² / ‖αs − ŝ‖²) with α = ⟨ŝ, s⟩ / ‖s‖².
pub fn si_sdr(clean: &Waveform, processed: &Waveform) -> Result<f64> {
    check_pair(clean, processed, "si_sdr")?;
    let s = clean.samples();
    let p = processed.samples();
    let ss: f64 = s.iter().map(|v| v * v).sum();
    if ss == 0.0 {
        return Err(Error::Degenerate("SI-SDR of a silent clean signal".into()));
    }
    let alpha = s.iter().zip(p).map(|(a, b)| a * b).sum::<f64>() / ss;
    let (mut target, mut err) = (0.0, 0.0);
    for (a, b) in s.iter().zip(p) {
        let t = alpha * a;
        target += t * t;
        err += (b - t) * (b - t);
    }
    Ok(ratio_db(target, err, SI_SDR_CAP_DB))
}

/// Mean per-frame SNR over 30 ms frames with 50 % overlap, each frame
/// clamped to [-10, 35] dB.
pub fn seg_snr(clean: &Waveform, processed: &Waveform) -> Result<f64> {
    check_pair(clean, processed, "seg_snr")?;
    let frame = ((0.030 * clean.sample_rate() as f64).round() as usize).max(1);
    let hop = (frame / 2).max(1);
    let s = clean.samples();
    let p = processed.samples();
    let frame = frame.min(s.len());
    let mut total = 0.0;
    let mut count = 0usize;
    let mut start = 0;
    while start + frame <= s.len() {
        let (mut sig, mut noise) = (0.0, 0.0);
        for i in start..start + frame {
            sig += s[i] * s[i];
            noise += (s[i] - p[i]) * (s[i] - p[i]);
        }
        let db = if noise == 0.0 {
            SEG_SNR_MAX_DB
        } else if sig == 0.0 {
            SEG_SNR_MIN_DB
        } else {
            10.0 * (sig / noise).log10()
        };
        total += db.clamp(SEG_SNR_MIN_DB, SEG_SNR_MAX_DB);
        count += 1;
        start += hop;
    }
    Ok(total / count as f64)
}
