//! Perceptual contrast stretching.
//!
//! The magnitude spectrum is log-compressed, multiplied per frequency bin by
//! a band-importance weight, decompressed and resynthesized with the original
//! phase. Weights come from a band table (`low_hz high_hz gain` per line),
//! expanded onto FFT bins by bin center frequency.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Axis, Zip};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dsp::{
    self, MagnitudeSpectrum, Spectrogram, StftConfig, StftEngine, Waveform,
};
use crate::error::{Error, Result};

/// One row of a band-importance table: `gain` applies to `[low_hz, high_hz)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub low_hz: f64,
    pub high_hz: f64,
    pub gain: f64,
}

impl Band {
    pub fn new(low_hz: f64, high_hz: f64, gain: f64) -> Self {
        Self {
            low_hz,
            high_hz,
            gain,
        }
    }
}

/// Per-bin stretch factors.
#[derive(Clone, Debug, PartialEq)]
pub struct BandImportanceWeights {
    weights: Vec<f64>,
    source_bands: Option<Vec<Band>>,
}

impl BandImportanceWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if let Some((i, w)) = weights
            .iter()
            .enumerate()
            .find(|(_, w)| !(w.is_finite() && **w > 0.0))
        {
            return Err(Error::InvalidBands(format!(
                "weight {w} at bin {i} is not a positive finite number"
            )));
        }
        Ok(Self {
            weights,
            source_bands: None,
        })
    }

    /// Identity weights: stretching becomes a no-op.
    pub fn ones(n_bins: usize) -> Self {
        Self {
            weights: vec![1.0; n_bins],
            source_bands: None,
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn source_bands(&self) -> Option<&[Band]> {
        self.source_bands.as_deref()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Which side(s) of a training pair were stretched.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PcsMode {
    pub apply_to_input: bool,
    pub apply_to_target: bool,
}

impl PcsMode {
    pub const NONE: PcsMode = PcsMode::new(false, false);
    pub const INPUT: PcsMode = PcsMode::new(true, false);
    pub const TARGET: PcsMode = PcsMode::new(false, true);
    pub const BOTH: PcsMode = PcsMode::new(true, true);

    /// Ablation grid, in reporting order.
    pub const ALL: [PcsMode; 4] = [Self::BOTH, Self::INPUT, Self::TARGET, Self::NONE];

    pub const fn new(apply_to_input: bool, apply_to_target: bool) -> Self {
        Self {
            apply_to_input,
            apply_to_target,
        }
    }

    /// At inference only the noisy input is ever stretched.
    pub fn for_inference(self) -> PcsMode {
        PcsMode::new(self.apply_to_input, false)
    }

    pub fn is_none(self) -> bool {
        !self.apply_to_input && !self.apply_to_target
    }

    pub fn name(self) -> &'static str {
        match (self.apply_to_input, self.apply_to_target) {
            (true, true) => "both",
            (true, false) => "input",
            (false, true) => "target",
            (false, false) => "none",
        }
    }
}

impl fmt::Display for PcsMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PcsMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "both" => Ok(Self::BOTH),
            "input" | "input-only" => Ok(Self::INPUT),
            "target" | "target-only" => Ok(Self::TARGET),
            "none" => Ok(Self::NONE),
            other => Err(format!(
                "unknown PCS mode `{other}` (expected both, input, target or none)"
            )),
        }
    }
}

/// `log(|bins| + 1)`.
pub fn pcs_compress(s: &Spectrogram) -> MagnitudeSpectrum {
    MagnitudeSpectrum::new(s.bins().mapv(|c| c.norm().ln_1p()))
}

/// Multiplies every frame of `y` by the per-bin weights.
pub fn pcs_stretch(y: &MagnitudeSpectrum, w: &BandImportanceWeights) -> Result<MagnitudeSpectrum> {
    let (_, n_bins) = y.dim();
    if w.len() != n_bins {
        return Err(Error::LengthMismatch {
            context: "pcs weights vs bins",
            left: w.len(),
            right: n_bins,
        });
    }
    y.check_nonnegative()?;
    let weights = ndarray::ArrayView1::from(w.weights());
    let mut out: Array2<f64> = y.values().clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        Zip::from(&mut row).and(&weights).for_each(|v, &g| *v *= g);
    }
    Ok(MagnitudeSpectrum::new(out))
}

/// Full stretching chain on a waveform. Output length equals input length.
pub fn apply_pcs(x: &Waveform, w: &BandImportanceWeights, cfg: &StftConfig) -> Result<Waveform> {
    let engine = StftEngine::new(*cfg)?;
    apply_pcs_with(&engine, x, w)
}

pub fn apply_pcs_with(
    engine: &StftEngine,
    x: &Waveform,
    w: &BandImportanceWeights,
) -> Result<Waveform> {
    let spec = engine.stft(x)?;
    let stretched = pcs_stretch(&pcs_compress(&spec), w)?;
    let mag = dsp::decompress(&stretched)?;
    let out = dsp::recompose(&mag, &spec.phase(), &spec)?;
    engine.istft(&out)
}

/// Assigns each FFT bin the gain of the band containing its center frequency
/// `k * sample_rate / n_fft`. Bands are half-open `[low, high)`, except that
/// the band ending at Nyquist also owns the Nyquist bin.
pub fn expand_bands(
    bands: &[Band],
    cfg: &StftConfig,
    sample_rate: u32,
) -> Result<BandImportanceWeights> {
    if bands.is_empty() {
        return Err(Error::InvalidBands("no bands".into()));
    }
    let nyquist = sample_rate as f64 / 2.0;
    let mut sorted = bands.to_vec();
    sorted.sort_by(|a, b| a.low_hz.total_cmp(&b.low_hz));
    for b in &sorted {
        if !(b.gain.is_finite() && b.gain > 0.0) {
            return Err(Error::InvalidBands(format!(
                "band [{}, {}) has non-positive gain {}",
                b.low_hz, b.high_hz, b.gain
            )));
        }
        if !(b.low_hz.is_finite() && b.high_hz.is_finite() && b.low_hz < b.high_hz) {
            return Err(Error::InvalidBands(format!(
                "band [{}, {}) is empty or inverted",
                b.low_hz, b.high_hz
            )));
        }
    }
    if sorted[0].low_hz != 0.0 {
        return Err(Error::InvalidBands(format!(
            "coverage gap: first band starts at {} Hz, not 0",
            sorted[0].low_hz
        )));
    }
    for pair in sorted.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if b.low_hz < a.high_hz {
            return Err(Error::InvalidBands(format!(
                "bands [{}, {}) and [{}, {}) overlap",
                a.low_hz, a.high_hz, b.low_hz, b.high_hz
            )));
        }
        if b.low_hz > a.high_hz {
            return Err(Error::InvalidBands(format!(
                "coverage gap between {} Hz and {} Hz",
                a.high_hz, b.low_hz
            )));
        }
    }
    let last = sorted[sorted.len() - 1];
    if last.high_hz < nyquist {
        return Err(Error::InvalidBands(format!(
            "coverage gap: last band ends at {} Hz, below Nyquist {nyquist} Hz",
            last.high_hz
        )));
    }

    let weights = (0..cfg.n_bins())
        .map(|k| {
            let f = k as f64 * sample_rate as f64 / cfg.n_fft as f64;
            sorted
                .iter()
                .find(|b| b.low_hz <= f && f < b.high_hz)
                .or_else(|| (f == last.high_hz).then_some(&last))
                .map(|b| b.gain)
                .ok_or_else(|| Error::InvalidBands(format!("no band covers {f} Hz")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BandImportanceWeights {
        weights,
        source_bands: Some(sorted),
    })
}

/// Parses a band table: one `low_hz high_hz gain` triple per line, `#`
/// starts a comment.
pub fn parse_bands(text: &str) -> Result<Vec<Band>> {
    let mut bands = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::InvalidBands(format!(
                "line {}: expected `low_hz high_hz gain`, got `{line}`",
                lineno + 1
            )));
        }
        let mut nums = [0.0; 3];
        for (slot, field) in nums.iter_mut().zip(&fields) {
            *slot = field.parse().map_err(|_| {
                Error::InvalidBands(format!("line {}: `{field}` is not a number", lineno + 1))
            })?;
        }
        bands.push(Band::new(nums[0], nums[1], nums[2]));
    }
    Ok(bands)
}

/// A band table loaded from disk together with the SHA-256 of its bytes.
#[derive(Clone, Debug)]
pub struct BandTable {
    pub bands: Vec<Band>,
    pub sha256: String,
}

impl BandTable {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::InvalidBands(format!("{} is not UTF-8", path.display())))?;
        Self::from_text(&text)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Ok(Self {
            bands: parse_bands(text)?,
            sha256: hex::encode(Sha256::digest(text.as_bytes())),
        })
    }

    pub fn weights(&self, cfg: &StftConfig, sample_rate: u32) -> Result<BandImportanceWeights> {
        expand_bands(&self.bands, cfg, sample_rate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;
    use std::f64::consts::PI;

    fn tone(freq: f64, amp: f64, len: usize) -> Waveform {
        let s = (0..len)
            .map(|n| amp * (2.0 * PI * freq * n as f64 / 16000.0).sin())
            .collect();
        Waveform::new(s, 16000).unwrap()
    }

    #[test]
    fn compress_zero_and_e_minus_one() {
        let cfg = StftConfig::new(4, 2, 4).unwrap();
        let mut bins = Array2::zeros((2, 3));
        bins[[1, 2]] = Complex64::new(0.0, std::f64::consts::E - 1.0);
        let s = Spectrogram::new(bins, cfg, 2, 16000).unwrap();
        let y = pcs_compress(&s);
        assert_eq!(y.values()[[0, 0]], 0.0);
        assert!((y.values()[[1, 2]] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn compress_matches_dsp_compress_of_magnitude() {
        let cfg = StftConfig::default();
        let x = tone(700.0, 0.4, 4000);
        let s = dsp::stft(&x, &cfg).unwrap();
        let a = pcs_compress(&s);
        let b = dsp::compress(&s.magnitude()).unwrap();
        for (u, v) in a.values().iter().zip(b.values()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn stretch_identity_and_scaling() {
        let y = MagnitudeSpectrum::new(Array2::from_elem((3, 5), 1.0));
        assert_eq!(pcs_stretch(&y, &BandImportanceWeights::ones(5)).unwrap(), y);
        let two = BandImportanceWeights::new(vec![2.0; 5]).unwrap();
        let out = pcs_stretch(&y, &two).unwrap();
        assert!(out.values().iter().all(|&v| v == 2.0));
        assert!(matches!(
            pcs_stretch(&y, &BandImportanceWeights::ones(4)),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn stretch_matches_scalar_loop() {
        let cfg = StftConfig::default();
        let x = Waveform::new(
            tone(500.0, 0.3, 3200)
                .samples()
                .iter()
                .zip(tone(5000.0, 0.2, 3200).samples())
                .map(|(a, b)| a + b)
                .collect(),
            16000,
        )
        .unwrap();
        let y = pcs_compress(&dsp::stft(&x, &cfg).unwrap());
        let bands = [
            Band::new(0.0, 1000.0, 1.3),
            Band::new(1000.0, 4000.0, 0.7),
            Band::new(4000.0, 8000.0, 1.9),
        ];
        let w = expand_bands(&bands, &cfg, 16000).unwrap();
        let out = pcs_stretch(&y, &w).unwrap();
        let (frames, bins) = y.dim();
        for t in 0..frames {
            for k in 0..bins {
                let f = k as f64 * 40.0;
                let g = if f < 1000.0 {
                    1.3
                } else if f < 4000.0 {
                    0.7
                } else {
                    1.9
                };
                assert_eq!(out.values()[[t, k]], y.values()[[t, k]] * g);
            }
        }
    }

    #[test]
    fn identity_weights_reproduce_input() {
        let cfg = StftConfig::default();
        let x = tone(1234.0, 0.5, 8000);
        let y = apply_pcs(&x, &BandImportanceWeights::ones(201), &cfg).unwrap();
        assert_eq!(y.len(), x.len());
        for (a, b) in x.samples().iter().zip(y.samples()) {
            assert!((a - b).abs() < 1e-9);
        }
        let z = apply_pcs(&Waveform::zeros(1600, 16000), &BandImportanceWeights::ones(201), &cfg)
            .unwrap();
        assert!(z.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn expand_single_and_split_bands() {
        let cfg = StftConfig::default();
        let w = expand_bands(&[Band::new(0.0, 8000.0, 1.0)], &cfg, 16000).unwrap();
        assert_eq!(w.weights(), vec![1.0; 201].as_slice());

        let w = expand_bands(
            &[Band::new(4000.0, 8000.0, 2.0), Band::new(0.0, 4000.0, 1.0)],
            &cfg,
            16000,
        )
        .unwrap();
        for (k, &g) in w.weights().iter().enumerate() {
            let f = k as f64 * 16000.0 / 400.0;
            assert_eq!(g, if f < 4000.0 { 1.0 } else { 2.0 }, "bin {k}");
        }
        assert_eq!(w.weights()[100], 2.0);
        assert_eq!(w.weights()[99], 1.0);
        assert_eq!(w.source_bands().unwrap().len(), 2);
    }

    #[test]
    fn expand_rejects_gaps_and_overlaps() {
        let cfg = StftConfig::default();
        let gap = [Band::new(0.0, 3000.0, 1.0), Band::new(4000.0, 8000.0, 1.0)];
        assert!(matches!(
            expand_bands(&gap, &cfg, 16000),
            Err(Error::InvalidBands(m)) if m.contains("gap")
        ));
        let short = [Band::new(0.0, 7000.0, 1.0)];
        assert!(expand_bands(&short, &cfg, 16000).is_err());
        let late = [Band::new(100.0, 8000.0, 1.0)];
        assert!(expand_bands(&late, &cfg, 16000).is_err());
        let overlap = [Band::new(0.0, 5000.0, 1.0), Band::new(4000.0, 8000.0, 1.0)];
        assert!(matches!(
            expand_bands(&overlap, &cfg, 16000),
            Err(Error::InvalidBands(m)) if m.contains("overlap")
        ));
        let zero_gain = [Band::new(0.0, 8000.0, 0.0)];
        assert!(expand_bands(&zero_gain, &cfg, 16000).is_err());
    }

    #[test]
    fn parse_band_table() {
        let text = "# low high gain\n0 4000 1.0\n\n4000 8000 2.5 # upper\n";
        let bands = parse_bands(text).unwrap();
        assert_eq!(
            bands,
            vec![Band::new(0.0, 4000.0, 1.0), Band::new(4000.0, 8000.0, 2.5)]
        );
        assert!(parse_bands("0 4000").is_err());
        assert!(parse_bands("0 x 1").is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for mode in PcsMode::ALL {
            assert_eq!(mode.name().parse::<PcsMode>().unwrap(), mode);
        }
        assert_eq!(PcsMode::BOTH.for_inference(), PcsMode::INPUT);
        assert_eq!(PcsMode::TARGET.for_inference(), PcsMode::NONE);
        assert!("sideways".parse::<PcsMode>().is_err());
    }

    #[test]
    fn non_positive_weights_rejected() {
        assert!(BandImportanceWeights::new(vec![1.0, 0.0]).is_err());
        assert!(BandImportanceWeights::new(vec![1.0, f64::NAN]).is_err());
    }
}
