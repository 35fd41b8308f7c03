//! Short-time Fourier analysis and synthesis, magnitude/phase handling and
//! the `log(1 + x)` / `e^x - 1` compression pair.
//!
//! The transform is centered: the waveform is reflect-padded by `n_fft / 2`
//! on both sides and frame `t` starts at padded sample `t * hop`. Synthesis
//! is weighted overlap-add with the analysis window, normalized by the summed
//! squared window, so `istft(stft(x)) == x` for any valid configuration.
//!
//! Besides the forward maps, [`StftEngine`] exposes the adjoints of analysis
//! and synthesis. The loss gradients use them to push sensitivities through
//! `iSTFT` and `STFT` without an autodiff framework.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use ndarray::{Array2, Zip};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inputs to [`decompress`] above this value are treated as corrupt.
pub const DEFAULT_DECOMPRESS_CAP: f64 = 80.0;

/// Smallest overlap-add envelope accepted during synthesis.
const MIN_ENVELOPE: f64 = 1e-11;

/// A mono signal at a fixed sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidConfig("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("waveform"));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate: sample_rate.max(1),
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Returns a copy multiplied by `gain`.
    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }
}

/// Analysis/synthesis window shape.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    /// Periodic Hann, `0.5 - 0.5 cos(2 pi n / N)`.
    #[default]
    Hann,
    Rectangular,
}

impl fmt::Display for WindowKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WindowKind::Hann => f.write_str("hann"),
            WindowKind::Rectangular => f.write_str("rectangular"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StftConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub win_length: usize,
    #[serde(default)]
    pub window: WindowKind,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            n_fft: 400,
            hop: 160,
            win_length: 400,
            window: WindowKind::Hann,
        }
    }
}

impl StftConfig {
    pub fn new(n_fft: usize, hop: usize, win_length: usize) -> Result<Self> {
        let cfg = Self {
            n_fft,
            hop,
            win_length,
            window: WindowKind::Hann,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Reflect padding applied on each side.
    pub fn pad(&self) -> usize {
        self.n_fft / 2
    }

    /// Frames produced for a waveform of `len` samples.
    pub fn n_frames(&self, len: usize) -> usize {
        1 + len / self.hop
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_fft == 0 || self.n_fft % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "n_fft must be a positive even integer, got {}",
                self.n_fft
            )));
        }
        if self.win_length == 0 || self.win_length > self.n_fft {
            return Err(Error::InvalidConfig(format!(
                "win_length must be in 1..={}, got {}",
                self.n_fft, self.win_length
            )));
        }
        if self.hop == 0 || self.hop > self.win_length {
            return Err(Error::InvalidConfig(format!(
                "hop must be in 1..={}, got {}",
                self.win_length, self.hop
            )));
        }
        // Steady-state squared-window overlap sum, one value per hop phase.
        let window = self.window_samples();
        for phase in 0..self.hop {
            let sum: f64 = window[phase..]
                .iter()
                .step_by(self.hop)
                .map(|w| w * w)
                .sum();
            if sum <= MIN_ENVELOPE {
                return Err(Error::InvalidConfig(format!(
                    "squared-window overlap sum vanishes at phase {phase} (hop {}, window {})",
                    self.hop, self.window
                )));
            }
        }
        Ok(())
    }

    /// The analysis window, zero-padded and centered to `n_fft` samples.
    pub fn window_samples(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_fft];
        let offset = (self.n_fft - self.win_length) / 2;
        for n in 0..self.win_length {
            out[offset + n] = match self.window {
                WindowKind::Hann => {
                    0.5 - 0.5 * (2.0 * PI * n as f64 / self.win_length as f64).cos()
                }
                WindowKind::Rectangular => 1.0,
            };
        }
        out
    }
}

/// Complex time-frequency matrix, `n_frames x n_bins`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    bins: Array2<Complex64>,
    config: StftConfig,
    original_length: usize,
    sample_rate: u32,
}

impl Spectrogram {
    pub fn new(
        bins: Array2<Complex64>,
        config: StftConfig,
        original_length: usize,
        sample_rate: u32,
    ) -> Result<Self> {
        config.validate()?;
        if bins.ncols() != config.n_bins() {
            return Err(Error::ShapeMismatch {
                context: "spectrogram bins",
                expected: (bins.nrows(), config.n_bins()),
                actual: bins.dim(),
            });
        }
        if bins.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::NonFinite("spectrogram"));
        }
        Ok(Self {
            bins,
            config,
            original_length,
            sample_rate,
        })
    }

    pub fn bins(&self) -> &Array2<Complex64> {
        &self.bins
    }

    pub fn into_bins(self) -> Array2<Complex64> {
        self.bins
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn original_length(&self) -> usize {
        self.original_length
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn n_frames(&self) -> usize {
        self.bins.nrows()
    }

    pub fn n_bins(&self) -> usize {
        self.bins.ncols()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.bins.dim()
    }

    pub fn magnitude(&self) -> MagnitudeSpectrum {
        MagnitudeSpectrum(self.bins.mapv(|c| c.norm()))
    }

    pub fn phase(&self) -> PhaseSpectrum {
        PhaseSpectrum(self.bins.mapv(bin_phase))
    }

    /// Same layout with different bin values.
    pub fn with_bins(&self, bins: Array2<Complex64>) -> Result<Self> {
        if bins.dim() != self.bins.dim() {
            return Err(Error::ShapeMismatch {
                context: "spectrogram bins",
                expected: self.bins.dim(),
                actual: bins.dim(),
            });
        }
        Self::new(bins, self.config, self.original_length, self.sample_rate)
    }

    /// Largest element-wise modulus of the difference.
    pub fn max_abs_diff(&self, other: &Spectrogram) -> f64 {
        Zip::from(&self.bins)
            .and(&other.bins)
            .fold(0.0f64, |acc, a, b| acc.max((a - b).norm()))
    }
}

/// Real matrix of non-negative magnitudes (linear or compressed).
#[derive(Clone, Debug, PartialEq)]
pub struct MagnitudeSpectrum(pub Array2<f64>);

/// Real matrix of phases in `(-pi, pi]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseSpectrum(pub Array2<f64>);

impl MagnitudeSpectrum {
    pub fn new(values: Array2<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(n_frames: usize, n_bins: usize) -> Self {
        Self(Array2::zeros((n_frames, n_bins)))
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub(crate) fn check_nonnegative(&self) -> Result<()> {
        for ((frame, bin), &value) in self.0.indexed_iter() {
            if !value.is_finite() {
                return Err(Error::NonFinite("magnitude spectrum"));
            }
            if value < 0.0 {
                return Err(Error::NegativeMagnitude { frame, bin, value });
            }
        }
        Ok(())
    }
}

impl PhaseSpectrum {
    pub fn new(values: Array2<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }
}

fn bin_phase(c: Complex64) -> f64 {
    if c.re == 0.0 && c.im == 0.0 {
        return 0.0;
    }
    let p = c.im.atan2(c.re);
    if p <= -PI {
        PI
    } else {
        p
    }
}

/// Precomputed FFT plans and window for one [`StftConfig`].
///
/// Cheap to share between threads; every method takes `&self`.
#[derive(Clone)]
pub struct StftEngine {
    config: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for StftEngine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StftEngine")
            .field("config", &self.config)
            .finish()
    }
}

impl StftEngine {
    pub fn new(config: StftConfig) -> Result<Self> {
        config.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            config,
            window: config.window_samples(),
            forward: planner.plan_fft_forward(config.n_fft),
            inverse: planner.plan_fft_inverse(config.n_fft),
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    fn check_length(&self, len: usize) -> Result<()> {
        if len == 0 {
            return Err(Error::EmptyWaveform);
        }
        let pad = self.config.pad();
        if len <= pad {
            return Err(Error::WaveformTooShort { len, min: pad });
        }
        Ok(())
    }

    /// Index into the original signal for padded position `i`.
    fn reflect(&self, i: usize, len: usize) -> usize {
        let j = i as isize - self.config.pad() as isize;
        let last = len as isize - 1;
        let k = if j < 0 {
            -j
        } else if j > last {
            2 * last - j
        } else {
            j
        };
        k as usize
    }

    fn padded_len(&self, n_frames: usize) -> usize {
        self.config.n_fft + self.config.hop * (n_frames.max(1) - 1)
    }

    /// Summed squared window over the padded buffer.
    fn envelope(&self, n_frames: usize) -> Vec<f64> {
        let mut env = vec![0.0; self.padded_len(n_frames)];
        for t in 0..n_frames {
            let start = t * self.config.hop;
            for (e, w) in env[start..start + self.config.n_fft]
                .iter_mut()
                .zip(&self.window)
            {
                *e += w * w;
            }
        }
        env
    }

    /// Forward transform of raw samples.
    pub fn analyze(&self, samples: &[f64]) -> Result<Array2<Complex64>> {
        self.check_length(samples.len())?;
        let len = samples.len();
        let n_fft = self.config.n_fft;
        let n_frames = self.config.n_frames(len);
        let n_bins = self.config.n_bins();
        let mut out = Array2::zeros((n_frames, n_bins));
        let mut buf = vec![Complex64::default(); n_fft];
        for t in 0..n_frames {
            let start = t * self.config.hop;
            for (n, slot) in buf.iter_mut().enumerate() {
                let x = samples[self.reflect(start + n, len)];
                *slot = Complex64::new(self.window[n] * x, 0.0);
            }
            self.forward.process(&mut buf);
            for (dst, src) in out.row_mut(t).iter_mut().zip(&buf[..n_bins]) {
                *dst = *src;
            }
        }
        Ok(out)
    }

    /// Inverse transform of one-sided bins, trimmed to `length` samples.
    ///
    /// Imaginary parts of the DC and Nyquist bins are ignored, as in a
    /// real inverse FFT.
    pub fn synthesize(&self, bins: &Array2<Complex64>, length: usize) -> Result<Vec<f64>> {
        let n_fft = self.config.n_fft;
        let n_bins = self.config.n_bins();
        if bins.ncols() != n_bins {
            return Err(Error::ShapeMismatch {
                context: "istft",
                expected: (bins.nrows(), n_bins),
                actual: bins.dim(),
            });
        }
        let n_frames = bins.nrows();
        if n_frames == 0 {
            return Err(Error::Degenerate("spectrogram has no frames".into()));
        }
        let pad = self.config.pad();
        let env = self.envelope(n_frames);
        if pad + length > env.len() {
            return Err(Error::DegenerateOverlap {
                index: env.len().saturating_sub(pad),
                value: 0.0,
            });
        }
        let mut acc = vec![0.0; env.len()];
        let mut buf = vec![Complex64::default(); n_fft];
        let scale = 1.0 / n_fft as f64;
        for (t, row) in bins.outer_iter().enumerate() {
            hermitian_extend(row.as_slice().expect("contiguous row"), &mut buf);
            self.inverse.process(&mut buf);
            let start = t * self.config.hop;
            for (n, c) in buf.iter().enumerate() {
                acc[start + n] += self.window[n] * c.re * scale;
            }
        }
        let mut out = Vec::with_capacity(length);
        for j in 0..length {
            let e = env[pad + j];
            if e <= MIN_ENVELOPE {
                return Err(Error::DegenerateOverlap { index: j, value: e });
            }
            out.push(acc[pad + j] / e);
        }
        Ok(out)
    }

    /// Adjoint of [`analyze`](Self::analyze): maps a gradient over the bins
    /// (real part = d/dRe, imaginary part = d/dIm) to a gradient over the
    /// `length` input samples.
    pub fn analyze_adjoint(&self, grad: &Array2<Complex64>, length: usize) -> Result<Vec<f64>> {
        self.check_length(length)?;
        let n_fft = self.config.n_fft;
        let n_bins = self.config.n_bins();
        let n_frames = self.config.n_frames(length);
        if grad.dim() != (n_frames, n_bins) {
            return Err(Error::ShapeMismatch {
                context: "stft adjoint",
                expected: (n_frames, n_bins),
                actual: grad.dim(),
            });
        }
        let mut padded = vec![0.0; self.padded_len(n_frames)];
        let mut buf = vec![Complex64::default(); n_fft];
        for (t, row) in grad.outer_iter().enumerate() {
            buf.fill(Complex64::default());
            for (dst, src) in buf.iter_mut().zip(row.iter()) {
                *dst = *src;
            }
            self.inverse.process(&mut buf);
            let start = t * self.config.hop;
            for (n, c) in buf.iter().enumerate() {
                padded[start + n] += self.window[n] * c.re;
            }
        }
        let mut out = vec![0.0; length];
        for (i, g) in padded.iter().enumerate() {
            out[self.reflect(i, length)] += g;
        }
        Ok(out)
    }

    /// Adjoint of [`synthesize`](Self::synthesize): maps a gradient over the
    /// output samples to a gradient over `n_frames` rows of bins.
    pub fn synthesize_adjoint(&self, grad: &[f64], n_frames: usize) -> Result<Array2<Complex64>> {
        let n_fft = self.config.n_fft;
        let n_bins = self.config.n_bins();
        let pad = self.config.pad();
        let env = self.envelope(n_frames);
        if pad + grad.len() > env.len() {
            return Err(Error::DegenerateOverlap {
                index: env.len().saturating_sub(pad),
                value: 0.0,
            });
        }
        let mut padded = vec![0.0; env.len()];
        for (j, g) in grad.iter().enumerate() {
            let e = env[pad + j];
            if e <= MIN_ENVELOPE {
                return Err(Error::DegenerateOverlap { index: j, value: e });
            }
            padded[pad + j] = g / e;
        }
        let scale = 1.0 / n_fft as f64;
        let mut out = Array2::zeros((n_frames, n_bins));
        let mut buf = vec![Complex64::default(); n_fft];
        for t in 0..n_frames {
            let start = t * self.config.hop;
            for (n, slot) in buf.iter_mut().enumerate() {
                *slot = Complex64::new(self.window[n] * padded[start + n] * scale, 0.0);
            }
            self.forward.process(&mut buf);
            for (k, dst) in out.row_mut(t).iter_mut().enumerate() {
                let weight = if k == 0 || k == n_fft / 2 { 1.0 } else { 2.0 };
                *dst = buf[k] * weight;
            }
        }
        Ok(out)
    }

    pub fn stft(&self, x: &Waveform) -> Result<Spectrogram> {
        let bins = self.analyze(x.samples())?;
        Ok(Spectrogram {
            bins,
            config: self.config,
            original_length: x.len(),
            sample_rate: x.sample_rate(),
        })
    }

    pub fn istft(&self, s: &Spectrogram) -> Result<Waveform> {
        if s.config != self.config {
            return Err(Error::InvalidConfig(
                "spectrogram was produced with a different STFT config".into(),
            ));
        }
        let samples = self.synthesize(&s.bins, s.original_length)?;
        Waveform::new(samples, s.sample_rate)
    }

    /// `STFT(iSTFT(s))`: the nearest consistent spectrogram.
    pub fn consistency_project(&self, s: &Spectrogram) -> Result<Spectrogram> {
        let wave = self.istft(s)?;
        self.stft(&wave)
    }
}

/// Fills `buf` (length `n_fft`) with the Hermitian extension of `half`.
fn hermitian_extend(half: &[Complex64], buf: &mut [Complex64]) {
    let n = buf.len();
    let nyq = n / 2;
    buf[0] = Complex64::new(half[0].re, 0.0);
    buf[nyq] = Complex64::new(half[nyq].re, 0.0);
    for k in 1..nyq {
        buf[k] = half[k];
        buf[n - k] = half[k].conj();
    }
}

pub fn stft(x: &Waveform, cfg: &StftConfig) -> Result<Spectrogram> {
    StftEngine::new(*cfg)?.stft(x)
}

pub fn istft(s: &Spectrogram) -> Result<Waveform> {
    StftEngine::new(s.config)?.istft(s)
}

pub fn consistency_project(s: &Spectrogram) -> Result<Spectrogram> {
    StftEngine::new(s.config)?.consistency_project(s)
}

/// Element-wise modulus and argument. Zero bins get phase 0.
pub fn decompose(s: &Spectrogram) -> (MagnitudeSpectrum, PhaseSpectrum) {
    (s.magnitude(), s.phase())
}

/// `mag * e^{i phase}`, element-wise, as raw bins.
pub fn recompose_bins(mag: &MagnitudeSpectrum, phase: &PhaseSpectrum) -> Result<Array2<Complex64>> {
    if mag.dim() != phase.dim() {
        return Err(Error::ShapeMismatch {
            context: "recompose",
            expected: mag.dim(),
            actual: phase.dim(),
        });
    }
    Ok(Zip::from(&mag.0)
        .and(&phase.0)
        .map_collect(|&m, &p| Complex64::from_polar(m, p)))
}

/// Rebuilds a spectrogram in the layout of `like` from magnitude and phase.
pub fn recompose(
    mag: &MagnitudeSpectrum,
    phase: &PhaseSpectrum,
    like: &Spectrogram,
) -> Result<Spectrogram> {
    let bins = recompose_bins(mag, phase)?;
    like.with_bins(bins)
}

/// Element-wise `log(1 + x)`.
pub fn compress(mag: &MagnitudeSpectrum) -> Result<MagnitudeSpectrum> {
    mag.check_nonnegative()?;
    Ok(MagnitudeSpectrum(mag.0.mapv(f64::ln_1p)))
}

/// Element-wise `e^x - 1`, rejecting inputs above [`DEFAULT_DECOMPRESS_CAP`].
pub fn decompress(mag: &MagnitudeSpectrum) -> Result<MagnitudeSpectrum> {
    decompress_with_cap(mag, DEFAULT_DECOMPRESS_CAP)
}

pub fn decompress_with_cap(mag: &MagnitudeSpectrum, cap: f64) -> Result<MagnitudeSpectrum> {
    for &value in mag.0.iter() {
        if !value.is_finite() {
            return Err(Error::NonFinite("compressed spectrum"));
        }
        if value > cap {
            return Err(Error::DecompressOverflow { value, cap });
        }
    }
    Ok(MagnitudeSpectrum(mag.0.mapv(f64::exp_m1)))
}
