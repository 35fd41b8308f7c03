//! Training objective: waveform wSDR, compressed-magnitude L1 and the
//! consistency-preserving compressed-magnitude L1, with analytic gradients
//! with respect to the mask.
//!
//! Gradient flow for one utterance (`u` is the unit noisy phasor):
//!
//! ```text
//! mask -> E = apply(mask, |Y|) -> S = E u -> s_hat = iSTFT(S) -> wSDR
//!                 |                                |
//!                 +-> log(1 + E) -> mag-L1         +-> Z = STFT(s_hat) -> log(1 + |Z|) -> CS-mag-L1
//! ```
//!
//! Complex gradients are carried as `dL/dRe + i dL/dIm`.

use ndarray::{Array2, Zip};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dsp::{self, MagnitudeSpectrum, Spectrogram, StftConfig, StftEngine, Waveform};
use crate::error::{Error, Result};
use crate::masking::{MaskDomain, MaskEstimate};

/// Mixing weights of the three loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub wsdr: f64,
    pub mag_l1: f64,
    pub cs_mag_l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            wsdr: 1.0,
            mag_l1: 1.0,
            cs_mag_l1: 1.0,
        }
    }
}

impl LossWeights {
    pub const fn new(wsdr: f64, mag_l1: f64, cs_mag_l1: f64) -> Self {
        Self {
            wsdr,
            mag_l1,
            cs_mag_l1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("wsdr", self.wsdr),
            ("mag_l1", self.mag_l1),
            ("cs_mag_l1", self.cs_mag_l1),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::InvalidTrainConfig(format!(
                    "loss weight {name} must be finite and non-negative, got {w}"
                )));
            }
        }
        Ok(())
    }

    fn combine(&self, wsdr: f64, mag_l1: f64, cs_mag_l1: f64) -> f64 {
        self.wsdr * wsdr + self.mag_l1 * mag_l1 + self.cs_mag_l1 * cs_mag_l1
    }
}

/// Per-term loss values and their weighted total.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub wsdr: f64,
    pub mag_l1: f64,
    pub cs_mag_l1: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    pub fn new(wsdr: f64, mag_l1: f64, cs_mag_l1: f64, weights: LossWeights) -> Self {
        Self {
            wsdr,
            mag_l1,
            cs_mag_l1,
            total: weights.combine(wsdr, mag_l1, cs_mag_l1),
            weights,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.wsdr.is_finite()
            && self.mag_l1.is_finite()
            && self.cs_mag_l1.is_finite()
            && self.total.is_finite()
    }

    /// Component-wise mean of several breakdowns sharing the same weights.
    pub fn mean(items: &[LossBreakdown]) -> Option<LossBreakdown> {
        let first = items.first()?;
        let n = items.len() as f64;
        let sum = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        Some(LossBreakdown::new(
            sum(|b| b.wsdr),
            sum(|b| b.mag_l1),
            sum(|b| b.cs_mag_l1),
            first.weights,
        ))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity `<a, b> / (|a| |b|)` and its gradient with respect to
/// `b`. Zero vectors give similarity 0 and a zero gradient.
fn cosine_and_grad(a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
    let aa = dot(a, a);
    let bb = dot(b, b);
    if aa == 0.0 || bb == 0.0 {
        return (0.0, vec![0.0; b.len()]);
    }
    let ab = dot(a, b);
    // sqrt(aa * bb) keeps cos(a, a) exactly 1 in floating point.
    let mut denom = (aa * bb).sqrt();
    if denom == 0.0 || !denom.is_finite() {
        denom = aa.sqrt() * bb.sqrt();
    }
    let cos = (ab / denom).clamp(-1.0, 1.0);
    let grad = a
        .iter()
        .zip(b)
        .map(|(&ai, &bi)| ai / denom - cos * bi / bb)
        .collect();
    (cos, grad)
}

/// wSDR value and its gradient with respect to the enhanced samples.
fn wsdr_and_grad(noisy: &[f64], clean: &[f64], enhanced: &[f64]) -> Result<(f64, Vec<f64>)> {
    if noisy.len() != clean.len() || noisy.len() != enhanced.len() {
        return Err(Error::LengthMismatch {
            context: "wsdr",
            left: noisy.len(),
            right: if noisy.len() != clean.len() {
                clean.len()
            } else {
                enhanced.len()
            },
        });
    }
    let noise: Vec<f64> = noisy.iter().zip(clean).map(|(y, s)| y - s).collect();
    let noise_est: Vec<f64> = noisy.iter().zip(enhanced).map(|(y, e)| y - e).collect();
    let clean_energy = dot(clean, clean);
    let noise_energy = dot(&noise, &noise);
    if clean_energy == 0.0 && noise_energy == 0.0 {
        return Err(Error::Degenerate(
            "wsdr: clean and noise are both silent".into(),
        ));
    }
    let alpha = if clean_energy == 0.0 {
        0.0
    } else if noise_energy == 0.0 {
        1.0
    } else {
        clean_energy / (clean_energy + noise_energy)
    };
    let (c_speech, g_speech) = cosine_and_grad(clean, enhanced);
    let (c_noise, g_noise) = cosine_and_grad(&noise, &noise_est);
    let loss = if alpha == 1.0 {
        -c_speech
    } else if alpha == 0.0 {
        -c_noise
    } else {
        -c_noise - alpha * (c_speech - c_noise)
    };
    // d(noise_est)/d(enhanced) = -1.
    let grad = g_speech
        .iter()
        .zip(&g_noise)
        .map(|(gs, gn)| -alpha * gs + (1.0 - alpha) * gn)
        .collect();
    Ok((loss, grad))
}

/// Weighted SDR loss in `[-1, 1]`:
/// `alpha * -cos(clean, enhanced) + (1 - alpha) * -cos(noise, noise_est)`
/// with `noise = noisy - clean`, `noise_est = noisy - enhanced` and
/// `alpha = |clean|^2 / (|clean|^2 + |noise|^2)`.
pub fn wsdr_loss(noisy: &Waveform, clean: &Waveform, enhanced: &Waveform) -> Result<f64> {
    Ok(wsdr_and_grad(noisy.samples(), clean.samples(), enhanced.samples())?.0)
}

fn l1_and_sign(a: &Array2<f64>, b: &Array2<f64>) -> (f64, Array2<f64>) {
    let n = a.len().max(1) as f64;
    let mut total = 0.0;
    let sign = Zip::from(a).and(b).map_collect(|&x, &y| {
        let d = x - y;
        total += d.abs();
        if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        }
    });
    (total / n, sign)
}

/// Mean absolute difference of two (compressed) magnitude spectra.
pub fn mag_l1_loss(enhanced_c: &MagnitudeSpectrum, clean_c: &MagnitudeSpectrum) -> Result<f64> {
    if enhanced_c.dim() != clean_c.dim() {
        return Err(Error::ShapeMismatch {
            context: "mag_l1_loss",
            expected: clean_c.dim(),
            actual: enhanced_c.dim(),
        });
    }
    Ok(l1_and_sign(enhanced_c.values(), clean_c.values()).0)
}

/// Magnitude L1 after passing both spectrograms through `STFT(iSTFT(.))`.
pub fn cs_mag_l1_loss(enhanced: &Spectrogram, clean: &Spectrogram) -> Result<f64> {
    if enhanced.config() != clean.config() || enhanced.dim() != clean.dim() {
        return Err(Error::ShapeMismatch {
            context: "cs_mag_l1_loss",
            expected: clean.dim(),
            actual: enhanced.dim(),
        });
    }
    let engine = StftEngine::new(*enhanced.config())?;
    let pe = engine.consistency_project(enhanced)?;
    let pc = engine.consistency_project(clean)?;
    mag_l1_loss(
        &dsp::compress(&pe.magnitude())?,
        &dsp::compress(&pc.magnitude())?,
    )
}

/// Everything about one noisy/clean pair that does not depend on the mask.
#[derive(Debug)]
pub struct LossContext<'a> {
    engine: &'a StftEngine,
    noisy: Vec<f64>,
    clean: Vec<f64>,
    noisy_mag: Array2<f64>,
    phasor: Array2<Complex64>,
    clean_mag_c: Array2<f64>,
    clean_proj_mag_c: Array2<f64>,
    domain: MaskDomain,
}

struct Forward {
    enhanced_mag: Array2<f64>,
    enhanced: Vec<f64>,
    projected: Array2<Complex64>,
}

impl<'a> LossContext<'a> {
    pub fn new(
        engine: &'a StftEngine,
        noisy: &Waveform,
        clean: &Waveform,
        domain: MaskDomain,
    ) -> Result<Self> {
        if noisy.len() != clean.len() {
            return Err(Error::LengthMismatch {
                context: "noisy/clean pair",
                left: noisy.len(),
                right: clean.len(),
            });
        }
        if noisy.sample_rate() != clean.sample_rate() {
            return Err(Error::SampleRateMismatch {
                left: noisy.sample_rate(),
                right: clean.sample_rate(),
            });
        }
        if noisy.energy() == 0.0 && clean.energy() == 0.0 {
            return Err(Error::Degenerate("noisy and clean are both silent".into()));
        }
        let noisy_spec = engine.analyze(noisy.samples())?;
        let clean_spec = engine.analyze(clean.samples())?;
        let clean_proj = engine.analyze(&engine.synthesize(&clean_spec, clean.len())?)?;
        let noisy_mag = noisy_spec.mapv(|c| c.norm());
        let phasor = noisy_spec.mapv(|c| {
            let r = c.norm();
            if r == 0.0 {
                Complex64::new(1.0, 0.0)
            } else {
                c / r
            }
        });
        Ok(Self {
            engine,
            noisy: noisy.samples().to_vec(),
            clean: clean.samples().to_vec(),
            noisy_mag,
            phasor,
            clean_mag_c: clean_spec.mapv(|c| c.norm().ln_1p()),
            clean_proj_mag_c: clean_proj.mapv(|c| c.norm().ln_1p()),
            domain,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.noisy_mag.nrows()
    }

    pub fn n_bins(&self) -> usize {
        self.noisy_mag.ncols()
    }

    pub fn noisy_magnitude(&self) -> &Array2<f64> {
        &self.noisy_mag
    }

    fn check_mask(&self, mask: &Array2<f64>) -> Result<()> {
        if mask.dim() != self.noisy_mag.dim() {
            return Err(Error::ShapeMismatch {
                context: "mask vs noisy spectrogram",
                expected: self.noisy_mag.dim(),
                actual: mask.dim(),
            });
        }
        Ok(())
    }

    fn forward(&self, mask: &Array2<f64>) -> Result<Forward> {
        self.check_mask(mask)?;
        let domain = self.domain;
        let enhanced_mag = Zip::from(mask)
            .and(&self.noisy_mag)
            .map_collect(|&m, &y| domain.apply(m, y));
        let bins = Zip::from(&enhanced_mag)
            .and(&self.phasor)
            .map_collect(|&e, &u| u * e);
        let enhanced = self.engine.synthesize(&bins, self.noisy.len())?;
        let projected = self.engine.analyze(&enhanced)?;
        Ok(Forward {
            enhanced_mag,
            enhanced,
            projected,
        })
    }

    /// Enhanced waveform for a mask.
    pub fn enhanced(&self, mask: &Array2<f64>) -> Result<Vec<f64>> {
        Ok(self.forward(mask)?.enhanced)
    }

    pub fn evaluate(&self, mask: &Array2<f64>, weights: LossWeights) -> Result<LossBreakdown> {
        let fwd = self.forward(mask)?;
        let (wsdr, _) = wsdr_and_grad(&self.noisy, &self.clean, &fwd.enhanced)?;
        let (mag_l1, _) = l1_and_sign(&fwd.enhanced_mag.mapv(f64::ln_1p), &self.clean_mag_c);
        let (cs, _) = l1_and_sign(
            &fwd.projected.mapv(|c| c.norm().ln_1p()),
            &self.clean_proj_mag_c,
        );
        Ok(LossBreakdown::new(wsdr, mag_l1, cs, weights))
    }

    /// Loss breakdown and `d total / d mask`.
    pub fn gradient(
        &self,
        mask: &Array2<f64>,
        weights: LossWeights,
    ) -> Result<(LossBreakdown, Array2<f64>)> {
        let fwd = self.forward(mask)?;

        let (wsdr, wsdr_grad) = wsdr_and_grad(&self.noisy, &self.clean, &fwd.enhanced)?;

        let enhanced_c = fwd.enhanced_mag.mapv(f64::ln_1p);
        let (mag_l1, mag_sign) = l1_and_sign(&enhanced_c, &self.clean_mag_c);

        let projected_mag = fwd.projected.mapv(|c| c.norm());
        let (cs, cs_sign) = l1_and_sign(&projected_mag.mapv(f64::ln_1p), &self.clean_proj_mag_c);

        let breakdown = LossBreakdown::new(wsdr, mag_l1, cs, weights);

        // Gradient with respect to the enhanced waveform.
        let mut wave_grad: Vec<f64> = wsdr_grad.iter().map(|g| weights.wsdr * g).collect();
        if weights.cs_mag_l1 != 0.0 {
            let grad_proj = Zip::from(&fwd.projected)
                .and(&projected_mag)
                .and(&cs_sign)
                .map_collect(|&z, &r, &s| {
                    if r == 0.0 || s == 0.0 {
                        Complex64::default()
                    } else {
                        z * (weights.cs_mag_l1 * s / ((1.0 + r) * r))
                    }
                });
            let back = self.engine.analyze_adjoint(&grad_proj, self.noisy.len())?;
            for (w, b) in wave_grad.iter_mut().zip(back) {
                *w += b;
            }
        }
        let grad_bins = self.engine.synthesize_adjoint(&wave_grad, self.n_frames())?;

        let domain = self.domain;
        let mut grad = Array2::zeros(mask.dim());
        Zip::from(&mut grad)
            .and(&grad_bins)
            .and(&self.phasor)
            .and(&fwd.enhanced_mag)
            .and(&mag_sign)
            .for_each(|g, &gb, &u, &e, &s| {
                // dL/dE from the waveform branches plus the direct L1 term.
                *g = (u.conj() * gb).re + weights.mag_l1 * s / (1.0 + e);
            });
        Zip::from(&mut grad)
            .and(mask)
            .and(&self.noisy_mag)
            .for_each(|g, &m, &y| *g *= domain.derivative(m, y));
        Ok((breakdown, grad))
    }
}

/// Evaluates all three losses for `mask` applied to the noisy pair.
pub fn combined_loss(
    noisy: &Waveform,
    clean: &Waveform,
    mask: &MaskEstimate,
    weights: LossWeights,
    cfg: &StftConfig,
) -> Result<LossBreakdown> {
    weights.validate()?;
    let engine = StftEngine::new(*cfg)?;
    LossContext::new(&engine, noisy, clean, MaskDomain::Linear)?.evaluate(mask.values(), weights)
}

/// `d total / d mask`, same shape as the mask.
pub fn loss_gradient(
    noisy: &Waveform,
    clean: &Waveform,
    mask: &MaskEstimate,
    weights: LossWeights,
    cfg: &StftConfig,
) -> Result<Array2<f64>> {
    weights.validate()?;
    let engine = StftEngine::new(*cfg)?;
    let ctx = LossContext::new(&engine, noisy, clean, MaskDomain::Linear)?;
    Ok(ctx.gradient(mask.values(), weights)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::stft;
    use crate::masking::{apply_mask, irm_oracle};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn wave(v: Vec<f64>) -> Waveform {
        Waveform::new(v, 16000).unwrap()
    }

    /// Direct transcription of the wSDR formula.
    fn wsdr_oracle(y: &[f64], s: &[f64], e: &[f64]) -> f64 {
        let n = y.len();
        let mut ss = 0.0;
        let mut ee = 0.0;
        let mut se = 0.0;
        let mut zz = 0.0;
        let mut zh = 0.0;
        let mut hh = 0.0;
        for i in 0..n {
            let z = y[i] - s[i];
            let h = y[i] - e[i];
            ss += s[i] * s[i];
            ee += e[i] * e[i];
            se += s[i] * e[i];
            zz += z * z;
            zh += z * h;
            hh += h * h;
        }
        let a = ss / (ss + zz);
        a * -(se / (ss.sqrt() * ee.sqrt())) + (1.0 - a) * -(zh / (zz.sqrt() * hh.sqrt()))
    }

    fn tone_noise_pair(len: usize, seed: u64) -> (Waveform, Waveform) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clean: Vec<f64> = (0..len)
            .map(|n| 0.3 * (2.0 * PI * 440.0 * n as f64 / 16000.0).sin())
            .collect();
        let noisy = clean
            .iter()
            .map(|c| c + 0.2 * rng.random_range(-1.0..1.0))
            .collect();
        (wave(noisy), wave(clean))
    }

    #[test]
    fn wsdr_perfect_estimate_is_minus_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let y = wave(rand_vec(&mut rng, 333));
            let s = wave(rand_vec(&mut rng, 333));
            assert_eq!(wsdr_loss(&y, &s, &s).unwrap(), -1.0);
        }
        let s = wave(rand_vec(&mut rng, 64));
        assert_eq!(wsdr_loss(&s, &s, &s).unwrap(), -1.0);
    }

    #[test]
    fn wsdr_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let y = rand_vec(&mut rng, 64);
            let s = rand_vec(&mut rng, 64);
            let e = rand_vec(&mut rng, 64);
            let got = wsdr_loss(&wave(y.clone()), &wave(s.clone()), &wave(e.clone())).unwrap();
            assert!((got - wsdr_oracle(&y, &s, &e)).abs() < 1e-10);
            assert!((-1.0..=1.0).contains(&got));
        }
    }

    #[test]
    fn wsdr_degenerate_inputs() {
        let z = wave(vec![0.0; 16]);
        assert!(matches!(wsdr_loss(&z, &z, &z), Err(Error::Degenerate(_))));
        // Silent clean: only the noise term remains.
        let y = wave((0..16).map(|i| (i as f64).sin()).collect());
        let l = wsdr_loss(&y, &z, &z).unwrap();
        assert_eq!(l, -1.0);
        assert!(wsdr_loss(&y, &z, &wave(vec![0.0; 15])).is_err());
    }

    #[test]
    fn wsdr_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = rand_vec(&mut rng, 40);
        let s = rand_vec(&mut rng, 40);
        let e = rand_vec(&mut rng, 40);
        let (_, g) = wsdr_and_grad(&y, &s, &e).unwrap();
        let h = 1e-6;
        for i in 0..40 {
            let mut ep = e.clone();
            ep[i] += h;
            let mut em = e.clone();
            em[i] -= h;
            let fd = (wsdr_and_grad(&y, &s, &ep).unwrap().0 - wsdr_and_grad(&y, &s, &em).unwrap().0)
                / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-7, "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn mag_l1_cases() {
        let a = MagnitudeSpectrum::new(Array2::from_elem((3, 4), 1.0));
        let b = MagnitudeSpectrum::new(Array2::from_elem((3, 4), 1.5));
        assert_eq!(mag_l1_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(mag_l1_loss(&b, &a).unwrap(), 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Array2<f64> = Array2::from_shape_fn((5, 7), |_| rng.random_range(0.0..3.0));
        let b: Array2<f64> = Array2::from_shape_fn((5, 7), |_| rng.random_range(0.0..3.0));
        let mut acc = 0.0f64;
        for i in 0..5 {
            for j in 0..7 {
                acc += (a[[i, j]] - b[[i, j]]).abs();
            }
        }
        let got = mag_l1_loss(&MagnitudeSpectrum::new(a), &MagnitudeSpectrum::new(b)).unwrap();
        assert!((got - acc / 35.0).abs() < 1e-12);
        let c = MagnitudeSpectrum::new(Array2::zeros((5, 6)));
        assert!(mag_l1_loss(&c, &a_like()).is_err());
        fn a_like() -> MagnitudeSpectrum {
            MagnitudeSpectrum::new(Array2::zeros((5, 7)))
        }
    }

    #[test]
    fn cs_mag_l1_on_consistent_and_identical_inputs() {
        let cfg = StftConfig::default();
        let (noisy, clean) = tone_noise_pair(3200, 5);
        let a = stft(&noisy, &cfg).unwrap();
        let b = stft(&clean, &cfg).unwrap();
        let plain = mag_l1_loss(
            &dsp::compress(&a.magnitude()).unwrap(),
            &dsp::compress(&b.magnitude()).unwrap(),
        )
        .unwrap();
        let cs = cs_mag_l1_loss(&a, &b).unwrap();
        assert!((plain - cs).abs() < 1e-6);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let bins = Array2::from_shape_fn(a.dim(), |_| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        let r = a.with_bins(bins).unwrap();
        assert_eq!(cs_mag_l1_loss(&r, &r).unwrap(), 0.0);
    }

    #[test]
    fn masked_spectrum_is_inconsistent() {
        let cfg = StftConfig::default();
        let (noisy, clean) = tone_noise_pair(3200, 7);
        let ns = stft(&noisy, &cfg).unwrap();
        let cs = stft(&clean, &cfg).unwrap();
        let mask = irm_oracle(&cs.magnitude(), &ns.magnitude()).unwrap();
        let em = apply_mask(&ns.magnitude(), &mask).unwrap();
        let es = dsp::recompose(&em, &ns.phase(), &ns).unwrap();
        let plain = mag_l1_loss(
            &dsp::compress(&em).unwrap(),
            &dsp::compress(&cs.magnitude()).unwrap(),
        )
        .unwrap();
        let consistent = cs_mag_l1_loss(&es, &cs).unwrap();
        assert!((plain - consistent).abs() > 1e-4, "{plain} vs {consistent}");
    }

    #[test]
    fn combined_breakdown() {
        let cfg = StftConfig::default();
        let (_, clean) = tone_noise_pair(3200, 8);
        let s = stft(&clean, &cfg).unwrap();
        let mask = irm_oracle(&s.magnitude(), &s.magnitude()).unwrap();
        let w = LossWeights::new(0.5, 2.0, 3.0);
        let b = combined_loss(&clean, &clean, &mask, w, &cfg).unwrap();
        assert!((b.wsdr + 1.0).abs() < 1e-9);
        assert!(b.mag_l1.abs() < 1e-9);
        assert!(b.cs_mag_l1.abs() < 1e-9);
        assert!((b.total + 0.5).abs() < 1e-9);

        let (noisy, clean) = tone_noise_pair(3200, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (t, f) = stft(&noisy, &cfg).unwrap().dim();
        let mask = MaskEstimate::new(Array2::from_shape_fn((t, f), |_| rng.random_range(0.0..1.0))).unwrap();
        let only = combined_loss(&noisy, &clean, &mask, LossWeights::new(1.0, 0.0, 0.0), &cfg).unwrap();
        assert_eq!(only.total, only.wsdr);

        // Each component agrees with its standalone definition.
        let ns = stft(&noisy, &cfg).unwrap();
        let em = apply_mask(&ns.magnitude(), &mask).unwrap();
        let es = dsp::recompose(&em, &ns.phase(), &ns).unwrap();
        let enhanced = dsp::istft(&es).unwrap();
        let cs = stft(&clean, &cfg).unwrap();
        let b = combined_loss(&noisy, &clean, &mask, LossWeights::default(), &cfg).unwrap();
        assert!((b.wsdr - wsdr_loss(&noisy, &clean, &enhanced).unwrap()).abs() < 1e-12);
        let ml1 = mag_l1_loss(&dsp::compress(&em).unwrap(), &dsp::compress(&cs.magnitude()).unwrap()).unwrap();
        assert!((b.mag_l1 - ml1).abs() < 1e-12);
        assert!((b.cs_mag_l1 - cs_mag_l1_loss(&es, &cs).unwrap()).abs() < 1e-9);
        assert!((b.total - (b.wsdr + b.mag_l1 + b.cs_mag_l1)).abs() < 1e-15);
    }

    #[test]
    fn zero_weights_give_zero_gradient() {
        let cfg = StftConfig::default();
        let (noisy, clean) = tone_noise_pair(1600, 11);
        let (t, f) = stft(&noisy, &cfg).unwrap().dim();
        let mask = MaskEstimate::constant(t, f, 0.4).unwrap();
        let g = loss_gradient(&noisy, &clean, &mask, LossWeights::new(0.0, 0.0, 0.0), &cfg).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mag_l1_gradient_vanishes_at_clean() {
        let cfg = StftConfig::default();
        let (noisy, clean) = tone_noise_pair(1600, 12);
        let ns = stft(&noisy, &cfg).unwrap();
        let cs = stft(&clean, &cfg).unwrap();
        // Mask that reproduces the clean magnitude exactly wherever possible.
        let mask = irm_oracle(&cs.magnitude(), &ns.magnitude()).unwrap();
        let engine = StftEngine::new(cfg).unwrap();
        let ctx = LossContext::new(&engine, &noisy, &clean, MaskDomain::Linear).unwrap();
        let (_, g) = ctx.gradient(mask.values(), LossWeights::new(0.0, 1.0, 0.0)).unwrap();
        let em = apply_mask(&ns.magnitude(), &mask).unwrap();
        for ((idx, &gv), &e) in g.indexed_iter().zip(em.values()) {
            if (e - cs.magnitude().values()[idx]).abs() == 0.0 {
                assert_eq!(gv, 0.0);
            }
        }
        let exact = g.iter().filter(|v| **v == 0.0).count();
        assert!(exact > g.len() / 2);
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
    }

    #[test]
    fn mask_gradient_matches_finite_differences() {
        let cfg = StftConfig::default();
        let (noisy, clean) = tone_noise_pair(1600, 13);
        let engine = StftEngine::new(cfg).unwrap();
        for domain in [MaskDomain::Linear, MaskDomain::Compressed] {
            let ctx = LossContext::new(&engine, &noisy, &clean, domain).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(14);
            let mask = Array2::from_shape_fn((ctx.n_frames(), ctx.n_bins()), |_| {
                rng.random_range(0.1..0.9)
            });
            let w = LossWeights::new(1.0, 0.7, 1.3);
            let (_, g) = ctx.gradient(&mask, w).unwrap();
            let h = 1e-5;
            for _ in 0..40 {
                let t = rng.random_range(0..ctx.n_frames());
                let k = rng.random_range(0..ctx.n_bins());
                let mut mp = mask.clone();
                mp[[t, k]] += h;
                let mut mm = mask.clone();
                mm[[t, k]] -= h;
                let fd = (ctx.evaluate(&mp, w).unwrap().total - ctx.evaluate(&mm, w).unwrap().total)
                    / (2.0 * h);
                assert!(rel_err(g[[t, k]], fd) < 1e-4, "{domain:?} ({t},{k}): {} vs {fd}", g[[t, k]]);
            }
        }
    }

    #[test]
    fn hop_shift_preserves_interior_loss() {
        let cfg = StftConfig::default();
        let (noisy, clean) = tone_noise_pair(4800, 15);
        let hop = cfg.hop;
        let shift = |w: &Waveform| {
            let mut v = vec![0.0; hop];
            v.extend_from_slice(&w.samples()[..w.len() - hop]);
            wave(v)
        };
        let interior = |n: &Waveform, c: &Waveform, lo: usize, hi: usize| {
            let a = dsp::compress(&stft(n, &cfg).unwrap().magnitude()).unwrap();
            let b = dsp::compress(&stft(c, &cfg).unwrap().magnitude()).unwrap();
            let a = MagnitudeSpectrum::new(a.values().slice(ndarray::s![lo..hi, ..]).to_owned());
            let b = MagnitudeSpectrum::new(b.values().slice(ndarray::s![lo..hi, ..]).to_owned());
            mag_l1_loss(&a, &b).unwrap()
        };
        let base = interior(&noisy, &clean, 3, 20);
        let moved = interior(&shift(&noisy), &shift(&clean), 4, 21);
        assert!((base - moved).abs() < 1e-6, "{base} vs {moved}");
    }
}
