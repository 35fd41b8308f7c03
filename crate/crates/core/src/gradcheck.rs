//! Central finite-difference checks of the analytic gradients, used by the
//! `gradcheck` command and the test suites.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dsp::{MagnitudeSpectrum, StftConfig, StftEngine, Waveform};
use crate::error::Result;
use crate::estimator::EstimatorModel;
use crate::losses::{LossContext, LossWeights};
use crate::masking::MaskDomain;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Coordinates sampled per fixture (per layer for the estimator).
    pub coords: usize,
    pub step: f64,
    /// Denominator floor for the relative error. A central difference with
    /// `step = 1e-5` on these losses is only good to a few 1e-10 absolute,
    /// so smaller components cannot be judged relatively.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            coords: 100,
            step: 1e-5,
            floor: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckResult {
    pub name: String,
    pub checked: usize,
    /// Sampled nonzero components whose magnitude was under the floor.
    pub below_floor: usize,
    pub max_rel_err: f64,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl GradCheckResult {
    fn new(name: String) -> Self {
        Self {
            name,
            checked: 0,
            below_floor: 0,
            max_rel_err: 0.0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64, floor: f64) {
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        self.checked += 1;
        let size = analytic.abs().max(numeric.abs());
        if size > 0.0 && size < floor {
            self.below_floor += 1;
        }
        if err > self.max_rel_err || !err.is_finite() {
            self.max_rel_err = if err.is_finite() { err } else { f64::INFINITY };
            self.worst_analytic = analytic;
            self.worst_numeric = numeric;
        }
    }
}

/// Central difference of `f` around zero.
fn central(h: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    Ok((f(h)? - f(-h)?) / (2.0 * h))
}

/// A sine pair in uniform noise; deterministic in `seed`.
pub fn fixture(len: usize, seed: u64, sample_rate: u32) -> Result<(Waveform, Waveform)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f1 = rng.random_range(200.0..1500.0);
    let f2 = rng.random_range(1500.0..4000.0);
    let sr = sample_rate as f64;
    let clean: Vec<f64> = (0..len)
        .map(|n| {
            let t = n as f64 / sr;
            0.3 * (2.0 * std::f64::consts::PI * f1 * t).sin()
                + 0.15 * (2.0 * std::f64::consts::PI * f2 * t + 0.4).sin()
        })
        .collect();
    let noisy = clean
        .iter()
        .map(|c| c + 0.2 * rng.random_range(-1.0..1.0))
        .collect();
    Ok((Waveform::new(noisy, sample_rate)?, Waveform::new(clean, sample_rate)?))
}

/// Mask to total loss: checks dL/dmask through enhancement, synthesis,
/// projection and all three loss terms.
pub fn check_mask_gradient(
    noisy: &Waveform,
    clean: &Waveform,
    stft: &StftConfig,
    domain: MaskDomain,
    weights: LossWeights,
    cfg: &GradCheckConfig,
) -> Result<GradCheckResult> {
    let engine = StftEngine::new(*stft)?;
    let ctx = LossContext::new(&engine, noisy, clean, domain)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mask = Array2::from_shape_simple_fn((ctx.n_frames(), ctx.n_bins()), || {
        rng.random_range(0.05..0.95)
    });
    let (_, grad) = ctx.gradient(&mask, weights)?;
    let mut result = GradCheckResult::new(format!("mask ({})", domain.name()));
    let mut probe = mask.clone();
    for _ in 0..cfg.coords {
        let idx = (rng.random_range(0..ctx.n_frames()), rng.random_range(0..ctx.n_bins()));
        let x = mask[idx];
        let numeric = central(cfg.step, |d| {
            probe[idx] = x + d;
            ctx.evaluate(&probe, weights).map(|b| b.total)
        })?;
        probe[idx] = x;
        result.record(grad[idx], numeric, cfg.floor);
    }
    Ok(result)
}

/// Parameters to total loss, one result per layer.
pub fn check_model_gradient(
    model: &EstimatorModel,
    noisy: &Waveform,
    clean: &Waveform,
    stft: &StftConfig,
    weights: LossWeights,
    cfg: &GradCheckConfig,
) -> Result<Vec<GradCheckResult>> {
    let engine = StftEngine::new(*stft)?;
    let ctx = LossContext::new(&engine, noisy, clean, model.architecture().mask_domain)?;
    let compressed = MagnitudeSpectrum::new(ctx.noisy_magnitude().mapv(f64::ln_1p));
    let frames = model.features(&compressed, None)?;
    let cache = model.forward_cached(&frames)?;
    let (_, mask_grad) = ctx.gradient(cache.mask(), weights)?;
    let grads = model.backward(&cache, &mask_grad)?;
    let loss_of = |m: &EstimatorModel| -> Result<f64> {
        let mask = m.forward(&frames)?;
        Ok(ctx.evaluate(mask.values(), weights)?.total)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probe = model.clone();
    let mut results = Vec::new();
    for (l, layer) in model.layers().iter().enumerate() {
        let mut result = GradCheckResult::new(format!("layer {l}"));
        let (n_in, n_out) = layer.weight.dim();
        let n_layer = n_in * n_out + n_out;
        for _ in 0..cfg.coords {
            let j = rng.random_range(0..n_layer);
            let (analytic, original) = if j < n_in * n_out {
                let idx = (j / n_out, j % n_out);
                (grads.layers[l].weight[idx], layer.weight[idx])
            } else {
                let b = j - n_in * n_out;
                (grads.layers[l].bias[b], layer.bias[b])
            };
            let set = |m: &mut EstimatorModel, v: f64| {
                let d = &mut m.layers_mut()[l];
                if j < n_in * n_out {
                    d.weight[(j / n_out, j % n_out)] = v;
                } else {
                    d.bias[j - n_in * n_out] = v;
                }
            };
            let numeric = central(cfg.step, |d| {
                set(&mut probe, original + d);
                loss_of(&probe)
            })?;
            set(&mut probe, original);
            result.record(analytic, numeric, cfg.floor);
        }
        results.push(result);
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::Architecture;

    #[test]
    fn mask_and_model_gradients_agree() {
        let (noisy, clean) = fixture(2400, 3, 16000).unwrap();
        let stft = StftConfig::default();
        let cfg = GradCheckConfig { coords: 30, ..Default::default() };
        for domain in [MaskDomain::Linear, MaskDomain::Compressed] {
            let r = check_mask_gradient(&noisy, &clean, &stft, domain, LossWeights::default(), &cfg).unwrap();
            assert_eq!(r.checked, 30);
            assert!(r.max_rel_err < 1e-4, "{r:?}");
        }
        let arch = Architecture { context: 1, hidden: vec![16], ..Default::default() };
        let model = EstimatorModel::new(arch, 1).unwrap();
        for r in check_model_gradient(&model, &noisy, &clean, &stft, LossWeights::default(), &cfg).unwrap() {
            assert!(r.max_rel_err < 1e-4, "{r:?}");
        }
    }
}
