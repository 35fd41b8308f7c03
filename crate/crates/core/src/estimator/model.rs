//! Feedforward mask head: ReLU hidden layers and a sigmoid output per bin,
//! with hand-written reverse-mode gradients.

use ndarray::{Array1, Array2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::{assemble_features, feature_dim, FeatureFrames};
use crate::dsp::MagnitudeSpectrum;
use crate::error::{Error, Result};
use crate::masking::{MaskDomain, MaskEstimate, MaskModel};

/// Sigmoid outputs are kept strictly inside `(0, 1)`.
const MASK_FLOOR: f64 = 1e-15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub n_bins: usize,
    /// Neighbour frames stacked on each side of the current frame.
    pub context: usize,
    /// Width of the optional external per-frame features; 0 when unused.
    #[serde(default)]
    pub ext_dim: usize,
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub mask_domain: MaskDomain,
    pub sample_rate: u32,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            n_bins: 201,
            context: 2,
            ext_dim: 0,
            hidden: vec![256, 256],
            mask_domain: MaskDomain::Linear,
            sample_rate: 16000,
        }
    }
}

impl Architecture {
    pub fn input_dim(&self) -> usize {
        feature_dim(self.n_bins, self.ext_dim, self.context)
    }

    /// `(fan_in, fan_out)` of every dense layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim()];
        dims.extend(&self.hidden);
        dims.push(self.n_bins);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn n_params(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_bins == 0 {
            return Err(Error::InvalidTrainConfig("n_bins must be positive".into()));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidTrainConfig(
                "hidden layer widths must be positive".into(),
            ));
        }
        if self.sample_rate == 0 {
            return Err(Error::InvalidTrainConfig("sample_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `fan_in x fan_out`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// The trainable mask estimator.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorModel {
    arch: Architecture,
    layers: Vec<Dense>,
    seed: u64,
}

/// Parameter gradients, laid out like the model's layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(model: &EstimatorModel) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| Dense {
                    weight: Array2::zeros(l.weight.dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weight *= factor;
            l.bias *= factor;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }
}

fn flatten_layers(layers: &[Dense]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend(l.weight.iter());
        out.extend(l.bias.iter());
    }
    out
}

/// Activations kept from the forward pass for backpropagation.
#[derive(Debug)]
pub struct ForwardCache {
    /// Pre-activations of every layer.
    pre: Vec<Array2<f64>>,
    /// Layer inputs: features, then each hidden activation.
    inputs: Vec<Array2<f64>>,
    mask: Array2<f64>,
}

impl ForwardCache {
    pub fn mask(&self) -> &Array2<f64> {
        &self.mask
    }
}

fn sigmoid(z: f64) -> f64 {
    let s = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    s.clamp(MASK_FLOOR, 1.0 - MASK_FLOOR)
}

impl EstimatorModel {
    /// Xavier-uniform weights and zero biases from a seeded generator.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = arch
            .layer_shapes()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Dense {
                    weight: Array2::from_shape_simple_fn((fan_in, fan_out), || {
                        rng.random_range(-limit..limit)
                    }),
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(Self { arch, layers, seed })
    }

    /// Builds a model from explicit layers, checking shapes against `arch`.
    pub fn from_layers(arch: Architecture, layers: Vec<Dense>, seed: u64) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.layer_shapes();
        if shapes.len() != layers.len() {
            return Err(Error::Dimension {
                context: "layer count",
                expected: shapes.len(),
                actual: layers.len(),
            });
        }
        for ((fan_in, fan_out), l) in shapes.iter().zip(&layers) {
            if l.weight.dim() != (*fan_in, *fan_out) || l.bias.len() != *fan_out {
                return Err(Error::ShapeMismatch {
                    context: "layer weights",
                    expected: (*fan_in, *fan_out),
                    actual: l.weight.dim(),
                });
            }
        }
        Ok(Self { arch, layers, seed })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_params(&self) -> usize {
        self.arch.n_params()
    }

    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.n_params() {
            return Err(Error::Dimension {
                context: "flat parameter vector",
                expected: self.n_params(),
                actual: values.len(),
            });
        }
        let mut it = values.iter().copied();
        for l in &mut self.layers {
            l.weight.iter_mut().for_each(|w| *w = it.next().unwrap());
            l.bias.iter_mut().for_each(|b| *b = it.next().unwrap());
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    fn check_input(&self, frames: &FeatureFrames) -> Result<()> {
        if frames.dim() != self.arch.input_dim() {
            return Err(Error::Dimension {
                context: "estimator input",
                expected: self.arch.input_dim(),
                actual: frames.dim(),
            });
        }
        Ok(())
    }

    pub fn forward_cached(&self, frames: &FeatureFrames) -> Result<ForwardCache> {
        self.check_input(frames)?;
        let n_layers = self.layers.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers);
        let mut act = frames.values().clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = act.dot(&layer.weight);
            z += &layer.bias;
            inputs.push(act);
            act = if i + 1 == n_layers {
                z.mapv(sigmoid)
            } else {
                z.mapv(|v| v.max(0.0))
            };
            pre.push(z);
        }
        Ok(ForwardCache {
            pre,
            inputs,
            mask: act,
        })
    }

    pub fn forward(&self, frames: &FeatureFrames) -> Result<MaskEstimate> {
        MaskEstimate::new(self.forward_cached(frames)?.mask)
    }

    /// Reverse-mode gradients for an upstream gradient with respect to the
    /// mask.
    pub fn backward(&self, cache: &ForwardCache, upstream: &Array2<f64>) -> Result<Gradients> {
        if upstream.dim() != cache.mask.dim() {
            return Err(Error::ShapeMismatch {
                context: "upstream mask gradient",
                expected: cache.mask.dim(),
                actual: upstream.dim(),
            });
        }
        let n_layers = self.layers.len();
        let mut grads = Vec::with_capacity(n_layers);
        let mut delta = Zip::from(upstream)
            .and(&cache.mask)
            .map_collect(|&g, &m| g * m * (1.0 - m));
        for i in (0..n_layers).rev() {
            let layer = &self.layers[i];
            let input = &cache.inputs[i];
            let weight = input.t().dot(&delta);
            let bias = delta.sum_axis(Axis(0));
            if i > 0 {
                let mut back = delta.dot(&layer.weight.t());
                Zip::from(&mut back)
                    .and(&cache.pre[i - 1])
                    .for_each(|b, &z| {
                        if z <= 0.0 {
                            *b = 0.0;
                        }
                    });
                delta = back;
            }
            grads.push(Dense { weight, bias });
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }

    pub fn backward_from(
        &self,
        frames: &FeatureFrames,
        upstream: &Array2<f64>,
    ) -> Result<Gradients> {
        let cache = self.forward_cached(frames)?;
        self.backward(&cache, upstream)
    }

    pub fn features(
        &self,
        noisy_compressed: &MagnitudeSpectrum,
        external: Option<&Array2<f64>>,
    ) -> Result<FeatureFrames> {
        let ext_width = external.map_or(0, |e| e.ncols());
        if ext_width != self.arch.ext_dim {
            return Err(Error::Dimension {
                context: "external feature width",
                expected: self.arch.ext_dim,
                actual: ext_width,
            });
        }
        assemble_features(noisy_compressed, external, self.arch.context)
    }
}

impl MaskModel for EstimatorModel {
    fn predict(
        &self,
        noisy_compressed: &MagnitudeSpectrum,
        external: Option<&Array2<f64>>,
    ) -> Result<MaskEstimate> {
        let frames = self.features(noisy_compressed, external)?;
        self.forward(&frames)
    }

    fn mask_domain(&self) -> MaskDomain {
        self.arch.mask_domain
    }

    fn sample_rate(&self) -> Option<u32> {
        Some(self.arch.sample_rate)
    }
}
