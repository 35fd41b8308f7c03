//! Mini-batch training of the mask estimator.
//!
//! Each utterance is processed on its own (no padding), gradients are
//! averaged over the batch in a fixed order, and Adam takes one step per
//! batch. Batch items run in parallel but results are reduced sequentially,
//! so a fixed seed gives bit-identical runs.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::io::{model_from_flat, Container};
use super::model::{EstimatorModel, Gradients};
use crate::dsp::{StftConfig, StftEngine, Waveform};
use crate::error::{Error, Result};
use crate::losses::{LossBreakdown, LossContext, LossWeights};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Utterances per optimizer step.
    pub batch_size: usize,
    /// Longer utterances are cut to this many seconds.
    pub max_seconds: f64,
    pub seed: u64,
    /// Share of the dataset held out for best-checkpoint selection.
    pub valid_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 4,
            max_seconds: 10.0,
            seed: 0,
            valid_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidTrainConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning_rate must be >= 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)".into());
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive".into());
        }
        if !(self.max_seconds > 0.0) {
            return bad("max_seconds must be positive".into());
        }
        if !(0.0..1.0).contains(&self.valid_fraction) {
            return bad("valid_fraction must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// One noisy/clean training pair held in memory.
#[derive(Clone, Debug)]
pub struct TrainPair {
    pub id: String,
    pub noisy: Waveform,
    pub clean: Waveform,
    pub ext: Option<Array2<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub valid: Option<LossBreakdown>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

impl TrainingLog {
    pub const EPOCH_HEADER: &'static str = "epoch,train_wsdr,train_mag_l1,train_cs_mag_l1,train_total,valid_wsdr,valid_mag_l1,valid_cs_mag_l1,valid_total";
    pub const STEP_HEADER: &'static str = "epoch,step,wsdr,mag_l1,cs_mag_l1,total";

    pub fn epoch_row(r: &EpochRecord) -> String {
        let t = &r.train;
        let mut row = format!(
            "{},{},{},{},{}",
            r.epoch, t.wsdr, t.mag_l1, t.cs_mag_l1, t.total
        );
        match &r.valid {
            Some(v) => write!(row, ",{},{},{},{}", v.wsdr, v.mag_l1, v.cs_mag_l1, v.total).unwrap(),
            None => row.push_str(",,,,"),
        }
        row
    }

    pub fn step_row(r: &StepRecord) -> String {
        let l = &r.loss;
        format!(
            "{},{},{},{},{},{}",
            r.epoch, r.step, l.wsdr, l.mag_l1, l.cs_mag_l1, l.total
        )
    }

    pub fn epochs_csv(&self) -> String {
        let mut out = String::from(Self::EPOCH_HEADER);
        out.push('\n');
        for r in &self.epochs {
            out.push_str(&Self::epoch_row(r));
            out.push('\n');
        }
        out
    }

    pub fn steps_csv(&self) -> String {
        let mut out = String::from(Self::STEP_HEADER);
        out.push('\n');
        for r in &self.steps {
            out.push_str(&Self::step_row(r));
            out.push('\n');
        }
        out
    }
}

/// The best model seen so far, by validation (or training) total loss.
#[derive(Clone, Debug, PartialEq)]
pub struct BestModel {
    pub epoch: usize,
    pub loss: f64,
    pub model: EstimatorModel,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: EstimatorModel,
    pub optimizer: Adam,
    pub next_epoch: usize,
    pub best: Option<BestModel>,
    pub log: TrainingLog,
}

impl TrainState {
    pub fn new(model: EstimatorModel, cfg: &TrainConfig) -> Self {
        let optimizer = Adam::new(cfg.adam(), model.n_params());
        Self {
            model,
            optimizer,
            next_epoch: 0,
            best: None,
            log: TrainingLog::default(),
        }
    }

    /// Best model if one was recorded, otherwise the current one.
    pub fn best_model(&self) -> &EstimatorModel {
        self.best.as_ref().map_or(&self.model, |b| &b.model)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    next_epoch: usize,
    adam: AdamConfig,
    adam_step: u64,
    best_epoch: Option<usize>,
    best_loss: Option<f64>,
    log: TrainingLog,
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let meta = CheckpointMeta {
        next_epoch: state.next_epoch,
        adam: state.optimizer.config,
        adam_step: state.optimizer.step_count(),
        best_epoch: state.best.as_ref().map(|b| b.epoch),
        best_loss: state.best.as_ref().map(|b| b.loss),
        log: state.log.clone(),
    };
    let mut sections = vec![
        ("params".to_string(), state.model.flatten()),
        ("adam_m".to_string(), state.optimizer.first_moment().to_vec()),
        ("adam_v".to_string(), state.optimizer.second_moment().to_vec()),
    ];
    if let Some(best) = &state.best {
        sections.push(("best_params".to_string(), best.model.flatten()));
    }
    Container {
        architecture: state.model.architecture().clone(),
        seed: state.model.seed(),
        extra: Some(serde_json::json!({ "checkpoint": meta })),
        sections,
    }
    .write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let c = Container::read(path)?;
    let meta = c
        .extra
        .as_ref()
        .and_then(|e| e.get("checkpoint"))
        .ok_or_else(|| Error::ModelFile(format!("{} is a model, not a checkpoint", path.display())))?;
    let meta: CheckpointMeta = serde_json::from_value(meta.clone())
        .map_err(|e| Error::ModelFile(format!("bad checkpoint block: {e}")))?;
    let model = model_from_flat(c.architecture.clone(), c.seed, c.section("params")?)?;
    let optimizer = Adam::from_state(
        meta.adam,
        meta.adam_step,
        c.section("adam_m")?.to_vec(),
        c.section("adam_v")?.to_vec(),
    )?;
    let best = match (meta.best_epoch, meta.best_loss) {
        (Some(epoch), Some(loss)) => Some(BestModel {
            epoch,
            loss,
            model: model_from_flat(c.architecture.clone(), c.seed, c.section("best_params")?)?,
        }),
        _ => None,
    };
    Ok(TrainState {
        model,
        optimizer,
        next_epoch: meta.next_epoch,
        best,
        log: meta.log,
    })
}

/// Splits `n` items into (train, valid) index sets with a seeded shuffle.
pub fn split_indices(n: usize, valid_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    if n < 2 || valid_fraction <= 0.0 {
        return (idx, Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
    idx.shuffle(&mut rng);
    let n_valid = ((n as f64 * valid_fraction).round() as usize).clamp(1, n - 1);
    let valid = idx.split_off(n - n_valid);
    (idx, valid)
}

fn epoch_order(train: &[usize], seed: u64, epoch: usize) -> Vec<usize> {
    let mut order = train.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(epoch as u64 + 1)));
    order.shuffle(&mut rng);
    order
}

pub struct Trainer {
    cfg: TrainConfig,
    weights: LossWeights,
    engine: StftEngine,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, weights: LossWeights, stft: StftConfig) -> Result<Self> {
        cfg.validate()?;
        weights.validate()?;
        Ok(Self {
            cfg,
            weights,
            engine: StftEngine::new(stft)?,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn engine(&self) -> &StftEngine {
        &self.engine
    }

    /// Crops a pair to `max_seconds`.
    fn cropped(&self, pair: &TrainPair) -> Result<TrainPair> {
        if pair.noisy.len() != pair.clean.len() {
            return Err(Error::LengthMismatch {
                context: "noisy/clean pair",
                left: pair.noisy.len(),
                right: pair.clean.len(),
            });
        }
        let max_len = (self.cfg.max_seconds * pair.noisy.sample_rate() as f64).round() as usize;
        if pair.noisy.len() <= max_len {
            return Ok(pair.clone());
        }
        let cut = |w: &Waveform| Waveform::new(w.samples()[..max_len].to_vec(), w.sample_rate());
        let frames = self.engine.config().n_frames(max_len);
        Ok(TrainPair {
            id: pair.id.clone(),
            noisy: cut(&pair.noisy)?,
            clean: cut(&pair.clean)?,
            ext: pair
                .ext
                .as_ref()
                .map(|e| e.slice(ndarray::s![..frames.min(e.nrows()), ..]).to_owned()),
        })
    }

    fn context<'a>(&'a self, model: &EstimatorModel, pair: &TrainPair) -> Result<LossContext<'a>> {
        LossContext::new(
            &self.engine,
            &pair.noisy,
            &pair.clean,
            model.architecture().mask_domain,
        )
    }

    fn features(
        &self,
        model: &EstimatorModel,
        ctx: &LossContext<'_>,
        pair: &TrainPair,
    ) -> Result<super::features::FeatureFrames> {
        let compressed = crate::dsp::MagnitudeSpectrum::new(ctx.noisy_magnitude().mapv(f64::ln_1p));
        model.features(&compressed, pair.ext.as_ref())
    }

    /// Loss of the model on one pair.
    pub fn pair_loss(&self, model: &EstimatorModel, pair: &TrainPair) -> Result<LossBreakdown> {
        let pair = self.cropped(pair)?;
        let ctx = self.context(model, &pair)?;
        let frames = self.features(model, &ctx, &pair)?;
        let mask = model.forward(&frames)?;
        ctx.evaluate(mask.values(), self.weights)
    }

    /// Loss and parameter gradients of the model on one pair.
    pub fn pair_gradient(
        &self,
        model: &EstimatorModel,
        pair: &TrainPair,
    ) -> Result<(LossBreakdown, Gradients)> {
        let pair = self.cropped(pair)?;
        let ctx = self.context(model, &pair)?;
        let frames = self.features(model, &ctx, &pair)?;
        let cache = model.forward_cached(&frames)?;
        let (loss, mask_grad) = ctx.gradient(cache.mask(), self.weights)?;
        let grads = model.backward(&cache, &mask_grad)?;
        Ok((loss, grads))
    }

    fn batch_gradient(
        &self,
        model: &EstimatorModel,
        data: &[TrainPair],
        batch: &[usize],
    ) -> Result<(LossBreakdown, Gradients)> {
        let results: Vec<Result<(LossBreakdown, Gradients)>> = batch
            .par_iter()
            .map(|&i| self.pair_gradient(model, &data[i]))
            .collect();
        let mut total = Gradients::zeros_like(model);
        let mut losses = Vec::with_capacity(batch.len());
        for (r, &i) in results.into_iter().zip(batch) {
            let (loss, grads) = r.map_err(|e| match e {
                Error::Degenerate(m) => Error::Degenerate(format!("utterance {}: {m}", data[i].id)),
                other => other,
            })?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Diverged {
                    epoch: 0,
                    step: 0,
                    detail: format!("non-finite loss or gradient on utterance {}", data[i].id),
                });
            }
            total.add_assign(&grads);
            losses.push(loss);
        }
        total.scale(1.0 / batch.len() as f64);
        Ok((LossBreakdown::mean(&losses).expect("non-empty batch"), total))
    }

    pub fn mean_loss(
        &self,
        model: &EstimatorModel,
        data: &[TrainPair],
        idx: &[usize],
    ) -> Result<Option<LossBreakdown>> {
        let losses: Vec<LossBreakdown> = idx
            .par_iter()
            .map(|&i| self.pair_loss(model, &data[i]))
            .collect::<Result<_>>()?;
        Ok(LossBreakdown::mean(&losses))
    }

    /// Runs the remaining epochs of `state`. `on_epoch` sees the state after
    /// every completed epoch (for logging or checkpointing).
    pub fn run(
        &self,
        mut state: TrainState,
        data: &[TrainPair],
        mut on_epoch: impl FnMut(&TrainState) -> Result<()>,
    ) -> Result<TrainState> {
        if data.is_empty() {
            return Err(Error::InvalidTrainConfig("training set is empty".into()));
        }
        let (train_idx, valid_idx) = split_indices(data.len(), self.cfg.valid_fraction, self.cfg.seed);
        // A restored optimizer keeps its moments but follows the current config.
        state.optimizer.config = self.cfg.adam();
        for epoch in state.next_epoch..self.cfg.epochs {
            let order = epoch_order(&train_idx, self.cfg.seed, epoch);
            let mut step_losses = Vec::new();
            for batch in order.chunks(self.cfg.batch_size) {
                let (loss, grads) =
                    self.batch_gradient(&state.model, data, batch)
                        .map_err(|e| match e {
                            Error::Diverged { detail, .. } => Error::Diverged {
                                epoch,
                                step: state.optimizer.step_count() as usize,
                                detail,
                            },
                            other => other,
                        })?;
                state.optimizer.step(&mut state.model, &grads)?;
                if !state.model.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        step: state.optimizer.step_count() as usize,
                        detail: "parameters became non-finite".into(),
                    });
                }
                state.log.steps.push(StepRecord {
                    epoch,
                    step: state.optimizer.step_count(),
                    loss,
                });
                step_losses.push(loss);
            }
            let train = LossBreakdown::mean(&step_losses).expect("at least one batch");
            let valid = self.mean_loss(&state.model, data, &valid_idx)?;
            let score = valid.as_ref().unwrap_or(&train).total;
            if state.best.as_ref().is_none_or(|b| score < b.loss) {
                state.best = Some(BestModel {
                    epoch,
                    loss: score,
                    model: state.model.clone(),
                });
            }
            state.log.epochs.push(EpochRecord { epoch, train, valid });
            state.next_epoch = epoch + 1;
            log::info!(
                "epoch {epoch}: train total {:.6}{}",
                train.total,
                valid.map(|v| format!(", valid total {:.6}", v.total)).unwrap_or_default()
            );
            on_epoch(&state)?;
        }
        Ok(state)
    }
}

/// Trains `model` from scratch. Returns the final state; the best model is
/// `state.best_model()`.
pub fn train(
    model: EstimatorModel,
    data: &[TrainPair],
    cfg: &TrainConfig,
    weights: LossWeights,
    stft: &StftConfig,
) -> Result<TrainState> {
    let trainer = Trainer::new(*cfg, weights, *stft)?;
    trainer.run(TrainState::new(model, cfg), data, |_| Ok(()))
}
