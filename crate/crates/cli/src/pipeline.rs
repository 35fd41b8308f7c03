//! Glue shared by the commands: PCS bookkeeping for training data and the
//! inference policy stored alongside trained models.

use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sekit::audio_io::Manifest;
use sekit::estimator::{load_model_with, save_model_with, TrainPair};
use sekit::masking::enhance_with;
use sekit::pcs::{apply_pcs_with, BandImportanceWeights, BandTable, PcsMode};
use sekit::{EstimatorModel, StftConfig, StftEngine, Waveform};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

/// Metadata written into model files next to the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    /// PCS mode of the data the model was trained on.
    pub pcs_mode: String,
    pub bif_sha256: Option<String>,
    /// Per-bin PCS weights, needed to stretch inputs at inference.
    pub pcs_weights: Vec<f64>,
    pub stft: StftConfig,
}

impl ModelMeta {
    pub fn new(mode: PcsMode, table: &BandTable, weights: &BandImportanceWeights, stft: StftConfig) -> Self {
        Self {
            pcs_mode: mode.name().into(),
            bif_sha256: Some(table.sha256.clone()),
            pcs_weights: weights.weights().to_vec(),
            stft,
        }
    }

    pub fn mode(&self) -> CliResult<PcsMode> {
        self.pcs_mode
            .parse()
            .map_err(|e: String| CliError::Runtime(format!("model metadata: {e}")))
    }
}

pub fn save_trained(model: &EstimatorModel, meta: &ModelMeta, path: &Path) -> CliResult<()> {
    let extra = serde_json::json!({ "sekit": meta });
    Ok(save_model_with(model, Some(extra), path)?)
}

/// PCS applied to one pair according to `mode`.
pub fn apply_mode(
    pair: &TrainPair,
    mode: PcsMode,
    weights: &BandImportanceWeights,
    engine: &StftEngine,
) -> sekit::Result<TrainPair> {
    Ok(TrainPair {
        id: pair.id.clone(),
        noisy: if mode.apply_to_input {
            apply_pcs_with(engine, &pair.noisy, weights)?
        } else {
            pair.noisy.clone()
        },
        clean: if mode.apply_to_target {
            apply_pcs_with(engine, &pair.clean, weights)?
        } else {
            pair.clean.clone()
        },
        ext: pair.ext.clone(),
    })
}

/// Reads every pair of a manifest, failing with the list of bad entries.
pub fn read_pairs(manifest: &Manifest, sample_rate: u32) -> CliResult<Vec<TrainPair>> {
    let results: Vec<_> = manifest
        .entries
        .par_iter()
        .map(|e| manifest.read_pair(e, Some(sample_rate)))
        .collect();
    let mut pairs = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (e, r) in manifest.entries.iter().zip(results) {
        match r {
            Ok(p) => pairs.push(p),
            Err(err) => failures.push((e.id.clone(), err.to_string())),
        }
    }
    if failures.is_empty() {
        Ok(pairs)
    } else {
        Err(CliError::partial(manifest.len(), &failures))
    }
}

/// Works out which PCS mode the training data ends up in. A corpus that was
/// already processed by `sekit pcs` is used as is.
pub fn effective_mode(manifest: &Manifest, requested: PcsMode, table: &BandTable) -> CliResult<(PcsMode, PcsMode)> {
    let done = manifest.provenance.pcs_mode;
    if done.is_none() {
        return Ok((requested, requested));
    }
    if let Some(sha) = &manifest.provenance.bif_sha256 {
        if sha != &table.sha256 {
            log::warn!("corpus was stretched with a different band table ({sha})");
        }
    }
    if requested.is_none() || requested == done {
        Ok((done, PcsMode::NONE))
    } else {
        Err(CliError::Config(format!(
            "corpus already has PCS mode `{done}` but pcs.mode is `{requested}`"
        )))
    }
}

/// Loads training pairs with the configured PCS mode applied. Returns the
/// pairs and the mode the model will be trained in.
pub fn training_pairs(
    manifest: &Manifest,
    cfg: &RunConfig,
    mode: PcsMode,
) -> CliResult<(Vec<TrainPair>, PcsMode)> {
    let table = cfg.band_table()?;
    let weights = cfg.pcs_weights()?;
    let (trained_mode, to_apply) = effective_mode(manifest, mode, &table)?;
    let raw = read_pairs(manifest, cfg.audio.sample_rate)?;
    if to_apply.is_none() {
        return Ok((raw, trained_mode));
    }
    let engine = StftEngine::new(cfg.stft)?;
    let processed: Vec<sekit::Result<TrainPair>> = raw
        .par_iter()
        .map(|p| apply_mode(p, to_apply, &weights, &engine))
        .collect();
    let mut pairs = Vec::with_capacity(raw.len());
    let mut failures = Vec::new();
    for (p, r) in raw.iter().zip(processed) {
        match r {
            Ok(p) => pairs.push(p),
            Err(e) => failures.push((p.id.clone(), e.to_string())),
        }
    }
    if !failures.is_empty() {
        return Err(CliError::partial(raw.len(), &failures));
    }
    Ok((pairs, trained_mode))
}

/// A trained model plus the test-time PCS policy: stretch the input only,
/// and only if training inputs were stretched.
pub struct Inference {
    pub model: EstimatorModel,
    pub trained_mode: PcsMode,
    engine: StftEngine,
    input_pcs: Option<BandImportanceWeights>,
}

impl Inference {
    pub fn new(model: EstimatorModel, meta: Option<ModelMeta>, fallback_stft: StftConfig) -> CliResult<Self> {
        let (trained_mode, stft, weights) = match meta {
            Some(m) => (m.mode()?, m.stft, Some(m.pcs_weights)),
            None => (PcsMode::NONE, fallback_stft, None),
        };
        if trained_mode.apply_to_target {
            log::warn!(
                "model was trained on PCS-stretched targets (mode `{trained_mode}`); \
                 its output stays in the stretched domain"
            );
        }
        let input_pcs = match (trained_mode.for_inference().apply_to_input, weights) {
            (true, Some(w)) => Some(BandImportanceWeights::new(w)?),
            _ => None,
        };
        Ok(Self {
            model,
            trained_mode,
            engine: StftEngine::new(stft)?,
            input_pcs,
        })
    }

    pub fn load(path: &Path, fallback_stft: StftConfig) -> CliResult<Self> {
        let (model, extra) = load_model_with(path)?;
        let meta = extra
            .and_then(|e| e.get("sekit").cloned())
            .map(serde_json::from_value::<ModelMeta>)
            .transpose()
            .map_err(|e| CliError::Runtime(format!("{}: bad model metadata: {e}", path.display())))?;
        Self::new(model, meta, fallback_stft)
    }

    pub fn enhance(&self, noisy: &Waveform, ext: Option<&Array2<f64>>) -> sekit::Result<Waveform> {
        match &self.input_pcs {
            Some(w) => {
                let stretched = apply_pcs_with(&self.engine, noisy, w)?;
                enhance_with(&self.engine, &stretched, &self.model, ext)
            }
            None => enhance_with(&self.engine, noisy, &self.model, ext),
        }
    }
}
