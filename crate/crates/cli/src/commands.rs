//! One function per subcommand. Each takes an already validated config.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sekit::audio_io::{generate_synthetic, write_wav, Manifest, ManifestEntry, Provenance};
use sekit::estimator::{load_checkpoint, save_checkpoint, save_model_with, TrainState, Trainer};
use sekit::gradcheck::{check_mask_gradient, check_model_gradient, fixture, GradCheckConfig, GradCheckResult};
use sekit::metrics::{evaluate_manifest, EvalConfig, EvalMode, EvalReport};
use sekit::pcs::apply_pcs_with;
use sekit::{EstimatorModel, MaskDomain, StftEngine};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::pipeline::{training_pairs, Inference, ModelMeta};

/// Tolerances for `gradcheck`: whole loss pipeline and per estimator layer.
pub const MASK_GRAD_TOL: f64 = 1e-3;
pub const LAYER_GRAD_TOL: f64 = 1e-4;

fn create_dir(p: &Path) -> CliResult<()> {
    std::fs::create_dir_all(p).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))
}

fn write_text(p: &Path, text: &str) -> CliResult<()> {
    std::fs::write(p, text).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

pub fn load_manifest(path: &Path) -> CliResult<Manifest> {
    Ok(Manifest::load(path)?)
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> CliResult<Manifest> {
    let m = generate_synthetic(&cfg.synth, out)?;
    log::info!("wrote {} synthetic pairs to {}", m.len(), out.display());
    Ok(m)
}

/// Stretches the noisy and/or clean column of a corpus.
pub fn cmd_pcs(cfg: &RunConfig, manifest_path: &Path, out: &Path) -> CliResult<Manifest> {
    let input = load_manifest(manifest_path)?;
    let mode = cfg.pcs.mode;
    if !input.provenance.pcs_mode.is_none() {
        return Err(CliError::Config(format!(
            "{} is already stretched (mode `{}`)",
            manifest_path.display(),
            input.provenance.pcs_mode
        )));
    }
    let table = cfg.band_table()?;
    let weights = cfg.pcs_weights()?;
    let engine = StftEngine::new(cfg.stft)?;
    for sub in ["noisy", "clean"] {
        create_dir(&out.join(sub))?;
    }
    let rate = Some(cfg.audio.sample_rate);
    let process = |e: &ManifestEntry| -> sekit::Result<ManifestEntry> {
        let column = |apply: bool, rel: &Path, sub: &str, read: &dyn Fn() -> sekit::Result<sekit::Waveform>| {
            if !apply {
                return Ok(absolute(&input.resolve(rel)));
            }
            let stretched = apply_pcs_with(&engine, &read()?, &weights)?;
            let target = Path::new(sub).join(format!("{}.wav", e.id));
            write_wav(&stretched, &out.join(&target), cfg.audio.format)?;
            Ok(target)
        };
        Ok(ManifestEntry {
            id: e.id.clone(),
            noisy: column(mode.apply_to_input, &e.noisy, "noisy", &|| input.read_noisy(e, rate))?,
            clean: column(mode.apply_to_target, &e.clean, "clean", &|| input.read_clean(e, rate))?,
            ext_features: e.ext_features.as_ref().map(|p| absolute(&input.resolve(p))),
        })
    };
    let results: Vec<_> = input.entries.par_iter().map(process).collect();
    let mut entries = Vec::new();
    let mut failures = Vec::new();
    for (e, r) in input.entries.iter().zip(results) {
        match r {
            Ok(entry) => entries.push(entry),
            Err(err) => failures.push((e.id.clone(), err.to_string())),
        }
    }
    let provenance = Provenance {
        pcs_mode: mode,
        bif_sha256: Some(table.sha256.clone()),
        source: Some(serde_json::json!({ "pcs_from": absolute(manifest_path) })),
        ..Provenance::default()
    };
    let manifest = Manifest::new(provenance, entries, out);
    manifest.save(&out.join("manifest.jsonl"))?;
    log::info!("pcs `{mode}`: {} items written to {}", manifest.len(), out.display());
    if failures.is_empty() {
        Ok(manifest)
    } else {
        Err(CliError::partial(input.len(), &failures))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model_path: PathBuf,
    pub state: TrainState,
}

/// Trains on a manifest, writing `model.bin` (best by validation loss),
/// `checkpoint.bin`, `train_log.csv`, `train_steps.csv` and the effective
/// `config.toml` to `out`.
pub fn cmd_train(cfg: &RunConfig, manifest_path: &Path, out: &Path, resume: Option<&Path>) -> CliResult<TrainOutcome> {
    let manifest = load_manifest(manifest_path)?;
    if manifest.is_empty() {
        return Err(CliError::Runtime(format!("{} has no entries", manifest_path.display())));
    }
    let (pairs, mode) = training_pairs(&manifest, cfg, cfg.pcs.mode)?;
    train_pairs(cfg, &pairs, mode, out, resume)
}

pub fn train_pairs(
    cfg: &RunConfig,
    pairs: &[sekit::estimator::TrainPair],
    mode: sekit::pcs::PcsMode,
    out: &Path,
    resume: Option<&Path>,
) -> CliResult<TrainOutcome> {
    create_dir(out)?;
    write_text(&out.join("config.toml"), &cfg.to_toml())?;
    let meta = ModelMeta::new(mode, &cfg.band_table()?, &cfg.pcs_weights()?, cfg.stft);
    let trainer = Trainer::new(cfg.train, cfg.loss, cfg.stft)?;
    let state = match resume {
        Some(p) => {
            let s = load_checkpoint(p)?;
            if s.model.architecture() != &cfg.architecture() {
                return Err(CliError::Config(format!(
                    "checkpoint {} was made with a different model architecture",
                    p.display()
                )));
            }
            log::info!("resuming from {} at epoch {}", p.display(), s.next_epoch);
            s
        }
        None => TrainState::new(EstimatorModel::new(cfg.architecture(), cfg.model.seed)?, &cfg.train),
    };
    let model_path = out.join("model.bin");
    let ckpt = out.join("checkpoint.bin");
    let extra = serde_json::json!({ "sekit": meta });
    let persist = |s: &TrainState| -> sekit::Result<()> {
        save_checkpoint(s, &ckpt)?;
        save_model_with(s.best_model(), Some(extra.clone()), &model_path)?;
        for (name, text) in [("train_log.csv", s.log.epochs_csv()), ("train_steps.csv", s.log.steps_csv())] {
            let path = out.join(name);
            std::fs::write(&path, text).map_err(|source| sekit::Error::Io { path, source })?;
        }
        Ok(())
    };
    let state = trainer.run(state, pairs, persist)?;
    persist(&state)?;
    if let Some(b) = &state.best {
        log::info!("best epoch {} (loss {:.6}); model written to {}", b.epoch, b.loss, model_path.display());
    }
    Ok(TrainOutcome { model_path, state })
}

pub enum EnhanceTarget<'a> {
    File {
        input: &'a Path,
        output: &'a Path,
        ext: Option<&'a Path>,
    },
    Batch {
        manifest: &'a Path,
        out: &'a Path,
    },
}

/// Enhances one file or every noisy file of a manifest. Batch outputs keep
/// the noisy file names and come with a manifest pairing them with the
/// original clean references.
pub fn cmd_enhance(cfg: &RunConfig, model: &Path, target: EnhanceTarget<'_>) -> CliResult<()> {
    let inf = Inference::load(model, cfg.stft)?;
    let rate = Some(cfg.audio.sample_rate);
    match target {
        EnhanceTarget::File { input, output, ext } => {
            let noisy = sekit::audio_io::read_wav_at(input, rate)?;
            let ext = ext.map(sekit::estimator::read_external_features).transpose()?;
            let y = inf.enhance(&noisy, ext.as_ref())?;
            write_wav(&y, output, cfg.audio.format)?;
            log::info!("wrote {}", output.display());
            Ok(())
        }
        EnhanceTarget::Batch { manifest, out } => {
            let m = load_manifest(manifest)?;
            create_dir(out)?;
            let names: Vec<PathBuf> = m
                .entries
                .iter()
                .map(|e| PathBuf::from(e.noisy.file_name().unwrap_or(e.id.as_ref())))
                .collect();
            let unique: HashSet<_> = names.iter().collect();
            if unique.len() != names.len() {
                return Err(CliError::Runtime("noisy file names are not unique; cannot preserve names".into()));
            }
            let results: Vec<sekit::Result<()>> = m
                .entries
                .par_iter()
                .zip(&names)
                .map(|(e, name)| {
                    let noisy = m.read_noisy(e, rate)?;
                    let ext = m.read_ext(e)?;
                    let y = inf.enhance(&noisy, ext.as_ref())?;
                    write_wav(&y, &out.join(name), cfg.audio.format)
                })
                .collect();
            let mut entries = Vec::new();
            let mut failures = Vec::new();
            for ((e, name), r) in m.entries.iter().zip(&names).zip(results) {
                match r {
                    Ok(()) => entries.push(ManifestEntry {
                        id: e.id.clone(),
                        noisy: name.clone(),
                        clean: absolute(&m.resolve(&e.clean)),
                        ext_features: None,
                    }),
                    Err(err) => failures.push((e.id.clone(), err.to_string())),
                }
            }
            Manifest::new(Provenance::default(), entries, out).save(&out.join("manifest.jsonl"))?;
            log::info!("enhanced {} of {} files into {}", m.len() - failures.len(), m.len(), out.display());
            if failures.is_empty() {
                Ok(())
            } else {
                Err(CliError::partial(m.len(), &failures))
            }
        }
    }
}

pub enum EvalTarget<'a> {
    Identity,
    Oracle,
    Model(&'a Path),
}

/// Scores a manifest. Files that fail are listed in the report; callers
/// decide how to treat an incomplete report.
pub fn cmd_eval(cfg: &RunConfig, manifest: &Path, target: EvalTarget<'_>, out: Option<&Path>) -> CliResult<EvalReport> {
    let m = load_manifest(manifest)?;
    let ecfg = EvalConfig {
        stft: cfg.stft,
        sample_rate: Some(cfg.audio.sample_rate),
    };
    let report = match target {
        EvalTarget::Identity => evaluate_manifest(&m, EvalMode::Identity, &ecfg)?,
        EvalTarget::Oracle => evaluate_manifest(&m, EvalMode::Oracle, &ecfg)?,
        EvalTarget::Model(p) => {
            let inf = Inference::load(p, cfg.stft)?;
            let f = |x: &sekit::Waveform, ext: Option<&ndarray::Array2<f64>>| inf.enhance(x, ext);
            evaluate_manifest(&m, EvalMode::Model(&f), &ecfg)?
        }
    };
    if let Some(p) = out {
        report.write_csv(p)?;
    }
    Ok(report)
}

/// Finite-difference checks on a short synthetic fixture with the configured
/// STFT and estimator shape.
pub fn cmd_gradcheck(cfg: &RunConfig, coords: usize, seed: u64) -> CliResult<Vec<GradCheckResult>> {
    let (noisy, clean) = fixture((cfg.audio.sample_rate / 5) as usize, seed, cfg.audio.sample_rate)?;
    let gc = GradCheckConfig { coords, seed, ..Default::default() };
    let mut results = Vec::new();
    for domain in [MaskDomain::Linear, MaskDomain::Compressed] {
        results.push(check_mask_gradient(&noisy, &clean, &cfg.stft, domain, cfg.loss, &gc)?);
    }
    let model = EstimatorModel::new(cfg.architecture(), seed)?;
    results.extend(check_model_gradient(&model, &noisy, &clean, &cfg.stft, cfg.loss, &gc)?);
    Ok(results)
}

pub fn gradcheck_tolerance(r: &GradCheckResult) -> f64 {
    if r.name.starts_with("mask") {
        MASK_GRAD_TOL
    } else {
        LAYER_GRAD_TOL
    }
}
