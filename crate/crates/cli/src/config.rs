//! Run configuration: a TOML file with one section per subsystem, plus
//! `section.key=value` overrides from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sekit::audio_io::{SynthSpec, WavFormat};
use sekit::pcs::{BandTable, BandImportanceWeights, PcsMode};
use sekit::{Architecture, LossWeights, MaskDomain, StftConfig, TrainConfig};

use crate::error::{CliError, CliResult};

/// Band table used when `pcs.bif` is not set.
pub const DEFAULT_BIF: &str = include_str!("../../../configs/bif_pcs400.txt");

fn ser_mode<S: Serializer>(m: &PcsMode, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(m.name())
}

fn de_mode<'de, D: Deserializer<'de>>(d: D) -> Result<PcsMode, D::Error> {
    String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AudioSection {
    pub sample_rate: u32,
    /// Encoding of WAV files written by `pcs` and `enhance`.
    pub format: WavFormat,
}

impl Default for AudioSection {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            format: WavFormat::Float32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PcsSection {
    #[serde(serialize_with = "ser_mode", deserialize_with = "de_mode")]
    pub mode: PcsMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bif: Option<PathBuf>,
}

impl Default for PcsSection {
    fn default() -> Self {
        Self {
            mode: PcsMode::BOTH,
            bif: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub context: usize,
    pub hidden: Vec<usize>,
    pub mask_domain: MaskDomain,
    pub ext_dim: usize,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            context: 2,
            hidden: vec![256, 256],
            mask_domain: MaskDomain::Linear,
            ext_dim: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    /// Size of the synthetic held-out set when no test manifest is given.
    pub heldout_items: usize,
    pub heldout_seed: u64,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            heldout_items: 20,
            heldout_seed: 1000,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub stft: StftConfig,
    pub audio: AudioSection,
    pub pcs: PcsSection,
    pub loss: LossWeights,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub synth: SynthSpec,
    pub ablate: AblateSection,
}

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

impl RunConfig {
    pub fn architecture(&self) -> Architecture {
        Architecture {
            n_bins: self.stft.n_bins(),
            context: self.model.context,
            ext_dim: self.model.ext_dim,
            hidden: self.model.hidden.clone(),
            mask_domain: self.model.mask_domain,
            sample_rate: self.audio.sample_rate,
        }
    }

    pub fn band_table(&self) -> CliResult<BandTable> {
        match &self.pcs.bif {
            Some(p) => BandTable::load(p).map_err(|e| CliError::ConfigFile {
                path: p.clone(),
                message: e.to_string(),
            }),
            None => BandTable::from_text(DEFAULT_BIF).map_err(invalid),
        }
    }

    pub fn pcs_weights(&self) -> CliResult<BandImportanceWeights> {
        self.band_table()?
            .weights(&self.stft, self.audio.sample_rate)
            .map_err(|e| CliError::Config(format!("pcs.bif: {e}")))
    }

    /// Cross-section consistency checks.
    pub fn validate(&self) -> CliResult<()> {
        self.stft.validate().map_err(|e| CliError::Config(format!("stft: {e}")))?;
        if self.audio.sample_rate == 0 {
            return Err(CliError::Config("audio.sample_rate must be positive".into()));
        }
        self.pcs_weights()?;
        self.architecture()
            .validate()
            .map_err(|e| CliError::Config(format!("model: {e}")))?;
        self.train.validate().map_err(|e| CliError::Config(format!("train: {e}")))?;
        self.loss.validate().map_err(|e| CliError::Config(format!("loss: {e}")))?;
        self.synth.validate().map_err(invalid)?;
        if self.synth.sample_rate != self.audio.sample_rate {
            return Err(CliError::Config(format!(
                "synth.sample_rate ({}) differs from audio.sample_rate ({})",
                self.synth.sample_rate, self.audio.sample_rate
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Parses `section.key=value`. The value is read as a TOML literal and
/// falls back to a bare string.
fn apply_override(table: &mut toml::Table, spec: &str) -> CliResult<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{spec}` is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override `{spec}` has an empty key segment")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = parts.split_last().unwrap();
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override `{spec}`: `{p}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Relative paths inside a config file are taken relative to that file.
fn anchor_paths(table: &mut toml::Table, base: &Path) {
    if let Some(toml::Value::String(bif)) = table
        .get_mut("pcs")
        .and_then(|v| v.as_table_mut())
        .and_then(|t| t.get_mut("bif"))
    {
        if Path::new(bif.as_str()).is_relative() {
            *bif = base.join(bif.as_str()).to_string_lossy().into_owned();
        }
    }
}

pub fn parse_config(text: &str, origin: Option<&Path>, overrides: &[String]) -> CliResult<RunConfig> {
    let file_err = |e: toml::de::Error| match origin {
        Some(p) => CliError::ConfigFile {
            path: p.to_path_buf(),
            message: e.to_string(),
        },
        None => CliError::Config(e.to_string()),
    };
    // Parse the file on its own first so errors point at its own lines.
    toml::from_str::<RunConfig>(text).map_err(file_err)?;
    let mut table: toml::Table = toml::from_str(text).map_err(file_err)?;
    if let Some(dir) = origin.and_then(Path::parent) {
        anchor_paths(&mut table, dir);
    }
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let merged = toml::to_string(&table).map_err(invalid)?;
    let cfg: RunConfig = toml::from_str(&merged)
        .map_err(|e| CliError::Config(format!("after overrides: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: Option<&Path>, overrides: &[String]) -> CliResult<RunConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::ConfigFile {
            path: p.to_path_buf(),
            message: e.to_string(),
        })?,
        None => String::new(),
    };
    parse_config(&text, path, overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bare_config_has_reference_defaults() {
        let cfg = parse_config("", None, &[]).unwrap();
        assert_eq!((cfg.stft.n_fft, cfg.stft.hop, cfg.stft.win_length), (400, 160, 400));
        assert_eq!(cfg.train.learning_rate, 1e-4);
        assert_eq!(cfg.train.epochs, 50);
        assert_eq!(cfg.train.max_seconds, 10.0);
        assert_eq!(cfg.pcs.mode, PcsMode::BOTH);
        assert_eq!(cfg.pcs_weights().unwrap().len(), 201);
    }

    #[test]
    fn overrides_win() {
        let text = "[train]\nepochs = 7\n";
        let cfg = parse_config(
            text,
            None,
            &["train.epochs=3".into(), "pcs.mode=input".into(), "model.hidden=[8, 4]".into()],
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.pcs.mode, PcsMode::INPUT);
        assert_eq!(cfg.model.hidden, vec![8, 4]);
        let round = parse_config(&cfg.to_toml(), None, &[]).unwrap();
        assert_eq!(round, cfg);
    }

    #[test]
    fn errors_name_the_field() {
        let err = parse_config("[train]\nepochz = 3\n", None, &[]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("epochz"), "{err}");
        let err = parse_config("", None, &["train.batch_size=\"many\"".into()]).unwrap_err();
        assert!(err.to_string().contains("batch_size"), "{err}");
        let err = parse_config("", None, &["stft.hop=0".into()]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(parse_config("", None, &["nokey".into()]).is_err());
        assert!(parse_config("", None, &["pcs.mode=sideways".into()]).is_err());
    }

    #[test]
    fn bif_path_is_relative_to_config() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("flat.txt"), "0 8000 1.0\n").unwrap();
        let cfg_path = dir.path().join("run.toml");
        std::fs::write(&cfg_path, "[pcs]\nbif = \"flat.txt\"\n").unwrap();
        let cfg = load_config(Some(&cfg_path), &[]).unwrap();
        assert!(cfg.pcs_weights().unwrap().weights().iter().all(|&w| w == 1.0));
    }
}
