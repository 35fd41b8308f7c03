//! Dataset manifests.
//!
//! A manifest is a JSON-lines file. The first line is a provenance object
//! carrying the schema tag; every following line is one utterance entry.
//! Relative paths are resolved against the manifest's directory.
//!
//! ```text
//! {"schema":"sekit.manifest/1","pcs_mode":"none","bif_sha256":null}
//! {"id":"syn0000","noisy":"noisy/syn0000.wav","clean":"clean/syn0000.wav"}
//! ```

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::estimator::features::read_external_features;
use crate::estimator::train::TrainPair;
use crate::pcs::PcsMode;

pub const MANIFEST_SCHEMA: &str = "sekit.manifest/1";

fn ser_mode<S: Serializer>(m: &PcsMode, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(m.name())
}

fn de_mode<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<PcsMode, D::Error> {
    let s = String::deserialize(d)?;
    s.parse().map_err(serde::de::Error::custom)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub schema: String,
    /// PCS applied to the audio this manifest points at.
    #[serde(serialize_with = "ser_mode", deserialize_with = "de_mode")]
    pub pcs_mode: PcsMode,
    #[serde(default)]
    pub bif_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<serde_json::Value>,
}

impl Default for Provenance {
    fn default() -> Self {
        Self {
            schema: MANIFEST_SCHEMA.into(),
            pcs_mode: PcsMode::NONE,
            bif_sha256: None,
            source: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub noisy: PathBuf,
    pub clean: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ext_features: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub provenance: Provenance,
    pub entries: Vec<ManifestEntry>,
    /// Directory relative entry paths are resolved against.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(provenance: Provenance, entries: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Self {
        Self {
            provenance,
            entries,
            base_dir: base_dir.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Parses manifest text without touching the file system.
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>, origin: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Manifest {
            path: origin.into(),
            message: format!("line {line}: {message}"),
        };
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (first_no, first) = lines
            .next()
            .ok_or_else(|| err(1, "missing provenance line".into()))?;
        let provenance: Provenance =
            serde_json::from_str(first).map_err(|e| err(first_no + 1, format!("provenance: {e}")))?;
        if provenance.schema != MANIFEST_SCHEMA {
            return Err(err(
                first_no + 1,
                format!("unsupported schema `{}` (expected {MANIFEST_SCHEMA})", provenance.schema),
            ));
        }
        let mut seen = HashSet::new();
        let mut entries = Vec::new();
        for (no, line) in lines {
            let entry: ManifestEntry =
                serde_json::from_str(line).map_err(|e| err(no + 1, e.to_string()))?;
            if entry.id.is_empty() {
                return Err(err(no + 1, "empty utterance id".into()));
            }
            if !seen.insert(entry.id.clone()) {
                return Err(err(no + 1, format!("duplicate utterance id `{}`", entry.id)));
            }
            entries.push(entry);
        }
        Ok(Self::new(provenance, entries, base_dir))
    }

    /// Loads and validates a manifest; every referenced file must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self::parse(&text, base, path)?;
        m.check_files(path)?;
        Ok(m)
    }

    fn check_files(&self, origin: &Path) -> Result<()> {
        for e in &self.entries {
            let files = [Some(&e.noisy), Some(&e.clean), e.ext_features.as_ref()];
            for p in files.into_iter().flatten() {
                let full = self.resolve(p);
                if !full.is_file() {
                    return Err(Error::Manifest {
                        path: origin.into(),
                        message: format!("utterance `{}`: missing file {}", e.id, full.display()),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.provenance).expect("provenance serializes");
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn read_noisy(&self, e: &ManifestEntry, expected_rate: Option<u32>) -> Result<Waveform> {
        super::wav::read_wav_at(&self.resolve(&e.noisy), expected_rate)
    }

    pub fn read_clean(&self, e: &ManifestEntry, expected_rate: Option<u32>) -> Result<Waveform> {
        super::wav::read_wav_at(&self.resolve(&e.clean), expected_rate)
    }

    pub fn read_ext(&self, e: &ManifestEntry) -> Result<Option<Array2<f64>>> {
        e.ext_features
            .as_ref()
            .map(|p| read_external_features(&self.resolve(p)))
            .transpose()
    }

    /// Reads one entry as a training pair.
    pub fn read_pair(&self, e: &ManifestEntry, expected_rate: Option<u32>) -> Result<TrainPair> {
        Ok(TrainPair {
            id: e.id.clone(),
            noisy: self.read_noisy(e, expected_rate)?,
            clean: self.read_clean(e, expected_rate)?,
            ext: self.read_ext(e)?,
        })
    }
}
