//! Versioned binary container for models and training checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic     8 bytes  "SEKMODEL"
//! version   u32
//! hdr_len   u32
//! header    hdr_len bytes of JSON (architecture, seed, section table, extras)
//! count     u64      number of f64 values that follow
//! blob      count * 8 bytes, sections concatenated in header order
//! checksum  32 bytes SHA-256 of everything above
//! ```

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{Architecture, Dense, EstimatorModel};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 8] = b"SEKMODEL";
pub const MODEL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub(crate) struct Section {
    pub name: String,
    pub len: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub(crate) struct Header {
    pub architecture: Architecture,
    pub seed: u64,
    pub sections: Vec<Section>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extra: Option<serde_json::Value>,
}

/// Decoded container: header plus named `f64` sections.
#[derive(Clone, Debug)]
pub(crate) struct Container {
    pub architecture: Architecture,
    pub seed: u64,
    pub extra: Option<serde_json::Value>,
    pub sections: Vec<(String, Vec<f64>)>,
}

impl Container {
    pub fn section(&self, name: &str) -> Result<&[f64]> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| Error::ModelFile(format!("missing section `{name}`")))
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = Header {
            architecture: self.architecture.clone(),
            seed: self.seed,
            sections: self
                .sections
                .iter()
                .map(|(name, v)| Section {
                    name: name.clone(),
                    len: v.len() as u64,
                })
                .collect(),
            extra: self.extra.clone(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let count: usize = self.sections.iter().map(|(_, v)| v.len()).sum();
        let mut out = Vec::with_capacity(8 + 4 + 4 + header.len() + 8 + count * 8 + 32);
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(count as u64).to_le_bytes());
        for (_, values) in &self.sections {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let truncated = || Error::ModelFile("file is truncated".into());
        if bytes.len() < 16 {
            return Err(truncated());
        }
        if &bytes[..8] != MODEL_MAGIC {
            return Err(Error::ModelFile("bad magic bytes".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != MODEL_VERSION {
            return Err(Error::ModelVersion {
                found: version,
                expected: MODEL_VERSION,
            });
        }
        let hdr_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let hdr_end = 16usize.checked_add(hdr_len).ok_or_else(truncated)?;
        if bytes.len() < hdr_end + 8 + 32 {
            return Err(truncated());
        }
        let count = u64::from_le_bytes(bytes[hdr_end..hdr_end + 8].try_into().unwrap()) as usize;
        let blob_end = count
            .checked_mul(8)
            .and_then(|n| n.checked_add(hdr_end + 8))
            .ok_or_else(truncated)?;
        if bytes.len() < blob_end + 32 {
            return Err(truncated());
        }
        if bytes.len() > blob_end + 32 {
            return Err(Error::ModelFile("trailing bytes after checksum".into()));
        }
        let digest = Sha256::digest(&bytes[..blob_end]);
        if digest.as_slice() != &bytes[blob_end..] {
            return Err(Error::ModelFile("checksum mismatch".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[16..hdr_end])
            .map_err(|e| Error::ModelFile(format!("bad header: {e}")))?;
        let declared: u64 = header.sections.iter().map(|s| s.len).sum();
        if declared as usize != count {
            return Err(Error::ModelFile(format!(
                "section table declares {declared} values, blob holds {count}"
            )));
        }
        let mut values = bytes[hdr_end + 8..blob_end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let sections = header
            .sections
            .iter()
            .map(|s| (s.name.clone(), values.by_ref().take(s.len as usize).collect()))
            .collect();
        Ok(Self {
            architecture: header.architecture,
            seed: header.seed,
            extra: header.extra,
            sections,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

pub(crate) fn model_from_flat(
    architecture: Architecture,
    seed: u64,
    params: &[f64],
) -> Result<EstimatorModel> {
    architecture.validate()?;
    let shapes = architecture.layer_shapes();
    let expected: usize = shapes.iter().map(|(i, o)| i * o + o).sum();
    if params.len() != expected {
        return Err(Error::Dimension {
            context: "stored parameters",
            expected,
            actual: params.len(),
        });
    }
    let mut offset = 0;
    let layers = shapes
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let w = &params[offset..offset + fan_in * fan_out];
            offset += fan_in * fan_out;
            let b = &params[offset..offset + fan_out];
            offset += fan_out;
            Dense {
                weight: Array2::from_shape_vec((fan_in, fan_out), w.to_vec()).unwrap(),
                bias: Array1::from(b.to_vec()),
            }
        })
        .collect();
    EstimatorModel::from_layers(architecture, layers, seed)
}

pub(crate) fn model_container(model: &EstimatorModel) -> Container {
    Container {
        architecture: model.architecture().clone(),
        seed: model.seed(),
        extra: None,
        sections: vec![("params".into(), model.flatten())],
    }
}

pub fn encode_model(model: &EstimatorModel) -> Vec<u8> {
    model_container(model).encode()
}

pub fn decode_model(bytes: &[u8]) -> Result<EstimatorModel> {
    let c = Container::decode(bytes)?;
    model_from_flat(c.architecture.clone(), c.seed, c.section("params")?)
}

pub fn save_model(model: &EstimatorModel, path: &Path) -> Result<()> {
    std::fs::write(path, encode_model(model)).map_err(|e| Error::io(path, e))
}

/// Loads the model parameters from a model or checkpoint file.
pub fn load_model(path: &Path) -> Result<EstimatorModel> {
    load_model_with(path).map(|(m, _)| m)
}

/// Saves a model with a free-form JSON metadata block in the header.
pub fn save_model_with(
    model: &EstimatorModel,
    extra: Option<serde_json::Value>,
    path: &Path,
) -> Result<()> {
    let mut c = model_container(model);
    c.extra = extra;
    c.write(path)
}

/// Loads a model and its metadata block, if any.
pub fn load_model_with(path: &Path) -> Result<(EstimatorModel, Option<serde_json::Value>)> {
    let c = Container::read(path)?;
    let model = model_from_flat(c.architecture.clone(), c.seed, c.section("params")?)?;
    Ok((model, c.extra))
}
