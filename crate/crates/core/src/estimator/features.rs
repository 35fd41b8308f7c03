//! Frame-level input assembly and the external-features file.
//!
//! Each spectral frame becomes one input row: the compressed noisy magnitude
//! (optionally followed by an external per-frame feature vector), stacked
//! over `2 * context + 1` neighbouring frames. Frames past either edge repeat
//! the edge frame.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array2};

use crate::dsp::MagnitudeSpectrum;
use crate::error::{Error, Result};

const FEATURES_MAGIC: &[u8; 8] = b"SEKFEAT\0";
const FEATURES_VERSION: u32 = 1;

/// Input rows for the estimator, one per spectral frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFrames(pub Array2<f64>);

impl FeatureFrames {
    pub fn n_frames(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }
}

pub fn feature_dim(n_bins: usize, ext_dim: usize, context: usize) -> usize {
    (n_bins + ext_dim) * (2 * context + 1)
}

pub fn assemble_features(
    noisy_mag_c: &MagnitudeSpectrum,
    ext: Option<&Array2<f64>>,
    context: usize,
) -> Result<FeatureFrames> {
    let mag = noisy_mag_c.values();
    let (n_frames, n_bins) = mag.dim();
    let ext_dim = match ext {
        Some(e) => {
            if e.nrows() != n_frames {
                return Err(Error::LengthMismatch {
                    context: "external features vs spectral frames",
                    left: e.nrows(),
                    right: n_frames,
                });
            }
            e.ncols()
        }
        None => 0,
    };
    if n_frames == 0 {
        return Ok(FeatureFrames(Array2::zeros((0, feature_dim(n_bins, ext_dim, context)))));
    }
    let block = n_bins + ext_dim;
    let mut out = Array2::zeros((n_frames, feature_dim(n_bins, ext_dim, context)));
    let last = n_frames as isize - 1;
    for t in 0..n_frames {
        let mut row = out.row_mut(t);
        for (slot, offset) in (-(context as isize)..=context as isize).enumerate() {
            let src = (t as isize + offset).clamp(0, last) as usize;
            let base = slot * block;
            row.slice_mut(s![base..base + n_bins]).assign(&mag.row(src));
            if let Some(e) = ext {
                row.slice_mut(s![base + n_bins..base + block])
                    .assign(&e.row(src));
            }
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("features"));
    }
    Ok(FeatureFrames(out))
}

/// Writes a per-utterance external feature matrix: magic, version, frame
/// count, dimension (all little-endian), then row-major `f64` values.
pub fn write_external_features(path: &Path, features: &Array2<f64>) -> Result<()> {
    let mut bytes = Vec::with_capacity(24 + features.len() * 8);
    bytes.extend_from_slice(FEATURES_MAGIC);
    bytes.extend_from_slice(&FEATURES_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(features.nrows() as u64).to_le_bytes());
    bytes.extend_from_slice(&(features.ncols() as u64).to_le_bytes());
    for v in features.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_external_features(path: &Path) -> Result<Array2<f64>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::ModelFile(format!("{}: {msg}", path.display()));
    if bytes.len() < 28 || &bytes[..8] != FEATURES_MAGIC {
        return Err(bad("not an external features file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FEATURES_VERSION {
        return Err(bad(&format!("unsupported features version {version}")));
    }
    let rows = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[20..28].try_into().unwrap()) as usize;
    let body = &bytes[28..];
    if body.len() != rows * cols * 8 {
        return Err(bad(&format!(
            "header declares {rows}x{cols} values but body holds {} bytes",
            body.len()
        )));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array2::from_shape_vec((rows, cols), values).map_err(|e| bad(&e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mag(rows: usize, cols: usize) -> MagnitudeSpectrum {
        MagnitudeSpectrum::new(Array2::from_shape_fn((rows, cols), |(t, k)| (t * 10 + k) as f64))
    }

    #[test]
    fn no_context_is_the_row() {
        let m = mag(4, 201);
        let f = assemble_features(&m, None, 0).unwrap();
        assert_eq!(f.dim(), 201);
        assert_eq!(f.values(), m.values());
    }

    #[test]
    fn edge_replication() {
        let m = mag(3, 2);
        let f = assemble_features(&m, None, 1).unwrap();
        assert_eq!(f.values().row(0).to_vec(), vec![0.0, 1.0, 0.0, 1.0, 10.0, 11.0]);
        assert_eq!(f.values().row(2).to_vec(), vec![10.0, 11.0, 20.0, 21.0, 20.0, 21.0]);
    }

    #[test]
    fn external_slot_widens_frames() {
        let m = mag(5, 201);
        let ext = Array2::from_elem((5, 1024), 0.5);
        let f = assemble_features(&m, Some(&ext), 0).unwrap();
        assert_eq!(f.dim(), 1225);
        assert_eq!(f.values()[[2, 201]], 0.5);
        let f = assemble_features(&m, Some(&ext), 2).unwrap();
        assert_eq!(f.dim(), 1225 * 5);

        let short = Array2::zeros((4, 1024));
        assert!(matches!(
            assemble_features(&m, Some(&short), 0),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn features_file_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u1.feat");
        let ext = Array2::from_shape_fn((7, 3), |(i, j)| i as f64 - 0.25 * j as f64);
        write_external_features(&path, &ext).unwrap();
        assert_eq!(read_external_features(&path).unwrap(), ext);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read_external_features(&path).is_err());
    }
}
