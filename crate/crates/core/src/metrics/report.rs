//! Corpus evaluation and its CSV report.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;

use super::{sdr, stoi};
use crate::audio_io::{Manifest, ManifestEntry};
use crate::dsp::{StftConfig, StftEngine, Waveform};
use crate::error::{Error, Result};
use crate::masking::oracle_enhance_with;

/// An enhancement function: noisy waveform plus optional external features
/// in, enhanced waveform out.
pub type Enhancer<'a> = dyn Fn(&Waveform, Option<&Array2<f64>>) -> Result<Waveform> + Sync + 'a;

/// What gets scored against the clean reference.
pub enum EvalMode<'a> {
    /// The noisy input itself (baseline).
    Identity,
    /// Ideal-ratio-mask enhancement computed from the clean signal.
    Oracle,
    Model(&'a Enhancer<'a>),
}

impl EvalMode<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            EvalMode::Identity => "identity",
            EvalMode::Oracle => "oracle",
            EvalMode::Model(_) => "model",
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct EvalConfig {
    pub stft: StftConfig,
    /// Files at any other rate are rejected.
    pub sample_rate: Option<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub stoi: f64,
    pub si_sdr_db: f64,
    pub seg_snr_db: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalFailure {
    pub id: String,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub failures: Vec<EvalFailure>,
}

impl EvalReport {
    pub const HEADER: &'static str = "id,stoi,si_sdr_db,seg_snr_db";

    /// Mean (stoi, si_sdr_db, seg_snr_db) over the scored rows.
    pub fn means(&self) -> Option<(f64, f64, f64)> {
        if self.rows.is_empty() {
            return None;
        }
        let n = self.rows.len() as f64;
        let sum = self.rows.iter().fold((0.0, 0.0, 0.0), |a, r| {
            (a.0 + r.stoi, a.1 + r.si_sdr_db, a.2 + r.seg_snr_db)
        });
        Some((sum.0 / n, sum.1 / n, sum.2 / n))
    }

    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn row(&self, id: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.id == id)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            writeln!(out, "{},{},{},{}", r.id, r.stoi, r.si_sdr_db, r.seg_snr_db).unwrap();
        }
        if let Some((a, b, c)) = self.means() {
            writeln!(out, "# mean,{a},{b},{c}").unwrap();
        }
        for f in &self.failures {
            writeln!(out, "# failed,{},{}", f.id, f.message.replace('\n', " ")).unwrap();
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

pub fn score(clean: &Waveform, processed: &Waveform, id: &str) -> Result<EvalRow> {
    Ok(EvalRow {
        id: id.to_string(),
        stoi: stoi::stoi(clean, processed)?,
        si_sdr_db: sdr::si_sdr(clean, processed)?,
        seg_snr_db: sdr::seg_snr(clean, processed)?,
    })
}

fn evaluate_entry(
    manifest: &Manifest,
    entry: &ManifestEntry,
    mode: &EvalMode<'_>,
    engine: &StftEngine,
    cfg: &EvalConfig,
) -> Result<EvalRow> {
    let noisy = manifest.read_noisy(entry, cfg.sample_rate)?;
    let clean = manifest.read_clean(entry, cfg.sample_rate)?;
    let processed = match mode {
        EvalMode::Identity => noisy,
        EvalMode::Oracle => oracle_enhance_with(engine, &noisy, &clean)?,
        EvalMode::Model(f) => {
            let ext = manifest.read_ext(entry)?;
            f(&noisy, ext.as_ref())?
        }
    };
    score(&clean, &processed, &entry.id)
}

/// Scores every manifest entry. Per-file failures are collected in the
/// report rather than aborting the run.
pub fn evaluate_manifest(manifest: &Manifest, mode: EvalMode<'_>, cfg: &EvalConfig) -> Result<EvalReport> {
    if manifest.is_empty() {
        return Err(Error::Manifest {
            path: manifest.base_dir.clone(),
            message: "manifest has no entries to evaluate".into(),
        });
    }
    let engine = StftEngine::new(cfg.stft)?;
    let results: Vec<Result<EvalRow>> = manifest
        .entries
        .par_iter()
        .map(|e| evaluate_entry(manifest, e, &mode, &engine, cfg))
        .collect();
    let mut report = EvalReport::default();
    for (e, r) in manifest.entries.iter().zip(results) {
        match r {
            Ok(row) => report.rows.push(row),
            Err(err) => {
                log::warn!("{}: {err}", e.id);
                report.failures.push(EvalFailure {
                    id: e.id.clone(),
                    message: err.to_string(),
                });
            }
        }
    }
    Ok(report)
}
