//! The PCS-mode grid: train one model per mode on the same corpus and score
//! each on the same held-out set.

use std::fmt::Write as _;
use std::path::Path;

use sekit::audio_io::{generate_synthetic, Manifest, SynthSpec};
use sekit::metrics::{evaluate_manifest, EvalConfig, EvalMode, EvalReport};
use sekit::pcs::PcsMode;

use crate::commands::{load_manifest, train_pairs};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::pipeline::{training_pairs, Inference};

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub mode: PcsMode,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

impl AblationRow {
    pub fn means(&self) -> Option<(f64, f64, f64)> {
        self.report.as_ref().and_then(EvalReport::means)
    }

    pub fn status(&self) -> String {
        match (&self.error, &self.report) {
            (Some(e), _) => format!("error: {}", e.replace([',', '\n'], " ")),
            (None, Some(r)) if !r.is_complete() => format!("partial: {} failed", r.failures.len()),
            _ => "ok".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub const HEADER: &'static str = "mode,pcs_input,pcs_target,stoi,si_sdr_db,seg_snr_db,n_scored,status";

    pub fn row(&self, mode: PcsMode) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    pub fn is_complete(&self) -> bool {
        self.rows.len() == PcsMode::ALL.len() && self.rows.iter().all(|r| r.status() == "ok")
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            let (s, d, g) = match r.means() {
                Some((s, d, g)) => (s.to_string(), d.to_string(), g.to_string()),
                None => (String::new(), String::new(), String::new()),
            };
            let n = r.report.as_ref().map_or(0, |r| r.rows.len());
            writeln!(
                out,
                "{},{},{},{s},{d},{g},{n},{}",
                r.mode.name(),
                r.mode.apply_to_input,
                r.mode.apply_to_target,
                r.status()
            )
            .unwrap();
        }
        out
    }
}

fn run_mode(cfg: &RunConfig, mode: PcsMode, train: &Manifest, test: &Manifest, out: &Path) -> CliResult<EvalReport> {
    let (pairs, trained) = training_pairs(train, cfg, mode)?;
    let outcome = train_pairs(cfg, &pairs, trained, out, None)?;
    let inf = Inference::load(&outcome.model_path, cfg.stft)?;
    let enhance = |x: &sekit::Waveform, ext: Option<&ndarray::Array2<f64>>| inf.enhance(x, ext);
    let ecfg = EvalConfig {
        stft: cfg.stft,
        sample_rate: Some(cfg.audio.sample_rate),
    };
    let report = evaluate_manifest(test, EvalMode::Model(&enhance), &ecfg)?;
    report.write_csv(&out.join("eval.csv"))?;
    Ok(report)
}

/// Trains and scores all four modes. A failing mode becomes an error row;
/// the table is written to `out/ablation.csv` either way.
pub fn run_ablation(cfg: &RunConfig, train: &Manifest, test: &Manifest, out: &Path) -> CliResult<AblationTable> {
    let mut table = AblationTable::default();
    for mode in PcsMode::ALL {
        log::info!("ablation: training mode `{mode}`");
        let row = match run_mode(cfg, mode, train, test, &out.join(mode.name())) {
            Ok(report) => AblationRow { mode, report: Some(report), error: None },
            Err(e) => {
                log::error!("mode `{mode}` failed: {e}");
                AblationRow { mode, report: None, error: Some(e.to_string()) }
            }
        };
        if let Some((s, d, _)) = row.means() {
            log::info!("mode `{mode}`: stoi {s:.4}, si-sdr {d:.2} dB");
        }
        table.rows.push(row);
    }
    let path = out.join("ablation.csv");
    std::fs::write(&path, table.to_csv()).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok(table)
}

/// Runs the grid on the given corpora, synthesizing any that are missing
/// under `out/data`.
pub fn cmd_ablate(
    cfg: &RunConfig,
    train_manifest: Option<&Path>,
    test_manifest: Option<&Path>,
    out: &Path,
) -> CliResult<AblationTable> {
    let train = match train_manifest {
        Some(p) => load_manifest(p)?,
        None => generate_synthetic(&cfg.synth, &out.join("data").join("train"))?,
    };
    let test = match test_manifest {
        Some(p) => load_manifest(p)?,
        None => {
            let spec = SynthSpec {
                n_items: cfg.ablate.heldout_items,
                seed: cfg.ablate.heldout_seed,
                id_prefix: "heldout".into(),
                ..cfg.synth.clone()
            };
            generate_synthetic(&spec, &out.join("data").join("test"))?
        }
    };
    for (name, m) in [("training", &train), ("held-out", &test)] {
        if !m.provenance.pcs_mode.is_none() {
            return Err(CliError::Config(format!("the {name} corpus must be unprocessed for ablation")));
        }
        if m.is_empty() {
            return Err(CliError::Runtime(format!("the {name} corpus is empty")));
        }
    }
    let table = run_ablation(cfg, &train, &test, out)?;
    if table.is_complete() {
        Ok(table)
    } else {
        Err(CliError::Runtime(format!(
            "ablation table is partial; see {}",
            out.join("ablation.csv").display()
        )))
    }
}
