//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.
//!
//! Set `SEKIT_BLESS=1` to rewrite the golden files under `tests/fixtures`.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sekit::audio_io::{decode_wav, encode_wav, generate_synthetic, SynthSpec, WavFormat};
use sekit::estimator::{decode_model, encode_model};
use sekit::losses::{cs_mag_l1_loss, mag_l1_loss, wsdr_loss};
use sekit::pcs::{apply_pcs, pcs_compress, pcs_stretch, BandTable};
use sekit::{
    compress, decompress, Architecture, BandImportanceWeights, EstimatorModel, MaskDomain,
    Spectrogram, StftConfig, StftEngine, Waveform,
};
use sekit_cli::ablate::cmd_ablate;
use sekit_cli::commands::{cmd_eval, cmd_gradcheck, cmd_synth, cmd_train, gradcheck_tolerance, EvalTarget};
use sekit_cli::{load_config, RunConfig};

const SR: u32 = 16000;

type Outcome = Result<String, String>;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn config(name: &str, overrides: &[&str]) -> RunConfig {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    load_config(Some(&root().join("configs").join(name)), &o).expect("shipped config loads")
}

fn noise(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn wave(v: Vec<f64>) -> Waveform {
    Waveform::new(v, SR).unwrap()
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn stft_round_trip() -> Outcome {
    let engine = StftEngine::new(StftConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let x = wave(noise(&mut rng, SR as usize));
        let y = engine.istft(&engine.stft(&x).unwrap()).unwrap();
        worst = worst.max(max_abs(x.samples(), y.samples()));
    }
    let dt = t0.elapsed();
    check(
        worst < 1e-6 && dt < Duration::from_secs(10),
        format!("max error {worst:.2e} over 100 one-second signals in {:.2} s", dt.as_secs_f64()),
    )
}

fn projection() -> Outcome {
    let cfg = StftConfig::default();
    let engine = StftEngine::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let len = SR as usize;
    let frames = cfg.n_frames(len);
    let (mut idem, mut fixed): (f64, f64) = (0.0, 0.0);
    for _ in 0..50 {
        let bins = Array2::from_shape_simple_fn((frames, cfg.n_bins()), || {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        let s = Spectrogram::new(bins, cfg, len, SR).unwrap();
        let p = engine.consistency_project(&s).unwrap();
        idem = idem.max(engine.consistency_project(&p).unwrap().max_abs_diff(&p));

        let consistent = engine.stft(&wave(noise(&mut rng, len))).unwrap();
        fixed = fixed.max(engine.consistency_project(&consistent).unwrap().max_abs_diff(&consistent));
    }
    check(
        idem < 1e-6 && fixed < 1e-6,
        format!("|P(P(S)) - P(S)| {idem:.2e}, |P(S) - S| on consistent S {fixed:.2e}"),
    )
}

/// Magnitude of bin `k` of frame `t`, straight from the definition.
fn dft_bin(x: &[f64], cfg: &StftConfig, t: usize, k: usize) -> f64 {
    let start = t * cfg.hop - cfg.n_fft / 2;
    let mut acc = Complex64::new(0.0, 0.0);
    for n in 0..cfg.n_fft {
        let w = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / cfg.n_fft as f64).cos();
        let ang = -2.0 * std::f64::consts::PI * (k * n) as f64 / cfg.n_fft as f64;
        acc += Complex64::from_polar(w * x[start + n], ang);
    }
    acc.norm()
}

fn pcs_identity_and_closed_form() -> Outcome {
    let cfg = StftConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = wave(noise(&mut rng, SR as usize).iter().map(|v| 0.3 * v).collect());
    let y = apply_pcs(&x, &BandImportanceWeights::ones(cfg.n_bins()), &cfg).unwrap();
    let ident = max_abs(x.samples(), y.samples());

    // 1 kHz sits exactly on bin 25; only that bin's band is doubled.
    let k = 25;
    let tone = wave((0..SR as usize)
        .map(|n| 0.5 * (2.0 * std::f64::consts::PI * 1000.0 * n as f64 / SR as f64).sin())
        .collect());
    let w = BandTable::from_text("0 1000 1\n1000 1040 2\n1040 8000 1\n")
        .unwrap()
        .weights(&cfg, SR)
        .unwrap();
    let spec = StftEngine::new(cfg).unwrap().stft(&tone).unwrap();
    let stretched = decompress(&pcs_stretch(&pcs_compress(&spec), &w).unwrap()).unwrap();
    let mut err: f64 = 0.0;
    for t in 5..spec.n_frames() - 5 {
        let m = dft_bin(tone.samples(), &cfg, t, k);
        err = err.max((stretched.values()[[t, k]] - ((1.0 + m).powi(2) - 1.0)).abs());
    }
    check(
        ident < 1e-6 && err < 1e-4,
        format!("W=1 max error {ident:.2e}; W=2 bin error {err:.2e} against (1+x)^2-1"),
    )
}

fn loss_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let len = 1600;
    let clean = wave(noise(&mut rng, len));
    let noisy = wave(clean.samples().iter().map(|c| c + 0.5 * rng.random_range(-1.0..1.0)).collect());
    let perfect = wsdr_loss(&noisy, &clean, &clean).unwrap();

    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..1000 {
        let v = wsdr_loss(&wave(noise(&mut rng, len)), &wave(noise(&mut rng, len)), &wave(noise(&mut rng, len))).unwrap();
        lo = lo.min(v);
        hi = hi.max(v);
    }

    let engine = StftEngine::new(StftConfig::default()).unwrap();
    let mut cs_gap: f64 = 0.0;
    for _ in 0..20 {
        let e = engine.stft(&wave(noise(&mut rng, len))).unwrap();
        let c = engine.stft(&wave(noise(&mut rng, len))).unwrap();
        let plain = mag_l1_loss(&compress(&e.magnitude()).unwrap(), &compress(&c.magnitude()).unwrap()).unwrap();
        cs_gap = cs_gap.max((cs_mag_l1_loss(&e, &c).unwrap() - plain).abs());
    }
    check(
        perfect == -1.0 && lo >= -1.0 && hi <= 1.0 && cs_gap < 1e-6,
        format!("wsdr(clean) = {perfect}; wsdr range [{lo:.3}, {hi:.3}] on 1000 triples; cs vs plain gap {cs_gap:.2e}"),
    )
}

fn gradients() -> Outcome {
    let cfg = config("default.toml", &[]);
    let t0 = Instant::now();
    let mut worst = Vec::new();
    let mut ok = true;
    let (mut sampled, mut under) = (0, 0);
    for seed in 0..3 {
        for r in cmd_gradcheck(&cfg, 100, seed).map_err(|e| e.to_string())? {
            ok &= r.checked >= 100 && r.max_rel_err < gradcheck_tolerance(&r);
            sampled += r.checked;
            under += r.below_floor;
            if seed == 0 {
                worst.push((r.name.clone(), r.max_rel_err));
            } else if let Some(w) = worst.iter_mut().find(|(n, _)| *n == r.name) {
                w.1 = w.1.max(r.max_rel_err);
            }
        }
    }
    let dt = t0.elapsed();
    let summary: Vec<String> = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    check(
        ok && dt < Duration::from_secs(120),
        format!(
            "3 fixtures x 100 coords; {}; {under} of {sampled} nonzero samples under the 1e-5 floor; {:.1} s",
            summary.join(", "),
            dt.as_secs_f64()
        ),
    )
}

fn oracle_dominance(dir: &Path) -> Outcome {
    let cfg = config("default.toml", &["synth.n_items=50", "synth.seed=1"]);
    let out = dir.join("oracle");
    cmd_synth(&cfg, &out).map_err(|e| e.to_string())?;
    let m = out.join("manifest.jsonl");
    let noisy = cmd_eval(&cfg, &m, EvalTarget::Identity, None).map_err(|e| e.to_string())?;
    let oracle = cmd_eval(&cfg, &m, EvalTarget::Oracle, None).map_err(|e| e.to_string())?;
    let improved = oracle
        .rows
        .iter()
        .filter(|r| noisy.row(&r.id).is_some_and(|n| r.si_sdr_db > n.si_sdr_db))
        .count();
    let (sn, _, _) = noisy.means().ok_or("no noisy scores")?;
    let (so, _, _) = oracle.means().ok_or("no oracle scores")?;
    check(
        noisy.is_complete() && oracle.is_complete() && improved == 50 && so - sn >= 0.05,
        format!("SI-SDR improved on {improved}/50 items; STOI {sn:.4} -> {so:.4}"),
    )
}

fn toy_training(dir: &Path) -> Outcome {
    let cfg = config("toy.toml", &[]);
    let train_m = dir.join("toy/train");
    cmd_synth(&cfg, &train_m).map_err(|e| e.to_string())?;
    let held_spec = SynthSpec {
        n_items: cfg.ablate.heldout_items,
        seed: cfg.ablate.heldout_seed,
        id_prefix: "heldout".into(),
        ..cfg.synth.clone()
    };
    let held = dir.join("toy/heldout");
    generate_synthetic(&held_spec, &held).map_err(|e| e.to_string())?;
    let held = held.join("manifest.jsonl");

    let mut runs = Vec::new();
    let mut slowest = Duration::ZERO;
    for name in ["a", "b"] {
        let out = dir.join("toy").join(name);
        let t0 = Instant::now();
        cmd_train(&cfg, &train_m.join("manifest.jsonl"), &out, None).map_err(|e| e.to_string())?;
        slowest = slowest.max(t0.elapsed());
        runs.push(out);
    }
    let identical = ["train_log.csv", "train_steps.csv", "model.bin"]
        .iter()
        .all(|f| std::fs::read(runs[0].join(f)).ok() == std::fs::read(runs[1].join(f)).ok());

    let base = cmd_eval(&cfg, &held, EvalTarget::Identity, None).map_err(|e| e.to_string())?;
    let enh = cmd_eval(&cfg, &held, EvalTarget::Model(&runs[0].join("model.bin")), None)
        .map_err(|e| e.to_string())?;
    let (s0, d0, _) = base.means().ok_or("no noisy scores")?;
    let (s1, d1, _) = enh.means().ok_or("no enhanced scores")?;
    check(
        enh.is_complete() && d1 - d0 >= 3.0 && s1 >= s0 && identical && slowest < Duration::from_secs(900),
        format!(
            "SI-SDR gain {:.2} dB, STOI {s0:.4} -> {s1:.4}, identical reruns {identical}, {:.0} s per run",
            d1 - d0,
            slowest.as_secs_f64()
        ),
    )
}

fn ablation(dir: &Path) -> Outcome {
    let cfg = config("toy.toml", &["synth.n_items=100", "train.epochs=30"]);
    let out = dir.join("ablate");
    let table = cmd_ablate(&cfg, None, None, &out).map_err(|e| e.to_string())?;
    let csv = std::fs::read_to_string(out.join("ablation.csv")).map_err(|e| e.to_string())?;
    let stoi = |m| table.row(m).and_then(|r| r.means()).map(|(s, _, _)| s);
    let (both, none) = (
        stoi(sekit::PcsMode::BOTH).ok_or("missing `both` row")?,
        stoi(sekit::PcsMode::NONE).ok_or("missing `none` row")?,
    );
    check(
        table.is_complete() && csv.lines().count() == 5 && both >= none,
        format!("4-row table written; STOI both {both:.4} vs none {none:.4}"),
    )
}

fn golden_signal() -> Waveform {
    // Integer LCG scaled by powers of two, so the samples are the same
    // everywhere.
    let mut state: u32 = 12345;
    let v = (0..4000)
        .map(|_| {
            state = state.wrapping_mul(1664525).wrapping_add(1013904223);
            (state as i32) as f64 / 2147483648.0 * 0.9
        })
        .collect();
    wave(v)
}

fn golden_model() -> EstimatorModel {
    let arch = Architecture {
        n_bins: 201,
        context: 1,
        ext_dim: 0,
        hidden: vec![16],
        mask_domain: MaskDomain::Compressed,
        sample_rate: SR,
    };
    EstimatorModel::new(arch, 2024).unwrap()
}

fn bit_exactness() -> Outcome {
    let model = golden_model();
    let bytes = encode_model(&model);
    let back = decode_model(&bytes).map_err(|e| e.to_string())?;
    let same_params = model.flatten().iter().map(|v| v.to_bits()).eq(back.flatten().iter().map(|v| v.to_bits()));
    let reencoded = encode_model(&back) == bytes;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = wave(noise(&mut rng, SR as usize).iter().map(|v| 0.99 * v).collect());
    let pcm = decode_wav(&encode_wav(&x, WavFormat::Pcm16).unwrap(), Some(SR)).unwrap();
    let q_err = max_abs(x.samples(), pcm.samples());

    let sig = golden_signal();
    let files = [
        ("golden_pcm16.wav", encode_wav(&sig, WavFormat::Pcm16).unwrap()),
        ("golden_f32.wav", encode_wav(&sig, WavFormat::Float32).unwrap()),
        ("golden_model.bin", bytes.clone()),
    ];
    if std::env::var_os("SEKIT_BLESS").is_some() {
        std::fs::create_dir_all(fixtures()).unwrap();
        for (name, data) in &files {
            std::fs::write(fixtures().join(name), data).unwrap();
        }
    }
    let mut stale = Vec::new();
    for (name, data) in &files {
        if std::fs::read(fixtures().join(name)).ok().as_ref() != Some(data) {
            stale.push(*name);
        }
    }
    // The stored model must load to the same parameters.
    let stored = std::fs::read(fixtures().join("golden_model.bin"))
        .ok()
        .and_then(|b| decode_model(&b).ok())
        .is_some_and(|m| m == model);
    check(
        same_params && reencoded && q_err <= 1.0 / 32768.0 && stale.is_empty() && stored,
        format!(
            "model round trip exact {}; pcm16 max error {:.3} steps; golden mismatches {:?}",
            same_params && reencoded,
            q_err * 32768.0,
            stale
        ),
    )
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("stft round trip", Box::new(stft_round_trip)),
        ("consistency projection", Box::new(projection)),
        ("pcs identity and closed form", Box::new(pcs_identity_and_closed_form)),
        ("loss invariants", Box::new(loss_invariants)),
        ("gradient checks", Box::new(gradients)),
        ("oracle mask dominance", Box::new(|| oracle_dominance(d))),
        ("toy training", Box::new(|| toy_training(d))),
        ("pcs ablation", Box::new(|| ablation(d))),
        ("bit exactness", Box::new(bit_exactness)),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(run))
            .unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS {} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {} {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
