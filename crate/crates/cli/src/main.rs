use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sekit_cli::ablate::cmd_ablate;
use sekit_cli::commands::{
    cmd_enhance, cmd_eval, cmd_gradcheck, cmd_pcs, cmd_synth, cmd_train, gradcheck_tolerance,
    EnhanceTarget, EvalTarget,
};
use sekit_cli::{load_config, CliError, CliResult};

#[derive(Parser)]
#[command(name = "sekit", version, about = "Speech enhancement with perceptual contrast stretching")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config value, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Apply perceptual contrast stretching to a corpus.
    Pcs {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// both, input, target or none (overrides pcs.mode).
        #[arg(long)]
        mode: Option<String>,
    },
    /// Generate a synthetic tone-in-noise corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_items: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the mask estimator.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Enhance one file or every noisy file in a manifest.
    Enhance {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, requires = "output", conflicts_with = "manifest")]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        /// External per-frame features for --input.
        #[arg(long, requires = "input")]
        ext: Option<PathBuf>,
        #[arg(long, requires = "out")]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a manifest with STOI, SI-SDR and segmental SNR.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, group = "target")]
        model: Option<PathBuf>,
        #[arg(long, group = "target")]
        oracle: bool,
        #[arg(long, group = "target")]
        identity: bool,
        /// CSV report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score every PCS mode and write a comparison table.
    Ablate {
        #[arg(long)]
        train_manifest: Option<PathBuf>,
        #[arg(long)]
        test_manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        coords: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    let mut overrides = cli.overrides.clone();
    match &cli.command {
        Command::Pcs { mode: Some(m), .. } => overrides.push(format!("pcs.mode={m:?}")),
        Command::Synth { n_items, seed, .. } => {
            overrides.extend(n_items.map(|n| format!("synth.n_items={n}")));
            overrides.extend(seed.map(|s| format!("synth.seed={s}")));
        }
        Command::Train { epochs: Some(e), .. } => overrides.push(format!("train.epochs={e}")),
        _ => {}
    }
    let cfg = load_config(cli.config.as_deref(), &overrides)?;
    log::info!("effective config:\n{}", cfg.to_toml());

    match cli.command {
        Command::Pcs { manifest, out, .. } => cmd_pcs(&cfg, &manifest, &out).map(|_| ()),
        Command::Synth { out, .. } => cmd_synth(&cfg, &out).map(|_| ()),
        Command::Train { manifest, out, resume, .. } => {
            cmd_train(&cfg, &manifest, &out, resume.as_deref()).map(|o| println!("{}", o.model_path.display()))
        }
        Command::Enhance { model, input, output, ext, manifest, out } => {
            let target = match (&input, &output, &manifest, &out) {
                (Some(i), Some(o), None, _) => EnhanceTarget::File { input: i, output: o, ext: ext.as_deref() },
                (None, _, Some(m), Some(o)) => EnhanceTarget::Batch { manifest: m, out: o },
                _ => {
                    return Err(CliError::Config(
                        "enhance needs either --input and --output or --manifest and --out".into(),
                    ))
                }
            };
            cmd_enhance(&cfg, &model, target)
        }
        Command::Eval { manifest, model, oracle, identity, out } => {
            let target = match (model.as_deref(), oracle, identity) {
                (Some(p), false, false) => EvalTarget::Model(p),
                (None, true, false) => EvalTarget::Oracle,
                (None, false, true) => EvalTarget::Identity,
                _ => return Err(CliError::Config("eval needs one of --model, --oracle or --identity".into())),
            };
            let report = cmd_eval(&cfg, &manifest, target, out.as_deref())?;
            if out.is_none() {
                print!("{}", report.to_csv());
            } else if let Some((s, d, g)) = report.means() {
                println!("mean stoi {s:.4}  si-sdr {d:.2} dB  seg-snr {g:.2} dB");
            }
            if report.is_complete() {
                Ok(())
            } else {
                let failures: Vec<_> = report.failures.iter().map(|f| (f.id.clone(), f.message.clone())).collect();
                Err(CliError::Partial {
                    failed: failures.len(),
                    total: report.rows.len() + failures.len(),
                    summary: failures.iter().map(|(i, m)| format!("{i}: {m}")).collect::<Vec<_>>().join("; "),
                })
            }
        }
        Command::Ablate { train_manifest, test_manifest, out } => {
            let table = cmd_ablate(&cfg, train_manifest.as_deref(), test_manifest.as_deref(), &out)?;
            print!("{}", table.to_csv());
            Ok(())
        }
        Command::Gradcheck { coords, seed } => {
            let results = cmd_gradcheck(&cfg, coords, seed)?;
            let mut ok = true;
            for r in &results {
                let tol = gradcheck_tolerance(r);
                let pass = r.max_rel_err < tol;
                ok &= pass;
                println!(
                    "{:<18} {:>4} coords ({:>2} under floor)  max rel err {:.3e}  (tol {tol:.0e})  {}",
                    r.name,
                    r.checked,
                    r.below_floor,
                    r.max_rel_err,
                    if pass { "ok" } else { "FAIL" }
                );
            }
            if ok {
                Ok(())
            } else {
                Err(CliError::Runtime("gradient check failed".into()))
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SEKIT_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
