use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vugrade::{
    run_crossval, run_evaluate, run_predict, run_single, run_split, run_synth, run_train,
    write_error_record, ErrorRecord, RunConfig,
};
use vugrade_core::backend::BackendKind;

#[derive(Parser)]
#[command(
    name = "vugrade",
    version,
    about = "Two-step mSASSS grading of vertebral-unit crops"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

/// Flags shared by every subcommand. Each one overrides the matching
/// field of the `--config` file.
#[derive(Args, Clone, Debug)]
struct Common {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Output directory; relative paths are resolved against
    /// $VUGRADE_OUTPUT_ROOT when it is set.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Stage-1 gate threshold.
    #[arg(long, global = true)]
    tau: Option<f64>,
    #[arg(long, global = true, value_parser = parse_backend)]
    backend: Option<BackendKind>,
    /// Stratify folds by each patient's highest grade.
    #[arg(long, global = true)]
    stratify: bool,
    /// Directory image paths are relative to (default: the manifest's).
    #[arg(long, global = true)]
    image_root: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (images, manifest, provenance).
    Synth,
    /// Assign patients to folds.
    Split,
    /// Train a cascade; with --test-manifest also evaluate it (cross-study).
    Train {
        #[arg(long)]
        test_manifest: Option<PathBuf>,
    },
    /// Predict every VU of a manifest with a saved cascade.
    Predict {
        #[arg(long)]
        model: PathBuf,
    },
    /// Score a predictions CSV against the manifest's labels.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
    },
    /// Patient-level k-fold cross-validation.
    Crossval,
}

fn parse_backend(s: &str) -> Result<BackendKind, String> {
    s.parse().map_err(|e: vugrade_core::Error| e.to_string())
}

fn resolve(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_json_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(m) = &common.manifest {
        cfg.manifest = Some(m.clone());
    }
    if let Some(o) = &common.out {
        cfg.out = Some(o.clone());
    }
    if let Some(k) = common.k {
        cfg.k = k;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.synth.seed = seed;
    }
    if let Some(tau) = common.tau {
        cfg.tau = tau;
    }
    if let Some(b) = common.backend {
        cfg.backend = b;
    }
    if common.stratify {
        cfg.stratify = true;
    }
    if let Some(root) = &common.image_root {
        cfg.image_root = Some(root.clone());
    }
    Ok(cfg)
}

fn run(command: &Command, cfg: &mut RunConfig, out: &Path) -> anyhow::Result<()> {
    match command {
        Command::Synth => {
            let records = run_synth(cfg, out)?;
            println!("wrote {} VUs to {}", records.len(), out.display());
        }
        Command::Split => {
            let a = run_split(cfg, out)?;
            println!("fold sizes (patients): {:?}", a.fold_sizes());
        }
        Command::Train { test_manifest } => {
            if let Some(t) = test_manifest {
                cfg.test_manifest = Some(t.clone());
            }
            if cfg.test_manifest.is_some() {
                let (_, report) = run_single(cfg, out)?;
                print!("{}", report.to_text_table());
            } else {
                run_train(cfg, out)?;
                println!("model written to {}", out.join("model").display());
            }
        }
        Command::Predict { model } => {
            let rows = run_predict(cfg, model, out)?;
            println!("wrote {} corner predictions", rows.len());
        }
        Command::Evaluate { predictions } => {
            let report = run_evaluate(cfg, predictions, out)?;
            print!("{}", report.to_text_table());
        }
        Command::Crossval => {
            let outcome = run_crossval(cfg, out)?;
            print!("{}", outcome.table.to_text_table());
        }
    }
    Ok(())
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Synth => "synth",
        Command::Split => "split",
        Command::Train { .. } => "train",
        Command::Predict { .. } => "predict",
        Command::Evaluate { .. } => "evaluate",
        Command::Crossval => "crossval",
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let common = cli.common.clone();
    let name = command_name(&cli.command);

    let mut out_dir = None;
    let result = resolve(&common).and_then(|mut cfg| {
        let out = cfg.resolve_out(name)?;
        out_dir = Some(out.clone());
        run(&cli.command, &mut cfg, &out)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let record = ErrorRecord::from_error(name, &err);
            eprintln!("error: {err:#}");
            eprintln!("{}", serde_json::to_string(&record).unwrap_or_default());
            if let Some(dir) = out_dir {
                if let Err(e) = write_error_record(&dir, &record) {
                    eprintln!("could not write error record: {e:#}");
                }
            }
            ExitCode::FAILURE
        }
    }
}
