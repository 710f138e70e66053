//! `mdss` — synthetic data, training runs and reports.
//!
//! Exit codes: 0 success, 2 argument/config error, 3 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use mdss::data::{write_manifest, DatasetSpec};
use mdss::report::{write_report, ReportKind};
use mdss::synth::generate_synthetic_dataset;
use mdss::trainer::{load_training_data, train_with, Method, TrainOptions, TrainerConfig};
use mdss::Error;

#[derive(Parser)]
#[command(name = "mdss", version, about = "Dual mean-teacher keypoint training with uncertainty-gated pseudo-labels")]
struct Cli {
    /// Worker threads for candidate generation; 1 gives bit-reproducible runs
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset: PNG images plus train.json / test.json manifests
    Synth {
        /// Keypoints per figure
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long, default_value_t = 200)]
        n_train: usize,
        #[arg(long, default_value_t = 50)]
        n_test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
        /// Mirrored keypoint pairs as `a-b,c-d`; defaults to consecutive pairs
        #[arg(long)]
        flip_pairs: Option<String>,
        /// Keypoints whose distance normalises PCK, as `a-b`
        #[arg(long, default_value = "0-1")]
        pck_pair: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and write a run directory
    Train {
        /// JSON config layered over the defaults; relative manifest paths
        /// resolve against its directory
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dotted `key=value` override, repeatable (e.g. `lambda_a=0`)
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Resume from a checkpoint written by an earlier run
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summaries and plots over finished run directories
    Report {
        #[arg(long)]
        kind: ReportKind,
        /// Output directory; defaults to the first run directory
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn parse_pair(s: &str) -> Result<[usize; 2], Error> {
    let bad = || Error::Argument(format!("expected a pair like `0-1`, got `{s}`"));
    let (a, b) = s.split_once('-').ok_or_else(bad)?;
    Ok([a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?])
}

fn synth(
    k: usize,
    n_train: usize,
    n_test: usize,
    seed: u64,
    image_size: usize,
    flip_pairs: Option<&str>,
    pck_pair: &str,
    out: &Path,
) -> Result<(), Error> {
    let flip_pairs = match flip_pairs {
        Some(s) if !s.trim().is_empty() => s.split(',').map(parse_pair).collect::<Result<Vec<_>, _>>()?,
        Some(_) => Vec::new(),
        None => (0..k / 2).map(|i| [2 * i, 2 * i + 1]).collect(),
    };
    let spec = DatasetSpec {
        k,
        image_size,
        flip_pairs,
        pck_reference_pair: parse_pair(pck_pair)?,
    };
    let d = generate_synthetic_dataset(&spec, n_train, n_test, seed)?;
    let train = write_manifest(out, "train.json", &spec, &d.labeled)?;
    let test = write_manifest(out, "test.json", &spec, &d.test)?;
    info!("wrote {} and {}", train.display(), test.display());
    Ok(())
}

fn train(
    config: Option<&Path>,
    overrides: &[String],
    method: Option<Method>,
    epochs: Option<usize>,
    resume: Option<PathBuf>,
    out: &Path,
) -> Result<(), Error> {
    let (cfg, base) = match config {
        Some(p) => (TrainerConfig::load(p)?, p.parent().map(Path::to_path_buf).unwrap_or_default()),
        None => (TrainerConfig::default(), PathBuf::from(".")),
    };
    let mut cfg = cfg.with_overrides(overrides)?;
    if let Some(m) = method {
        cfg.method = m;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    let data = load_training_data(&cfg.data, &base)?;
    info!(
        "{} labeled, {} unlabeled, {} test samples",
        data.labeled.len(),
        data.unlabeled.len(),
        data.test.len()
    );
    let outcome = train_with(
        &cfg,
        &data,
        &TrainOptions {
            run_dir: Some(out.to_path_buf()),
            resume_from: resume,
        },
    )?;
    if let Some(r) = outcome.reports.last() {
        info!(
            "finished epoch {}: test PCK {:?}, test error {:?}",
            r.epoch, r.test_pck, r.test_error
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Argument(format!("cannot configure {n} threads: {e}")))?;
    }
    match cli.command {
        Command::Synth {
            k,
            n_train,
            n_test,
            seed,
            image_size,
            flip_pairs,
            pck_pair,
            out,
        } => synth(k, n_train, n_test, seed, image_size, flip_pairs.as_deref(), &pck_pair, &out),
        Command::Train {
            config,
            overrides,
            method,
            epochs,
            resume,
            out,
        } => train(config.as_deref(), &overrides, method, epochs, resume, &out),
        Command::Report { kind, out, runs } => {
            let out = out.unwrap_or_else(|| runs[0].clone());
            for f in write_report(kind, &runs, &out)? {
                info!("wrote {}", f.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // clap exits with 2 on malformed command lines
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 3 })
        }
    }
}
