//! `pmspace`: batch driver for fitting, predicting and validating monthly
//! particulate matter models.

mod commands;
mod config;
mod manifest;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use config::RunConfig;
use manifest::RunContext;

#[derive(Parser, Debug)]
#[command(name = "pmspace", version, about = "Spatio-temporal models for monthly particulate matter")]
struct Cli {
    /// TOML run config, or a run manifest to replay.
    #[arg(short, long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set model.surface_knots=80`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Replace `output_dir` from the config.
    #[arg(short, long, global = true, value_name = "DIR")]
    output_dir: Option<PathBuf>,

    /// Model file, replacing `data.model`.
    #[arg(short, long, global = true, value_name = "FILE")]
    model: Option<PathBuf>,

    /// Worker threads; defaults to all cores.
    #[arg(short = 'j', long, global = true)]
    threads: Option<usize>,

    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    /// Only warnings and errors.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Aggregate daily monitor records to complete site-months.
    Ingest,
    /// Fit the two-stage model.
    Fit,
    /// Monthly predictions at sites or listed locations.
    Predict,
    /// Long-term mean predictions over the configured months.
    PredictLongterm,
    /// Fit the PM2.5/PM10 ratio model against a fitted PM10 model.
    RatioFit,
    /// PM2.5 predictions from the ratio model.
    RatioPredict,
    /// Fit seasonal humidity curves for the visibility proxy.
    VisCalibrate,
    /// Smooth daily extinction and average it to months.
    VisSmooth,
    /// Site-level cross-validation.
    Cv,
    /// Residual semivariogram and autocorrelation.
    Diagnose,
    /// Generate a synthetic dataset with known truth.
    Synth,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::Fit => "fit",
            Command::Predict => "predict",
            Command::PredictLongterm => "predict-longterm",
            Command::RatioFit => "ratio-fit",
            Command::RatioPredict => "ratio-predict",
            Command::VisCalibrate => "vis-calibrate",
            Command::VisSmooth => "vis-smooth",
            Command::Cv => "cv",
            Command::Diagnose => "diagnose",
            Command::Synth => "synth",
        }
    }
}

fn init_logging(verbose: u8, quiet: bool) {
    let level = match (quiet, verbose) {
        (true, _) => log::LevelFilter::Warn,
        (false, 0) => log::LevelFilter::Info,
        (false, 1) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_env("PMSPACE_LOG")
        .format(|buf, record| writeln!(buf, "[{}] {}", record.level(), record.args()))
        .target(env_logger::Target::Stderr)
        .init();
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("cannot configure the thread pool")?;
    }
    let path = cli
        .config
        .context("no config given; pass --config <FILE>")?;
    let (mut cfg, _) = RunConfig::load(&path, &cli.overrides)?;
    if let Some(dir) = cli.output_dir {
        cfg.output_dir = dir;
    }
    if let Some(m) = cli.model {
        match cli.command {
            Command::RatioPredict if m.extension().is_some_and(|e| e == "pmspace") && is_ratio(&m) => {
                cfg.data.ratio_model = Some(m)
            }
            _ => cfg.data.model = Some(m),
        }
    }
    let started = manifest::now();
    let mut ctx = RunContext::new(cfg)?;
    let name = cli.command.name();
    log::info!("{name}: writing to {}", ctx.cfg.output_dir.display());
    match cli.command {
        Command::Ingest => commands::ingest(&mut ctx),
        Command::Fit => commands::fit(&mut ctx),
        Command::Predict => commands::predict(&mut ctx),
        Command::PredictLongterm => commands::predict_longterm(&mut ctx),
        Command::RatioFit => commands::ratio_fit(&mut ctx),
        Command::RatioPredict => commands::ratio_predict(&mut ctx),
        Command::VisCalibrate => commands::vis_calibrate(&mut ctx),
        Command::VisSmooth => commands::vis_smooth(&mut ctx),
        Command::Cv => commands::cv(&mut ctx),
        Command::Diagnose => commands::diagnose(&mut ctx),
        Command::Synth => commands::synth(&mut ctx),
    }?;
    for p in ctx.outputs() {
        log::info!("wrote {}", p.display());
    }
    let m = ctx.finish(name, started)?;
    log::debug!("manifest {}", m.display());
    Ok(())
}

/// Whether a model file holds a ratio model, judged by its manifest.
fn is_ratio(path: &std::path::Path) -> bool {
    std::fs::File::open(path)
        .ok()
        .and_then(|mut f| pmspace::stm::read_manifest(&mut f).ok())
        .is_some_and(|(kind, _)| kind == pmspace::stm::ModelKind::Ratio)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose, cli.quiet);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(1)
        }
    }
}
