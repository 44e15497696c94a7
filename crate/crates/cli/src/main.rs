use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ispshield_core::workbench::{
    parse_config, run_experiment, validate_config, ExperimentConfig, ExperimentKind,
};

/// Privacy-preserving camera ISP experiments.
#[derive(Parser)]
#[command(name = "ispshield", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Capture images through ISP parameters and score them against raw.
    Simulate(RunArgs),
    /// Adversarially optimize ISP parameters.
    TrainIsp(RunArgs),
    /// Train the image enhancer on captured scenes.
    TrainEnhancer(RunArgs),
    /// Face identification accuracy on raw and captured queries.
    EvalAfr(RunArgs),
    /// Person detection AP on raw and captured scenes.
    EvalUtility(RunArgs),
    /// Full-reference image quality of two image sets.
    EvalIqa(RunArgs),
    /// Re-enrollment, re-training and restoration attacks.
    Attack(RunArgs),
    /// Privacy-utility sweep over baselines and utility weights.
    Sweep(RunArgs),
    /// Validate and re-export an ISP parameter file.
    ExportParams(RunArgs),
    /// Color inversion analysis.
    Preliminary(RunArgs),
    /// Resolve a configuration and print it without running anything.
    Validate(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment file (TOML). Relative paths inside it are resolved against
    /// its directory.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `key=value` with a dotted key, e.g. `train.omega=0.5`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn load(kind: Option<ExperimentKind>, args: &RunArgs) -> Result<ExperimentConfig> {
    let mut overrides = Vec::new();
    if let Some(k) = kind {
        overrides.push(format!("kind=\"{k}\""));
    }
    if let Some(s) = args.seed {
        overrides.push(format!("seed={s}"));
    }
    overrides.extend(args.overrides.iter().cloned());
    let mut config = match &args.config {
        Some(path) => validate_config(path, &overrides)?,
        None => {
            if kind.is_none() {
                bail!("validate needs --config");
            }
            let config = parse_config("", Path::new("."), &overrides)?;
            log::info!("resolved configuration:\n{}", config.to_toml()?);
            config
        }
    };
    if let Some(out) = &args.out {
        config.output = out.clone();
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    let (kind, args) = match &cli.command {
        Command::Simulate(a) => (Some(ExperimentKind::Simulate), a),
        Command::TrainIsp(a) => (Some(ExperimentKind::TrainIsp), a),
        Command::TrainEnhancer(a) => (Some(ExperimentKind::TrainEnhancer), a),
        Command::EvalAfr(a) => (Some(ExperimentKind::EvalAfr), a),
        Command::EvalUtility(a) => (Some(ExperimentKind::EvalUtility), a),
        Command::EvalIqa(a) => (Some(ExperimentKind::EvalIqa), a),
        Command::Attack(a) => (Some(ExperimentKind::Attack), a),
        Command::Sweep(a) => (Some(ExperimentKind::Sweep), a),
        Command::ExportParams(a) => (Some(ExperimentKind::ExportParams), a),
        Command::Preliminary(a) => (Some(ExperimentKind::Preliminary), a),
        Command::Validate(a) => (None, a),
    };
    let config = load(kind, args)?;
    if kind.is_none() {
        print!("{}", config.to_toml()?);
        return Ok(());
    }
    let summary = run_experiment(&config)
        .with_context(|| format!("{} experiment failed", config.kind))?;
    println!(
        "experiment {} ({}) -> {}",
        summary.manifest.experiment_id,
        config.kind,
        summary.output.display()
    );
    for r in &summary.rows {
        println!("{:<14} {:<22} {:.6}", r.method, r.metric, r.value);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
