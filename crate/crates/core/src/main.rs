use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use poc_lab::io::{report, run_experiment, sweep_config, ExperimentConfig, Pipeline};
use poc_lab::{Error, Result};

/// Mean-field coupling experiments for two-layer networks.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment config.
    config: PathBuf,
    /// Use this value for every seed and write into `<output_dir>/seed<N>`.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline named in the config.
    Run(RunArgs),
    /// Coupled widths against a mean-field proxy.
    Couple(RunArgs),
    /// Flow with Hessian and stability-matrix diagnostics switched on.
    Diagnose(RunArgs),
    /// Escape-time table of the reduced alignment model.
    Reduce {
        /// Comma-separated dimensions.
        #[arg(long, value_delimiter = ',', required = true)]
        d: Vec<usize>,
        #[arg(long, default_value_t = 4)]
        kstar: usize,
        #[arg(long, default_value_t = 0.3)]
        delta: f64,
        #[arg(long, default_value = "reduce_out")]
        out: PathBuf,
    },
    /// Coupled run followed by the potential and its lemma checks.
    Potential(RunArgs),
    /// Merge seed directories into a mean ± range summary.
    Report {
        runs: Vec<PathBuf>,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

fn load(args: &RunArgs, pipeline: Option<Pipeline>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(p) = pipeline {
        cfg.pipeline = p;
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        cfg = cfg.with_seed(seed);
    }
    Ok(cfg)
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("POC_LAB_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("POC_LAB_THREADS = {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    configure_threads()?;
    let cfg = match &cli.command {
        Command::Run(a) => load(a, None)?,
        Command::Couple(a) => load(a, Some(Pipeline::Couple))?,
        Command::Potential(a) => load(a, Some(Pipeline::Potential))?,
        Command::Diagnose(a) => {
            let mut cfg = load(a, Some(Pipeline::Flow))?;
            cfg.diagnostics.hessians = true;
            cfg.diagnostics.j_stats = true;
            cfg
        }
        Command::Reduce { d, kstar, delta, out } => sweep_config(d, *kstar, *delta, out)?,
        Command::Report { runs, json } => {
            let r = report(runs)?;
            print!("{r}");
            if let Some(path) = json {
                std::fs::write(path, serde_json::to_string_pretty(&r)?)?;
            }
            return Ok(());
        }
    };
    let outcome = run_experiment(&cfg)?;
    println!(
        "{}: {} files in {}",
        cfg.name,
        outcome.manifest.files.len() + 1,
        outcome.dir.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::NumericalAbort { dump: Some(p), .. } = &e {
                eprintln!("state dumped to {}", p.display());
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
