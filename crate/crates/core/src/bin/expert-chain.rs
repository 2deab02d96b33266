use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use expert_chain::harness::{
    ablate_denoising, ablate_long, ablate_te, recompute_run_metrics, run_experiment, ExperimentConfig,
};
use expert_chain::metrics::MetricReport;

/// Overrides the output location: results go to `$EXPERT_CHAIN_OUTPUT_ROOT/<name>`.
const OUTPUT_ROOT_ENV: &str = "EXPERT_CHAIN_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "expert-chain", version, about = "Seeded multi-expert diffusion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write per-run and aggregate results.
    Run {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep the re-noising depth.
    AblateTe {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "50,100,200,300,500")]
        te: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare all denoising modes.
    AblateDenoising {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Switch each long-generation strategy off in turn.
    AblateLong {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute the metrics of a written run directory.
    Metrics { run_dir: PathBuf },
}

fn output_dir(cfg: &ExperimentConfig, out: Option<PathBuf>) -> PathBuf {
    if let Some(root) = std::env::var_os(OUTPUT_ROOT_ENV) {
        return Path::new(&root).join(&cfg.name);
    }
    out.or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| Path::new("out").join(&cfg.name))
}

fn load(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, out } => {
            let cfg = load(&config)?;
            let dir = output_dir(&cfg, out);
            let exp = run_experiment(&cfg)?;
            exp.write(&dir).with_context(|| format!("writing {}", dir.display()))?;
            print!("{}", exp.aggregate_csv()?);
        }
        Command::AblateTe { config, te, out } => {
            let cfg = load(&config)?;
            let dir = output_dir(&cfg, out);
            let res = ablate_te(&cfg, &te, Some(&dir))?;
            print!("{}{}", res.table.to_csv(), res.trend_csv());
        }
        Command::AblateDenoising { config, out } => {
            let cfg = load(&config)?;
            let dir = output_dir(&cfg, out);
            print!("{}", ablate_denoising(&cfg, Some(&dir))?.to_csv());
        }
        Command::AblateLong { config, out } => {
            let cfg = load(&config)?;
            let dir = output_dir(&cfg, out);
            print!("{}", ablate_long(&cfg, Some(&dir))?.to_csv());
        }
        Command::Metrics { run_dir } => {
            let report = recompute_run_metrics(&run_dir).with_context(|| format!("reading {}", run_dir.display()))?;
            println!("{}\n{}", MetricReport::CSV_HEADER, report.csv_row());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
