use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adaptorx_core::experiment::{
    load_grid, run_experiment, run_grid, write_synthetic_corpora, EvaluateConfig, ExperimentConfig,
};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "adaptorx", version, about = "Objective-centric multi-task training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic ID/AD/OOD corpora as line-aligned files.
    GenerateData(Common),
    /// Run one experiment.
    Train(Common),
    /// Score a checkpoint on a corpus.
    Evaluate(Common),
    /// Run every experiment listed in a grid file.
    Grid(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the seed of every experiment.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenerateData(a) => {
            let config = load_config(&a)?;
            let out = a.out.clone().unwrap_or_else(|| PathBuf::from("data"));
            let files = write_synthetic_corpora(&config, &out)?;
            println!("wrote {} files under {}", files.len(), out.display());
        }
        Command::Train(a) => {
            let mut config = load_config(&a)?;
            if let Some(out) = &a.out {
                config.out = Some(out.clone());
            }
            let output = run_experiment(&config)
                .with_context(|| format!("experiment `{}` failed", config.experiment))?;
            println!("{}", adaptorx_core::experiment::RESULTS_HEADER);
            println!("{}", output.row.tsv());
            eprintln!(
                "{} updates, {} batches, stopped by {:?} after {:.1}s",
                output.outcome.updates,
                output.outcome.batches,
                output.outcome.stop,
                output.elapsed.as_secs_f64()
            );
        }
        Command::Evaluate(a) => {
            let mut config = EvaluateConfig::from_path(&a.config)?;
            if let Some(seed) = a.seed {
                config.seed = seed;
            }
            let scores = config.run()?;
            println!("{scores}");
            if let Some(out) = &a.out {
                write_file(&out.join("metrics.tsv"), &format!("{scores}\n"))?;
            }
        }
        Command::Grid(a) => {
            let mut configs = load_grid(&a.config)
                .with_context(|| format!("reading grid {}", a.config.display()))?;
            if let Some(seed) = a.seed {
                configs.iter_mut().for_each(|c| c.seed = seed);
            }
            let out = a.out.clone().unwrap_or_else(|| PathBuf::from("runs"));
            let rows = run_grid(&configs, &out)?;
            let failed = rows.iter().filter(|r| r.is_err()).count();
            for (config, row) in configs.iter().zip(&rows) {
                match row {
                    Ok(r) => eprintln!("{}: ok", r.experiment),
                    Err(e) => eprintln!("{}: {e}", config.experiment),
                }
            }
            println!("{}", out.join("results.tsv").display());
            if failed > 0 {
                eprintln!("{failed} of {} experiments failed", rows.len());
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn load_config(a: &Common) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::from_path(&a.config)
        .with_context(|| format!("reading config {}", a.config.display()))?;
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    if path.is_dir() {
        bail!("{} is a directory", path.display());
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
