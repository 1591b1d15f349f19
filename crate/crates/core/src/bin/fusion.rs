use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fusion_core::experiment::{run_experiment, validate_resources, ExperimentConfig};
use fusion_core::FusionError;

#[derive(Parser)]
#[command(name = "fusion", version, about = "Unsupervised meta-learning and continual-learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a JSON config.
    Run {
        config: PathBuf,
        /// Comma-separated seeds replacing `seeds` from the config.
        #[arg(long, value_delimiter = ',')]
        seed_override: Option<Vec<u64>>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Parse the config and check data files and shapes without training.
    Validate {
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        seed_override: Option<Vec<u64>>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn load(path: &PathBuf, seeds: Option<Vec<u64>>, out_dir: Option<PathBuf>) -> Result<ExperimentConfig, FusionError> {
    let mut cfg = ExperimentConfig::from_path(path)?;
    if let Some(seeds) = seeds {
        cfg.seeds = seeds;
    }
    if let Some(dir) = out_dir {
        cfg.out_dir = dir.to_string_lossy().into_owned();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exit_code(e: &FusionError) -> u8 {
    match e {
        FusionError::Config { .. } | FusionError::Json(_) => 2,
        FusionError::Divergence { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, seed_override, out_dir } => load(&config, seed_override, out_dir).and_then(|cfg| {
            let out = run_experiment(&cfg, &mut |line| eprintln!("{line}"))?;
            println!("wrote {}", out.dir.join("aggregate.json").display());
            Ok(())
        }),
        Command::Validate { config, seed_override, out_dir } => load(&config, seed_override, out_dir).and_then(|cfg| {
            for line in validate_resources(&cfg)? {
                println!("{line}");
            }
            println!("ok");
            Ok(())
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
