use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use safecert::runner::{cmd_convert, cmd_fit_q, cmd_gen_data, cmd_reproduce, cmd_run_control, ExperimentConfig};
use safecert::Error;

/// Safety certificates from confounded offline data.
#[derive(Parser)]
#[command(name = "safecert", version)]
struct Cli {
    /// TOML config; defaults reproduce the driving experiment.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the dataset seed (gen-data) or the evaluation seed (run-control, reproduce).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (a file path for convert). Defaults to the config's output_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Log raw offline episodes under the behavioral policy.
    GenData,
    /// Freeze raw episodes at their first unsafe state.
    Convert {
        /// Raw JSONL dataset.
        input: PathBuf,
    },
    /// Fit Q_M by front-door fitted Q iteration.
    FitQ {
        /// Raw or converted JSONL dataset; not needed with exact tables.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Evaluate the configured controller.
    RunControl {
        /// Q table (x,k,u,value) for the proposed-fitted-q controller.
        #[arg(long)]
        q: Option<PathBuf>,
    },
    /// Run the proposed and barrier controllers on the driving environment.
    Reproduce,
}

fn run(cli: Cli) -> Result<bool, Error> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        match cli.command {
            Command::GenData => cfg.dataset.seed = seed,
            _ => cfg.evaluation.seed = seed,
        }
    }
    let out = cli.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    match &cli.command {
        Command::GenData => {
            let path = cmd_gen_data(&cfg, &out)?;
            println!("wrote {}", path.display());
            Ok(true)
        }
        Command::Convert { input } => {
            let output = cli.out.clone().unwrap_or_else(|| converted_name(input));
            cmd_convert(&cfg, input, &output)?;
            println!("wrote {}", output.display());
            Ok(true)
        }
        Command::FitQ { dataset } => {
            let report = cmd_fit_q(&cfg, dataset.as_deref(), &out)?;
            println!(
                "fit converged after {} sweeps (residual {:e}); max error vs ground truth {:e}; {} warnings",
                report.iterations,
                report.residual,
                report.oracle_max_abs_error,
                report.warnings.len()
            );
            Ok(true)
        }
        Command::RunControl { q } => {
            let outcome = cmd_run_control(&cfg, q.as_deref(), &out)?;
            println!("{}", outcome.message);
            Ok(outcome.criteria_met)
        }
        Command::Reproduce => {
            let (outcome, _) = cmd_reproduce(&cfg, &out)?;
            println!("{}", outcome.message);
            Ok(outcome.criteria_met)
        }
    }
}

fn converted_name(input: &Path) -> PathBuf {
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    input.with_file_name(format!("{stem}.converted.jsonl"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
