//! Command-line driver for the conformal-under-attack pipelines.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use advcp::config::{load_config, RunConfig};
use advcp::pipeline::{
    cmd_gen_data, cmd_rq1, cmd_rq2, cmd_rq3, cmd_solve_game, cmd_train, PipelineError,
};

#[derive(Parser)]
#[command(
    name = "advcp",
    version,
    about = "Adversarially robust conformal prediction with a game-theoretic defense selector"
)]
struct Cli {
    /// Flat key-value config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured synthetic dataset as CSV.
    GenData,
    /// Train the pre-trained model and the attack-trained defenses.
    Train,
    /// Known-attack pipeline: per-attack calibration and evaluation.
    Rq1,
    /// Conservative pipeline: max-quantile calibration over the attack set.
    Rq2,
    /// Game pipeline: payoff matrices, equilibrium, and strategy evaluation.
    Rq3,
    /// Solve a payoff matrix CSV for its equilibrium.
    SolveGame {
        /// Payoff matrix with header `defense,<attack ids...>`.
        matrix: PathBuf,
    },
}

fn effective_config(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    match &cli.command {
        Command::GenData => {
            let files = cmd_gen_data(&effective_config(cli)?)?;
            report_files(&files);
        }
        Command::Train => {
            let files = cmd_train(&effective_config(cli)?)?;
            report_files(&files);
        }
        Command::Rq1 => {
            let (rows, files) = cmd_rq1(&effective_config(cli)?)?;
            println!("{} cells evaluated", rows.len());
            report_files(&files);
        }
        Command::Rq2 => {
            let (rows, files) = cmd_rq2(&effective_config(cli)?)?;
            println!("{} cells evaluated", rows.len());
            report_files(&files);
        }
        Command::Rq3 => {
            let out = cmd_rq3(&effective_config(cli)?)?;
            println!("game value {:.6}", out.equilibrium.value);
            report_files(&out.files);
        }
        Command::SolveGame { matrix } => {
            let out_dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
            let (eq, payoff, files) = cmd_solve_game(matrix, &out_dir)?;
            println!("game value {:.6}", eq.value);
            for (id, p) in payoff.row_ids.iter().zip(&eq.defender) {
                println!("defender {id}: {p:.6}");
            }
            for (id, p) in payoff.col_ids.iter().zip(&eq.attacker) {
                println!("attacker {id}: {p:.6}");
            }
            report_files(&files);
        }
    }
    Ok(())
}

fn report_files(files: &[PathBuf]) {
    for f in files {
        println!("wrote {}", f.display());
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
