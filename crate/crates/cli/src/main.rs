//! `bffg`: filtering, guided simulation, likelihood estimation and MCMC on
//! models read from TOML files.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bffg", version, about = "Backward filtering forward guiding on trees and DAGs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ModelArgs {
    /// Model file (TOML).
    #[arg(long)]
    model: PathBuf,
    /// Parameter values, either positional `0.1,0.2` or named `theta0=0.1,sigma0=0.2`;
    /// defaults to the initial values declared in the file.
    #[arg(long)]
    theta: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the backward filter and write every fused potential.
    Filter {
        #[command(flatten)]
        model: ModelArgs,
        /// Output CSV (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw guided trajectories with their weight ledgers.
    Guide {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate the log-likelihood from weighted guided samples.
    Likelihood {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the pCN / random-walk Metropolis-within-Gibbs sampler and write the trace.
    Mcmc {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// pCN memory parameter in [0, 1).
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        burnin: Option<usize>,
    },
    /// Write a tanh-drift tree model with simulated data.
    Generate {
        /// Number of leaves below each child of the root, e.g. `4,4,5`.
        #[arg(long, default_value = "4,4,5")]
        shape: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Filter { model, out } => commands::filter(&model.model, model.theta.as_deref(), out.as_deref()),
        Command::Guide { model, n, seed, out } => {
            commands::guide(&model.model, model.theta.as_deref(), n, seed, out.as_deref())
        }
        Command::Likelihood { model, n, seed } => commands::likelihood(&model.model, model.theta.as_deref(), n, seed),
        Command::Mcmc { model, seed, out, lambda, iters, burnin } => commands::mcmc(
            &model.model,
            model.theta.as_deref(),
            &commands::McmcFlags { seed, lambda, iters, burnin },
            out.as_deref(),
        ),
        Command::Generate { shape, seed, out } => commands::generate(&shape, seed, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
