//! Config-driven CLI over the solver library: forward simulation with the
//! dual-solver and flow checks, the duality and representation verification
//! experiments, and the contraction-partition report.
//!
//! Exit codes: 0 pass, 1 verification fail, 2 config error, 3 numeric
//! blow-up.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use commands::{Context, Failure};

#[derive(Parser)]
#[command(name = "svie", about = "Causal-feedback solvers for linear stochastic Volterra equations")]
struct Cli {
    /// Path to the TOML experiment config
    #[arg(long, global = true, default_value = "experiment.toml")]
    config: PathBuf,
    /// Output directory (overrides output.dir from the config)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed override for Monte Carlo and path simulation
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate sample paths; report dual-solver and flow residuals
    Simulate {
        /// Number of sample paths to write
        #[arg(long, default_value_t = 1)]
        paths: u64,
        /// Also dump the two-parameter forward state
        #[arg(long)]
        dump_theta: bool,
        /// Restart node for the flow check (default: midpoint)
        #[arg(long)]
        restart: Option<usize>,
    },
    /// Check the duality identity between the forward and adjoint solvers
    VerifyDuality {
        /// Also run at 2N and report the empirical convergence order
        #[arg(long)]
        refine: bool,
    },
    /// Check the quadratic representation formula
    VerifyRepresentation {
        /// Also run at 2N and report the empirical convergence order
        #[arg(long)]
        refine: bool,
    },
    /// Report the contraction partition and well-posedness constant
    Partition,
}

fn run(cli: Cli) -> Result<(), Failure> {
    let ctx = Context::build(&cli.config, cli.out, cli.seed)?;
    match cli.cmd {
        Cmd::Simulate {
            paths,
            dump_theta,
            restart,
        } => commands::simulate(&ctx, paths, dump_theta, restart),
        Cmd::VerifyDuality { refine } => commands::verify_duality(&ctx, refine),
        Cmd::VerifyRepresentation { refine } => commands::verify_representation(&ctx, refine),
        Cmd::Partition => commands::partition(&ctx),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(failure) = run(cli) {
        eprintln!("error: {}", failure.message());
        std::process::exit(failure.code());
    }
}
