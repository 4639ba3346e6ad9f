//! `pfnet` command line: validation, allocation, fluid, manifold,
//! simulation and diffusion experiments on a network file.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};

#[derive(Debug, Parser)]
#[command(name = "pfnet", version, about = "Proportionally fair bandwidth-sharing networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the structural assumptions of a network file.
    Validate {
        #[arg(long)]
        net: PathBuf,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Proportionally fair rates at a route-level state.
    Allocate {
        #[arg(long)]
        net: PathBuf,
        /// Comma-separated route counts, e.g. "1,1,1".
        #[arg(long)]
        state: String,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Integrate the critical fluid model and write the trajectory as CSV.
    Fluid(FluidArgs),
    /// Manifold identities and distances of states to the invariant manifold.
    Manifold {
        #[arg(long)]
        net: PathBuf,
        /// Print the identity residuals.
        #[arg(long)]
        check: bool,
        /// CSV of phase-level states, one per row; prints their distances.
        #[arg(long)]
        dist: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Discrete-event simulation of the stochastic network.
    Simulate(SimulateArgs),
    /// Diffusion parameters, the product-form check and SRBM sampling.
    Diffusion(DiffusionArgs),
    /// Compare heavy-traffic simulations with the product-form approximation.
    #[command(name = "validate-ht")]
    ValidateHt(ValidateHtArgs),
}

#[derive(Debug, Args)]
pub struct FluidArgs {
    #[arg(long)]
    pub net: PathBuf,
    /// JSON R×R routing matrix between routes; switches to the route-level
    /// model with exponential service at rate 1/β_r.
    #[arg(long)]
    pub routing: Option<PathBuf>,
    /// Initial state: one entry per route (jobs enter at their initial
    /// phase law) or one entry per phase.
    #[arg(long)]
    pub n0: String,
    #[arg(long = "T", default_value_t = 50.0)]
    pub horizon: f64,
    /// Euler step; default scales with the initial mass.
    #[arg(long)]
    pub h: Option<f64>,
    /// Write every n-th step.
    #[arg(long, default_value_t = 1)]
    pub every: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub net: PathBuf,
    /// Heavy-traffic index; the network must then be critical.
    #[arg(long)]
    pub k: Option<f64>,
    /// Route drift for the heavy-traffic instance (default all ones).
    #[arg(long)]
    pub theta: Option<String>,
    #[arg(long, default_value_t = 1e5)]
    pub horizon: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.2)]
    pub warmup: f64,
    #[arg(long, default_value_t = 32)]
    pub batches: usize,
    /// Initial phase counts (default: empty system).
    #[arg(long)]
    pub initial: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// CSV of thinned post-warmup route counts.
    #[arg(long)]
    pub samples: Option<PathBuf>,
    /// Spacing of the rows in `--samples` (default horizon / 10⁴).
    #[arg(long)]
    pub sample_interval: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DiffusionArgs {
    #[arg(long)]
    pub net: PathBuf,
    #[arg(long)]
    pub check_product_form: bool,
    /// Link-level drift; enables the product-form rates.
    #[arg(long)]
    pub theta_link: Option<String>,
    /// Sample the reflected Brownian motion (needs --theta-link).
    #[arg(long)]
    pub srbm: bool,
    #[arg(long, default_value_t = 10_000)]
    pub srbm_samples: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub srbm_step: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ValidateHtArgs {
    #[arg(long)]
    pub net: PathBuf,
    /// Comma-separated heavy-traffic indices.
    #[arg(long, default_value = "5,10,20")]
    pub k: String,
    #[arg(long)]
    pub theta: String,
    #[arg(long, default_value_t = 20)]
    pub seeds: usize,
    #[arg(long, default_value_t = 1)]
    pub first_seed: u64,
    /// Simulated time is this times k³.
    #[arg(long, default_value_t = 100.0)]
    pub horizon_coeff: f64,
    #[arg(long)]
    pub out: PathBuf,
}

/// 1 for bad input, 2 for numerical failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<pfnet::Error>()) {
        Some(e) if !e.is_validation() => 2,
        Some(_) => 1,
        None if err.is::<commands::NumericFailure>() => 2,
        None => 1,
    }
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("PF_HT_THREADS") {
        let n: usize = v.trim().parse().map_err(|_| anyhow::anyhow!("PF_HT_THREADS must be a positive integer, got `{v}`"))?;
        if n == 0 {
            anyhow::bail!("PF_HT_THREADS must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
        info!("using {n} worker threads");
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    info!("configuration: {:?}", cli.command);
    match init_threads().and_then(|_| commands::run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
