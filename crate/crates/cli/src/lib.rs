//! Command-line front end: scenario generation, fitting, querying at any
//! time, benchmarking, gradient checks and metric reports.
//!
//! Exit codes: 0 success, 2 validation, 3 numeric failure, 4 IO or format.

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use gauss4d::Error;

pub mod commands;
pub mod scenario_dir;

#[derive(Debug, Parser)]
#[command(name = "gauss4d", version, about = "Continuous-time 4D Gaussian occupancy engine")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scenario with ground-truth grids.
    Gen {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// One of static, mixed, dense.
        #[arg(long, default_value = "mixed")]
        difficulty: String,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a Gaussian world to a generated scenario.
    Fit {
        /// Directory written by `gen`.
        #[arg(long)]
        scenario: PathBuf,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// `key = value` config file; keys live in the `[fit]` section.
        #[arg(long)]
        config: Option<PathBuf>,
        /// structured, unified_velocity or full_4d_covariance.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many total steps, keeping the full-length schedule.
        #[arg(long)]
        halt_at: Option<usize>,
    },
    /// Occupancy of a fitted world at one timestamp.
    Query {
        #[arg(long)]
        world: PathBuf,
        /// Query time in seconds; any real value inside the horizon.
        #[arg(long, allow_negative_numbers = true)]
        t: f64,
        /// Output grid file (probabilities and labels).
        #[arg(long)]
        out: PathBuf,
        /// Also write the sliced primitives as text.
        #[arg(long)]
        slices: Option<PathBuf>,
        /// Accept times outside the horizon; temporal weights keep decaying.
        #[arg(long)]
        allow_out_of_horizon: bool,
    },
    /// Continuous querying versus a simulated autoregressive rollout.
    Bench {
        /// World to query; a synthetic world is used when omitted.
        #[arg(long)]
        world: Option<PathBuf>,
        /// Primitive count of the synthetic world.
        #[arg(long, default_value_t = 512)]
        synthetic_gaussians: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated target horizons, seconds.
        #[arg(long, default_value = "0.5,1,1.5,2,2.5,3", value_delimiter = ',')]
        horizons: Vec<f64>,
        #[arg(long, default_value_t = 15)]
        repeats: usize,
        /// Splat with the data-parallel kernels.
        #[arg(long)]
        parallel: bool,
        /// Report file; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable path.
    Gradcheck {
        /// Primitives in the pipeline checks.
        #[arg(long, default_value_t = 4)]
        gaussians: usize,
        /// Cube side of the pipeline grid, voxels.
        #[arg(long, default_value_t = 8)]
        grid: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate metric files into a per-horizon table.
    Report {
        /// Metric files written by `fit`.
        files: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidParameter(_) | Error::Validation(_) | Error::Range { .. } | Error::Shape { .. } => 2,
        Error::DegenerateCovariance { .. } | Error::Numeric(_) => 3,
        Error::Format(_) | Error::Io(_) => 4,
    }
}

/// Runs one command, writing human-readable output to `stdout`.
pub fn run(cli: Cli, stdout: &mut dyn std::io::Write) -> gauss4d::Result<()> {
    match cli.command {
        Command::Gen { seed, difficulty, out } => commands::gen(seed, &difficulty, &out, stdout),
        Command::Fit { scenario, out, config, variant, seed, steps, resume, halt_at } => {
            let flags = commands::FitFlags { variant, seed, steps, halt_at };
            commands::fit(&scenario, &out, config.as_deref(), &flags, resume.as_deref(), stdout)
        }
        Command::Query { world, t, out, slices, allow_out_of_horizon } => {
            commands::query(&world, t, &out, slices.as_deref(), allow_out_of_horizon, stdout)
        }
        Command::Bench { world, synthetic_gaussians, seed, horizons, repeats, parallel, out } => {
            let opts = commands::BenchFlags { synthetic_gaussians, seed, horizons, repeats, parallel };
            commands::bench(world.as_deref(), &opts, out.as_deref(), stdout)
        }
        Command::Gradcheck { gaussians, grid, seed, out } => commands::gradcheck(gaussians, grid, seed, out.as_deref(), stdout),
        Command::Report { files, out } => commands::report(&files, out.as_deref(), stdout),
    }
}
