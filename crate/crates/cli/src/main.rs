//! `gapa`: train a backbone, attach GP activations, calibrate, evaluate.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "gapa",
    version,
    about = "Post-hoc GP-activation uncertainty for regression networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by commands that read a run configuration.
#[derive(clap::Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one setting (`key=value`); may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the 1-D toy regression set with a gap at (-1, 1) as CSV.
    GenToy {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a backbone network on a CSV dataset.
    TrainBackbone {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "y")]
        target: String,
        /// Layer widths and activation, e.g. `1-32-32-1:tanh`.
        #[arg(long)]
        spec: Option<String>,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the GAPA layer and calibrate it (`free` or `variational`).
    Fit {
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        mode: Option<String>,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the variational training log (default: `<out>.trainlog`).
        #[arg(long)]
        trainlog: Option<PathBuf>,
    },
    /// Compute NLL, CRPS and CQM and write a report.
    Evaluate {
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        gapa: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// `test` (the held-out rows of the training split) or `all`.
        #[arg(long, default_value = "test")]
        split: String,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write per-row predictive mean and variance.
    Predict {
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        gapa: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write mean and ±2σ bands over a 1-D input grid.
    Plotdata {
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        gapa: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        grid_min: f64,
        #[arg(long, allow_hyphen_values = true)]
        grid_max: f64,
        #[arg(long, default_value_t = 201)]
        grid_n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare variational gradients with central finite differences.
    GradCheck {
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        gapa: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1e-5, allow_hyphen_values = true)]
        h: f64,
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
}

fn run(cli: Cli) -> gapa::Result<ExitCode> {
    use commands::*;
    match cli.command {
        Command::GenToy { n, seed, out } => gen_toy(n, seed, &out),
        Command::TrainBackbone {
            data,
            target,
            spec,
            config,
            out,
        } => train_backbone(&data, &target, spec.as_deref(), &config, &out),
        Command::Fit {
            net,
            data,
            mode,
            config,
            out,
            trainlog,
        } => fit(&net, &data, mode.as_deref(), &config, &out, trainlog.as_deref()),
        Command::Evaluate {
            net,
            gapa,
            data,
            split,
            config,
            out,
        } => evaluate(&net, &gapa, &data, &split, &config, &out),
        Command::Predict { net, gapa, data, out } => predict(&net, &gapa, &data, &out),
        Command::Plotdata {
            net,
            gapa,
            grid_min,
            grid_max,
            grid_n,
            out,
        } => plotdata(&net, &gapa, grid_min, grid_max, grid_n, &out),
        Command::GradCheck {
            net,
            gapa,
            data,
            h,
            corrupt_gradient,
        } => grad_check(&net, &gapa, &data, h, corrupt_gradient),
    }
}

fn main() -> ExitCode {
    gapa::par::configure_threads_from_env();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
