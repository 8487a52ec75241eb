mod commands;
mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use config::parse_override;

/// Exit status plus message of a failed command.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }

    pub fn other(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Failure::other(format!("{}: {e}", path.display()))
    }
}

impl From<squant::Error> for Failure {
    fn from(e: squant::Error) -> Self {
        use squant::Error as E;
        let code = match &e {
            E::Divergence { .. } => 3,
            E::Config(_) | E::Format(_) | E::Corruption(_) => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "squant",
    version,
    about = "Train, compress and inspect sparse low-bit CNNs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run configuration (JSON)
    #[arg(short = 'c', long = "config")]
    pub config: Option<PathBuf>,
    /// Output directory; must not exist or be empty
    #[arg(short = 'o', long = "out")]
    pub out: Option<PathBuf>,
    /// Overrides the config's seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Config override, e.g. `--set sigma=0.2` or `--set data.n=2000`
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_override)]
    pub overrides: Vec<(String, Value)>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write metrics, checkpoint and packed model
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// SQuantize a full-precision checkpoint in one shot, without training
    Squantize {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file or training output directory
        #[arg(short = 'i', long = "input")]
        input: PathBuf,
    },
    /// Histograms, sigma sweep, order-effect table and compression report
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Packed model, checkpoint, or training output directory
        #[arg(short = 'i', long = "input")]
        input: PathBuf,
        /// Comma-separated layer names (default: every weight layer)
        #[arg(long, value_delimiter = ',')]
        layers: Vec<String>,
        #[arg(
            long,
            value_delimiter = ',',
            allow_hyphen_values = true,
            default_value = "-0.3,0,0.2,0.4,0.6"
        )]
        sigmas: Vec<f64>,
        #[arg(long, default_value_t = 64)]
        bins: usize,
        /// Bit width for the order-effect table
        #[arg(long, default_value_t = 4)]
        k: u32,
        /// Sigma for the order-effect table
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        sigma: f64,
    },
    /// Write the packed container; a checkpoint is SQuantized with the config first
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(short = 'i', long = "input")]
        input: PathBuf,
    },
    /// Print the compression report and, with --flops, the FLOP table
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(short = 'i', long = "input")]
        input: PathBuf,
        /// Measure activation densities and count FLOPs (needs --config)
        #[arg(long)]
        flops: bool,
        /// Print the report as JSON instead of a table
        #[arg(long)]
        json: bool,
    },
}

fn init_threads() {
    let n = squant::parallel::threads_from_env();
    squant::parallel::set_threads(n);
    if n > 0 {
        // a second initialization only fails if a pool already exists
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
}

fn main() -> ExitCode {
    init_threads();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { common } => commands::train(&common),
        Command::Squantize { common, input } => commands::squantize(&common, &input),
        Command::Analyze {
            common,
            input,
            layers,
            sigmas,
            bins,
            k,
            sigma,
        } => commands::analyze(
            &common,
            &commands::AnalyzeOpts {
                input,
                layers,
                sigmas,
                bins,
                k,
                sigma,
            },
        ),
        Command::Export { common, input } => commands::export(&common, &input),
        Command::Report {
            common,
            input,
            flops,
            json,
        } => commands::report(&common, &input, flops, json),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
