use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod outdir;

#[derive(Parser, Debug)]
#[command(
    name = "sweepdemod",
    version,
    about = "Separate binary reflectance images from multiplicative sweep distortions"
)]
struct Cli {
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

/// Config file plus `key=value` overrides, which win over the file.
#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,

    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a frame stack and its ground truth.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build and export the per-frame distortion subspaces.
    Subspace {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        stack: PathBuf,
        /// `wavelet` or `oracle`.
        #[arg(long, default_value = "wavelet")]
        subspace: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the alternating MAP solver.
    Solve {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        stack: PathBuf,
        /// `wavelet`, `oracle`, or a directory of exported subspaces.
        #[arg(long)]
        subspace: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the nuclear-norm baseline.
    Baseline {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        stack: PathBuf,
        #[arg(long)]
        subspace: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a reconstruction against the ground truth of a simulated stack.
    Eval {
        #[arg(long)]
        stack: PathBuf,
        /// Directory holding `rho.raw`.
        #[arg(long)]
        result: PathBuf,
        /// Optional CSV destination.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// MSE against the number of frames.
    FramesSweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        subspace: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// MSE against SNR.
    SnrSweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        subspace: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a raw matrix file or stack directory to PGM images.
    Render {
        #[arg(long)]
        stack: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Normalize::Frame)]
        normalize: Normalize,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Normalize {
    Frame,
    Global,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot start worker pool: {e}");
            return ExitCode::FAILURE;
        }
    }
    match commands::run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
