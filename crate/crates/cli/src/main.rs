//! `saep` command-line front end.
//!
//! Every subcommand prints exactly one JSON document on stdout; diagnostics
//! go to stderr as `E_CODE: message`. Exit status: 0 success, 2 argument
//! error, 3 format/IO error, 4 numeric or contract failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "saep",
    version,
    about = "Spatial-aware efficient projector tools"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Task {
    Quadrant,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Project encoder features to visual tokens.
    Project {
        /// A `.npy` file ([N(+1), C] or [K, N(+1), C]) or a directory of layer_XX.npy files.
        #[arg(long)]
        features: PathBuf,
        /// Checkpoint directory holding one .npy per weight.
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a freshly initialized checkpoint for a config.
    Init {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Average intra/inter-layer cosine similarity over per-image feature dumps.
    AnalyzeLayers {
        #[arg(long)]
        dumps: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Choose encoder layers from a similarity report.
    SelectLayers {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        k: usize,
        /// Last usable layer; defaults to the penultimate layer.
        #[arg(long)]
        last: Option<usize>,
    },
    /// Time the projector forward pass.
    Bench {
        #[arg(long, default_value_t = 24)]
        h: usize,
        #[arg(long, default_value_t = 24)]
        w: usize,
        #[arg(long, default_value_t = 1024)]
        c: usize,
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Pointwise output channels; defaults to --c.
        #[arg(long)]
        c_hid: Option<usize>,
        #[arg(long, default_value_t = 2)]
        stride: usize,
        #[arg(long, default_value_t = 4096)]
        d: usize,
        #[arg(long, default_value_t = 10)]
        iters: usize,
    },
    /// Finite-difference check of every backward pass.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = saep::gradcheck::DEFAULT_EPS)]
        eps: f64,
    },
    /// Train the projector with a probe on a synthetic spatial task.
    TrainDemo {
        #[arg(long, default_value_t = 2000)]
        steps: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Task::Quadrant)]
        task: Task,
        /// Also run the token-shuffle control and report its accuracy.
        #[arg(long)]
        shuffle_ablation: bool,
        /// Write the per-step trace (step,lr,loss,accuracy) here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = commands::configure_threads() {
        return commands::report_error(&e);
    }
    let result = match cli.command {
        Command::Project {
            features,
            params,
            config,
            out,
        } => commands::project(&features, &params, &config, &out),
        Command::Init { config, out } => commands::init(&config, &out),
        Command::AnalyzeLayers { dumps, out } => commands::analyze_layers(&dumps, &out),
        Command::SelectLayers { report, k, last } => commands::select_layers(&report, k, last),
        Command::Bench {
            h,
            w,
            c,
            k,
            c_hid,
            stride,
            d,
            iters,
        } => {
            let config = saep::SaepConfig {
                c_hid: c_hid.unwrap_or(c),
                ..saep::SaepConfig::new(h, w, c, k, stride, d)
            };
            commands::bench(&config, iters)
        }
        Command::Gradcheck { seed, eps } => commands::gradcheck(seed, eps),
        Command::TrainDemo {
            steps,
            seed,
            task: Task::Quadrant,
            shuffle_ablation,
            csv,
        } => commands::train_demo(steps, seed, shuffle_ablation, csv.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => commands::report_error(&e),
    }
}
