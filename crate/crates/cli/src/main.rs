//! `max360iq`: synthetic data, viewport extraction, training, prediction,
//! evaluation, gradient checking and viewport-count sweeps.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::Dtype;

#[derive(Parser, Debug)]
#[command(name = "max360iq", version, about = "Blind quality assessment for 360-degree images")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct GlobalArgs {
    /// TOML run configuration; every key has a default.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.lr=0.001` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Seed for training, splitting and synthesis (overrides the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for batched inference.
    #[arg(long, env = "MAX360IQ_THREADS", default_value_t = 1, global = true)]
    pub threads: usize,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset (images, scanpaths, manifest).
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// uniform or nonuniform (overrides synth.mode).
        #[arg(long)]
        mode: Option<String>,
        /// Number of base scenes (overrides synth.n_scenes).
        #[arg(long)]
        scenes: Option<usize>,
    },
    /// Render viewport sequences to PNG with a JSON sidecar per image.
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Viewports per sequence (overrides extraction.k).
        #[arg(long)]
        k: Option<usize>,
        /// Field of view in degrees (overrides extraction.fov).
        #[arg(long)]
        fov: Option<f64>,
        /// Viewport side in pixels (overrides extraction.size).
        #[arg(long)]
        size: Option<usize>,
        /// scanpath or equator (overrides extraction.mode).
        #[arg(long)]
        mode: Option<String>,
    },
    /// Train on the scene-level training split; writes checkpoints and logs.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint; its model and extraction settings win.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score every sequence of a manifest with a checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Sequence-level CSV: image_id, condition, pred, mos.
        #[arg(long)]
        out: PathBuf,
        /// Optional image-level CSV: image_id, scene_id, pred, mos.
        #[arg(long)]
        images_out: Option<PathBuf>,
        /// Sequences per forward pass.
        #[arg(long, default_value_t = 16)]
        chunk: usize,
        /// Arithmetic used for inference.
        #[arg(long, value_enum, default_value_t = Dtype::F32)]
        dtype: Dtype,
    },
    /// PLCC/SRCC/RMSE with logistic mapping from a predictions CSV.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out_json: PathBuf,
        /// Scatter data: pred, mapped_pred, mos, condition.
        #[arg(long)]
        out_csv: Option<PathBuf>,
        /// Average sequences per image before scoring.
        #[arg(long)]
        image_level: bool,
    },
    /// Finite-difference check of every differentiable component.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Comma-separated case names (default: all).
        #[arg(long, value_delimiter = ',')]
        only: Vec<String>,
        /// Scale analytic gradients by this factor (negative control).
        #[arg(long, hide = true)]
        corrupt: Option<f64>,
    },
    /// Retrain and evaluate for each viewport count; writes K vs PLCC/SRCC.
    SweepK {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        k_list: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.global.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp(None).init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", diagnostic(&e));
            ExitCode::from(commands::exit_code(&e))
        }
    }
}

/// The error chain on one line, dropping causes already quoted by their parent.
fn diagnostic(e: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !parts.last().is_some_and(|p| p.contains(&text)) {
            parts.push(text);
        }
    }
    parts.join(": ").replace('\n', " ")
}
