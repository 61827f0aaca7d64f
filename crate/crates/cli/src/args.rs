//! Command-line flags and the optional TOML config file. Flags win over the
//! file, the file wins over built-in defaults.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "r2d2", version, about = "Working-alliance rating and topic recommendation")]
pub struct Cli {
    /// TOML file supplying defaults for any flag below.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic planted-topic corpus.
    Synth(SynthArgs),
    /// Fit, train and evaluate; writes checkpoints and prints metrics lines.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the held-out split of a corpus.
    Eval(EvalArgs),
    /// Host the live-session service.
    Serve(ServeArgs),
    /// Drive a stored session through the engine in-process.
    Simulate(SimulateArgs),
    /// Drive a stored session through a running service.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub sessions: Option<usize>,
    #[arg(long)]
    pub turns: Option<usize>,
    #[arg(long)]
    pub topics: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Inventory file; the built-in alliance-36 when absent.
    #[arg(long)]
    pub inventory: Option<PathBuf>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub topics: Option<usize>,
    /// doc300, pca36 or pca2.
    #[arg(long)]
    pub action_space: Option<String>,
    /// ddpg, td3, bcq or all.
    #[arg(long)]
    pub algo: Option<String>,
    /// task, bond, goal or all.
    #[arg(long)]
    pub scale: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub condition: Option<String>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
    /// Checkpoint file, or a directory when several models are trained.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Split seed; the checkpoint's training seed when absent.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Expected topic count; a mismatch with the checkpoint is an error.
    #[arg(long)]
    pub topics: Option<usize>,
    /// Expected embedding width; a mismatch with the checkpoint is an error.
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Score the ground-truth actions instead of the agent.
    #[arg(long)]
    pub replay_truth: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub top_n: Option<usize>,
    /// Directory for per-session logs.
    #[arg(long)]
    pub log_dir: Option<PathBuf>,
    /// Extra inventories selectable by name in `hello`.
    #[arg(long = "inventory")]
    pub inventories: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Session to replay; the first one when absent.
    #[arg(long)]
    pub session_id: Option<String>,
    #[arg(long)]
    pub top_n: Option<usize>,
    #[arg(long)]
    pub log_dir: Option<PathBuf>,
    /// Select the top-ranked topic after every recommendation.
    #[arg(long)]
    pub select_top: bool,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Service root, e.g. http://127.0.0.1:8080.
    #[arg(long)]
    pub url: String,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub session_id: Option<String>,
    #[arg(long)]
    pub top_n: Option<usize>,
}

/// Keys accepted in the config file; names match the long flags.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct FileConfig {
    pub corpus: Option<PathBuf>,
    pub inventory: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub embed_dim: Option<usize>,
    pub topics: Option<usize>,
    pub action_space: Option<String>,
    pub algo: Option<String>,
    pub scale: Option<String>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub condition: Option<String>,
    pub test_fraction: Option<f64>,
    pub port: Option<u16>,
    pub host: Option<String>,
    pub top_n: Option<usize>,
    pub log_dir: Option<PathBuf>,
    pub sessions: Option<usize>,
    pub turns: Option<usize>,
    pub out: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::data("read config", e))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }
}

/// First present value among flag and file.
pub fn pick<T>(flag: Option<T>, file: Option<T>) -> Option<T> {
    flag.or(file)
}

pub fn require<T>(value: Option<T>, flag: &str) -> Result<T, CliError> {
    value.ok_or_else(|| CliError::Usage(format!("--{flag} is required")))
}
