use std::path::PathBuf;

use chanmap::hwmodel::CostTarget;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

/// Joint training and per-channel CU mapping of small CNNs.
#[derive(Parser, Debug)]
#[command(name = "chanmap", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct Common {
    /// Builtin network name or network TOML file.
    #[arg(long)]
    pub net: String,
    /// `diana-like`, `darkside-like` or a platform TOML file.
    #[arg(long)]
    pub platform: String,
    /// CIFAR-10 binary directory, `synthetic` or `synthetic:cifar-proxy`.
    #[arg(long, env = "CHANMAP_DATA_DIR")]
    pub data: String,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Training configuration TOML; missing keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 4000)]
    pub train_size: usize,
    #[arg(long, default_value_t = 1000)]
    pub val_size: usize,
    /// Test samples (0 disables the test split).
    #[arg(long, default_value_t = 0)]
    pub test_size: usize,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Float-path training with frozen assignment parameters.
    Warmup {
        #[command(flatten)]
        common: Common,
    },
    /// Joint weight/assignment search from a warmup checkpoint.
    Search {
        #[command(flatten)]
        common: Common,
        /// Normalized cost weight.
        #[arg(long)]
        lambda: f64,
        #[arg(long)]
        target: CostTarget,
        /// Warmup checkpoint; warms up from scratch when absent.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Final training of the discretized mapping of a search checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        from: PathBuf,
    },
    /// Warmup, search and final training for one lambda.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        lambda: f64,
        #[arg(long)]
        target: CostTarget,
    },
    /// One shared warmup, then search and final training per lambda.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true)]
        lambdas: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, default_value = "latency")]
        target: CostTarget,
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Fixed reference mapping followed by final training.
    Baseline {
        #[command(flatten)]
        common: Common,
        /// `all-on-cu:<name>`, `io-heuristic[:edge,backbone]` or `min-cost`.
        #[arg(long)]
        kind: String,
        #[arg(long, default_value = "latency")]
        target: CostTarget,
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Writes the mapping artifact of a final checkpoint.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        from: PathBuf,
    },
    /// Exact cost of an artifact or of a checkpoint's discretized mapping.
    EvalCost {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "from", required_unless_present = "from")]
        artifact: Option<PathBuf>,
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Replays an artifact; with `--from`, compares it layer by layer with the checkpoint.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        artifact: PathBuf,
        #[arg(long)]
        from: Option<PathBuf>,
        /// Validation samples replayed against the checkpoint.
        #[arg(long, default_value_t = 32)]
        samples: usize,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Warmup { .. } => "warmup",
            Command::Search { .. } => "search",
            Command::Finetune { .. } => "finetune",
            Command::Run { .. } => "run",
            Command::Sweep { .. } => "sweep",
            Command::Baseline { .. } => "baseline",
            Command::Export { .. } => "export",
            Command::EvalCost { .. } => "eval-cost",
            Command::Verify { .. } => "verify",
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Command::Warmup { common }
            | Command::Search { common, .. }
            | Command::Finetune { common, .. }
            | Command::Run { common, .. }
            | Command::Sweep { common, .. }
            | Command::Baseline { common, .. }
            | Command::Export { common, .. }
            | Command::EvalCost { common, .. }
            | Command::Verify { common, .. } => common,
        }
    }
}
