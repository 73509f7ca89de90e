//! `mrf`: command-line pipeline from dictionary simulation to evaluation.

mod artifacts;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

/// Seed used by every randomized command unless `--seed` is given.
pub const DEFAULT_SEED: u64 = 1234;

#[derive(Parser, Debug)]
#[command(name = "mrf", version, about = "Compressive MR fingerprinting pipeline")]
pub struct Cli {
    /// Seed for all randomness (phantoms, noise, initialization, clustering).
    #[arg(long, global = true, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Caps worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Algo {
    Dm,
    Fgm,
    Blip,
    Pgdnet,
    Encoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Bloch,
    Encoder,
    Pgdnet,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Simulate the fingerprint dictionary over a (T1, T2) grid.
    SimulateDict {
        /// `t1start:step:stop` x `t2start:step:stop`, in ms.
        #[arg(long, default_value = "100:10:4000x20:2:600")]
        grid: String,
        /// Sequence JSON (keys L, flip_start_deg, flip_end_deg, tr_ms, te_ms, tinv_ms, inversion).
        #[arg(long)]
        seq: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Temporal subspace of a dictionary.
    BuildSubspace {
        #[arg(long)]
        dict: PathBuf,
        #[arg(long, default_value_t = 10)]
        s: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-frame rotated spiral sampling masks.
    MakeMasks {
        #[arg(long, default_value_t = 128)]
        n: usize,
        #[arg(long, default_value_t = 200)]
        l: usize,
        /// Sample every k-space node in every frame instead.
        #[arg(long)]
        full: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulated phantom dataset (train/test split) from a JSON config.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct parameter maps from one k-space file.
    Recon {
        #[arg(long, value_enum)]
        algo: Algo,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        subspace: PathBuf,
        /// Dictionary (dm, fgm, blip).
        #[arg(long)]
        dict: Option<PathBuf>,
        /// Checkpoint (pgdnet, encoder).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Fraction of groups searched by fgm.
        #[arg(long, default_value_t = 0.1)]
        keep: f64,
        /// Number of fgm groups (default: √atoms).
        #[arg(long)]
        groups: Option<usize>,
        /// Iteration trace (blip); defaults to `<out>.trace.json`.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Train one stage (bloch decoder, encoder pretraining, PGD-Net).
    Train {
        #[arg(long, value_enum)]
        stage: Stage,
        #[arg(long)]
        config: PathBuf,
    },
    /// Compare estimated and reference maps.
    Evaluate {
        #[arg(long, num_args = 1.., required = true)]
        est: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        gt: Vec<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        /// Directory for per-map absolute-error images (PGM).
        #[arg(long)]
        pgm: Option<PathBuf>,
        /// Row label in the text table.
        #[arg(long, default_value = "estimate")]
        label: String,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.code());
            ExitCode::FAILURE
        }
    }
}
