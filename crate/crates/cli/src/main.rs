use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use promptpool::{Continuity, PoolMode};

mod bench;
mod commands;
mod config;

use config::{parse_quad, parse_triple};

/// Prompt-guided pooling of visual token grids.
///
/// Machine-readable summaries go to stdout as one JSON object per line;
/// human-readable progress goes to stderr. Every flag can also be set with a
/// `PROMPTPOOL_<FLAG>` environment variable, and flags and variables override
/// values from `--config`.
#[derive(Debug, Parser)]
#[command(name = "promptpool", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Score every visual token against one or more text features.
    Scores(ScoresArgs),
    /// Pool a visual token grid.
    Pool(PoolArgs),
    /// Time pool_forward across parallelism degrees.
    Bench(BenchArgs),
    /// Certificate lengths for a manifest of videos.
    Certificate(CertificateArgs),
    /// Extend a positional-embedding table.
    PeExtend(PeExtendArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON file with default values for any flag.
    #[arg(long, env = "PROMPTPOOL_CONFIG")]
    pub config: Option<PathBuf>,
    /// Worker threads; 1 runs sequentially.
    #[arg(long, env = "PROMPTPOOL_PARALLELISM", value_delimiter = ',')]
    pub parallelism: Vec<usize>,
    /// Where to write the result.
    #[arg(long, env = "PROMPTPOOL_OUTPUT")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoresArgs {
    #[command(flatten)]
    pub common: Common,
    /// Visual tokens, T x W x H x D.
    #[arg(long, env = "PROMPTPOOL_INPUT")]
    pub input: Option<PathBuf>,
    /// Projection matrix, D x D'.
    #[arg(long, env = "PROMPTPOOL_PROJECTION")]
    pub projection: Option<PathBuf>,
    /// Text feature file (D' or N x D'); repeat for several prompts.
    #[arg(long, env = "PROMPTPOOL_TEXT", value_delimiter = ';')]
    pub text: Vec<PathBuf>,
    #[arg(long, env = "PROMPTPOOL_TEMPERATURE")]
    pub temperature: Option<f64>,
    /// L2-normalize both sides of the dot product (default true).
    #[arg(long, env = "PROMPTPOOL_NORMALIZE")]
    pub normalize: Option<bool>,
}

#[derive(Debug, Args)]
pub struct PoolArgs {
    #[command(flatten)]
    pub common: Common,
    /// Visual tokens, T x W x H x D.
    #[arg(long, env = "PROMPTPOOL_INPUT")]
    pub input: Option<PathBuf>,
    /// Score tensor, T x W x H.
    #[arg(long, env = "PROMPTPOOL_SCORES")]
    pub scores: Option<PathBuf>,
    /// Kernel kt,kw,kh; repeat for multi-branch pooling.
    #[arg(long, env = "PROMPTPOOL_KERNEL", value_parser = parse_triple, value_delimiter = ';')]
    pub kernel: Vec<[usize; 3]>,
    /// Stride dt,dw,dh, one per kernel; defaults to the kernel.
    #[arg(long, env = "PROMPTPOOL_STRIDE", value_parser = parse_triple, value_delimiter = ';')]
    pub stride: Vec<[usize; 3]>,
    /// weighted-average, weighted-sum-literal, max or average-baseline.
    #[arg(long, env = "PROMPTPOOL_MODE")]
    pub mode: Option<PoolMode>,
    /// Pool time and space in separate branches (temporal kernel first).
    #[arg(long, env = "PROMPTPOOL_SEPARATE_ST")]
    pub separate_st: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: Common,
    /// Visual tokens; a seeded synthetic grid is used when absent.
    #[arg(long, env = "PROMPTPOOL_INPUT")]
    pub input: Option<PathBuf>,
    #[arg(long, env = "PROMPTPOOL_SCORES")]
    pub scores: Option<PathBuf>,
    /// Synthetic grid t,w,h,d (default 32,24,24,1024).
    #[arg(long, env = "PROMPTPOOL_SHAPE", value_parser = parse_quad)]
    pub shape: Option<[usize; 4]>,
    #[arg(long, env = "PROMPTPOOL_KERNEL", value_parser = parse_triple)]
    pub kernel: Option<[usize; 3]>,
    #[arg(long, env = "PROMPTPOOL_STRIDE", value_parser = parse_triple)]
    pub stride: Option<[usize; 3]>,
    #[arg(long, env = "PROMPTPOOL_MODE")]
    pub mode: Option<PoolMode>,
    /// Timed repetitions per degree, at least 3.
    #[arg(long, env = "PROMPTPOOL_REPS")]
    pub reps: Option<usize>,
    #[arg(long, env = "PROMPTPOOL_SEED")]
    pub seed: Option<u64>,
    /// Also time a run with the h stride halved.
    #[arg(long, env = "PROMPTPOOL_SCALING")]
    pub scaling: bool,
}

#[derive(Debug, Args)]
pub struct CertificateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Manifest: JSON array or JSON lines of {"id", "frames", "text"}.
    #[arg(long, env = "PROMPTPOOL_INPUT")]
    pub input: Option<PathBuf>,
    #[arg(long, env = "PROMPTPOOL_THRESHOLD")]
    pub threshold: Option<f64>,
    /// Keep only the K videos with the smallest certificate.
    #[arg(long, env = "PROMPTPOOL_TOP_K")]
    pub top_k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PeExtendArgs {
    #[command(flatten)]
    pub common: Common,
    /// Source table, L x D.
    #[arg(long, env = "PROMPTPOOL_INPUT")]
    pub input: Option<PathBuf>,
    #[arg(long, env = "PROMPTPOOL_TARGET_LENGTH")]
    pub target_length: Option<usize>,
    /// asymmetric, uniform or random-tail.
    #[arg(long, env = "PROMPTPOOL_METHOD")]
    pub method: Option<String>,
    #[arg(long, env = "PROMPTPOOL_BOUNDARY")]
    pub boundary: Option<usize>,
    #[arg(long, env = "PROMPTPOOL_R_HEAD")]
    pub r_head: Option<f64>,
    #[arg(long, env = "PROMPTPOOL_R_TAIL")]
    pub r_tail: Option<f64>,
    /// continuous-piecewise or literal.
    #[arg(long, env = "PROMPTPOOL_CONTINUITY")]
    pub continuity: Option<Continuity>,
    #[arg(long, env = "PROMPTPOOL_SEED")]
    pub seed: Option<u64>,
    /// Standard deviation of random-tail rows.
    #[arg(long, env = "PROMPTPOOL_SCALE")]
    pub scale: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Scores(a) => commands::scores(a),
        Command::Pool(a) => commands::pool(a),
        Command::Bench(a) => bench::run(a),
        Command::Certificate(a) => commands::certificate(a),
        Command::PeExtend(a) => commands::pe_extend(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
