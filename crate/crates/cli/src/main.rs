//! `rankmerge`: merge content and style adapters with rank-dimension masks,
//! inspect merger ranks, and check the rank-vs-output masking comparison.
//!
//! Exit codes: 0 success, 2 invalid input, 3 numeric failure, 4 I/O failure.

mod commands;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rankmerge::Error;

#[derive(Parser)]
#[command(
    name = "rankmerge",
    version,
    about = "Rank-dimension merging of content and style adapters"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train mergers for every shared layer and write the merged adapter.
    Merge(MergeArgs),
    /// Rank histograms of the mergers stored in a merged adapter.
    Analyze(AnalyzeArgs),
    /// Compare rank masking and output masking on random matrices.
    VerifyTheorem(VerifyArgs),
    /// Show the prior-informed initial mergers for a manifest.
    InitMasks(InitArgs),
    /// Generate a synthetic adapter file.
    Gen(GenArgs),
    /// Pretty-print a JSON report written by another subcommand.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    RankMask,
    OutputMask,
    /// Plain sum of both adapters, no training.
    Naive,
}

#[derive(Args)]
struct MergeArgs {
    #[arg(long, value_name = "FILE")]
    content: PathBuf,
    #[arg(long, value_name = "FILE")]
    style: PathBuf,
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    /// Merge configuration (JSON); built-in defaults when omitted.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Overrides the configured baseline_mode.
    #[arg(long, value_enum)]
    baseline: Option<Baseline>,
    #[arg(long, value_name = "FILE")]
    report: Option<PathBuf>,
    /// Overrides the config seed; falls back to RANKMERGE_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured step count.
    #[arg(long)]
    steps: Option<usize>,
    /// Overrides the configured learning rate.
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Overrides the configured lambda_layer_prior.
    #[arg(long)]
    lambda: Option<f64>,
    /// Record wall time in the report (makes reports run-dependent).
    #[arg(long)]
    timing: bool,
    #[command(flatten)]
    jobs: Jobs,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long, value_name = "FILE")]
    adapter: PathBuf,
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    /// Entries strictly above this value count toward a merger's rank.
    #[arg(long, default_value_t = 0.05)]
    threshold: f64,
    /// Where to write the histograms as JSON.
    #[arg(long, value_name = "FILE")]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 200)]
    trials: usize,
    /// Matrix shape as `<d_out>x<d_in>`.
    #[arg(long, value_parser = parse_dims)]
    dims: (usize, usize),
    #[arg(long)]
    rank: usize,
    /// Rows kept by the output mask (d_s).
    #[arg(long)]
    active_outputs: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Force enumeration of all row subsets (d_out <= 20).
    #[arg(long, conflicts_with = "greedy")]
    exhaustive: bool,
    /// Force the separable row-cost search.
    #[arg(long)]
    greedy: bool,
    #[arg(long, value_name = "FILE")]
    report: Option<PathBuf>,
    #[command(flatten)]
    jobs: Jobs,
}

#[derive(Args)]
struct InitArgs {
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    #[arg(long, default_value_t = 64)]
    rank: usize,
    #[arg(long, default_value_t = 0.1)]
    t_content: f64,
    #[arg(long, default_value_t = 0.0)]
    t_style: f64,
    #[arg(long)]
    seed: Option<u64>,
    /// Where to write the masks as JSON.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    layers: usize,
    /// Layer shape as `<d_out>x<d_in>` or a single size for square layers.
    #[arg(long, value_parser = parse_dims)]
    dims: (usize, usize),
    #[arg(long)]
    rank: usize,
    /// Defaults to the rank (unit scale).
    #[arg(long)]
    alpha: Option<f64>,
    /// Comma-separated singular values of every layer's A·B.
    #[arg(long, value_delimiter = ',')]
    spectrum: Option<Vec<f64>>,
    #[arg(long, default_value = "content")]
    role: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Also write a manifest listing the generated layers.
    #[arg(long, value_name = "FILE")]
    manifest_out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long = "in", value_name = "FILE")]
    input: PathBuf,
}

#[derive(Args)]
struct Jobs {
    /// Worker threads; 1 runs sequentially. Output is identical for any value.
    #[arg(long)]
    jobs: Option<usize>,
}

fn parse_dims(s: &str) -> Result<(usize, usize), String> {
    let parse = |t: &str| {
        t.trim()
            .parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| format!("{t:?} is not a positive integer"))
    };
    match s.split_once(['x', 'X']) {
        Some((a, b)) => Ok((parse(a)?, parse(b)?)),
        None => {
            let d = parse(s)?;
            Ok((d, d))
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Validation(_) | Error::Format(_) => 2,
        Error::Numeric(_) => 3,
        Error::Io { .. } => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Merge(a) => commands::merge(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::VerifyTheorem(a) => commands::verify_theorem(a),
        Command::InitMasks(a) => commands::init_masks(a),
        Command::Gen(a) => commands::gen(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
