use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use lorashift_core::pipeline::{self, Job, JobConfig, Outcome};
use lorashift_core::{Combine, Matching, TransferMode};

/// Move low-rank adapters between model checkpoints by projecting them
/// through each weight's singular subspaces.
#[derive(Parser, Debug)]
#[command(name = "lorashift", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Score every source module against every target module and write the pairing.
    Pair(JobArgs),
    /// Transfer an adapter to the target checkpoint.
    Transfer(JobArgs),
    /// Decompose an adapter against its source checkpoint without transferring.
    Analyze(JobArgs),
    /// Generate a synthetic checkpoint pair, adapter and ground truth from a spec file.
    Synth(SynthArgs),
}

fn parse<T: FromStr>(s: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| e.to_string())
}

#[derive(Args, Debug)]
struct JobArgs {
    /// TOML job file; flags given on the command line take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Source checkpoint the adapter was trained on.
    #[arg(long)]
    source: Option<PathBuf>,
    /// Target checkpoint.
    #[arg(long)]
    target: Option<PathBuf>,
    /// Adapter archive.
    #[arg(long)]
    adapter: Option<PathBuf>,
    /// Output file (pairing JSON for `pair`, adapter for `transfer`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report file; `.csv` selects CSV, anything else JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Minimum combined similarity for a pair [default: 0.8].
    #[arg(long)]
    threshold: Option<f64>,
    /// full | subspace_only | nullspace_only | copy | copy_projected | factorwise [default: full].
    #[arg(long, value_parser = parse::<TransferMode>)]
    mode: Option<TransferMode>,
    /// Output adapter rank [default: rank of each input module].
    #[arg(long)]
    rank: Option<usize>,
    /// Relative singular-value cutoff for numerical rank [default: 1e-8].
    #[arg(long)]
    rank_tol: Option<f64>,
    /// How left and right similarity combine: mean | min [default: mean].
    #[arg(long, value_parser = parse::<Combine>)]
    combine: Option<Combine>,
    /// greedy | optimal [default: greedy].
    #[arg(long, value_parser = parse::<Matching>)]
    matching: Option<Matching>,
    /// Per-module mode, `<glob>=<mode>` on source module paths; repeatable, first match wins.
    #[arg(long = "override", value_name = "GLOB=MODE")]
    overrides: Vec<String>,
    /// Worker threads [default: available CPUs].
    #[arg(long)]
    jobs: Option<usize>,
    /// Output factor dtype: f16 | bf16 | f32 | f64 [default: f32].
    #[arg(long)]
    dtype: Option<String>,
    /// Directory for the persistent spectral cache.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Record wall-clock time in the report (makes reports run-dependent).
    #[arg(long)]
    timing: bool,
}

impl JobArgs {
    fn into_job(self) -> lorashift_core::Result<Job> {
        let file = match &self.config {
            Some(p) => JobConfig::from_path(p)?,
            None => JobConfig::default(),
        };
        let flags = JobConfig {
            source: self.source,
            target: self.target,
            adapter: self.adapter,
            out: self.out,
            report: self.report,
            threshold: self.threshold,
            mode: self.mode,
            rank: self.rank,
            rank_tol: self.rank_tol,
            combine: self.combine,
            matching: self.matching,
            overrides: self.overrides,
            jobs: self.jobs,
            dtype: self.dtype,
            cache_dir: self.cache_dir,
            timing: self.timing.then_some(true),
        };
        Job::resolve(flags.or(file))
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Spec file (TOML, or JSON with a `.json` extension).
    spec: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn run(cli: Cli) -> lorashift_core::Result<Outcome> {
    match cli.command {
        Command::Pair(args) => pipeline::cmd_pair(&args.into_job()?),
        Command::Transfer(args) => pipeline::cmd_transfer(&args.into_job()?),
        Command::Analyze(args) => pipeline::cmd_analyze(&args.into_job()?),
        Command::Synth(args) => pipeline::cmd_synth(&args.spec, &args.out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(outcome) => {
            println!("{}", outcome.summary);
            ExitCode::from(outcome.code as u8)
        }
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(pipeline::exit_code(&e) as u8)
        }
    }
}
