//! Command-line front end. `main` is a thin shell over [`run`] so the whole
//! path from arguments to exit code is testable in-process.

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::{run_subcommand, Overrides, Threads};

/// Moderate-deviation experiments for mean-field particle systems.
#[derive(Parser)]
#[command(name = "mdplab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the declared structural hypotheses of the model.
    Check(RunArgs),
    /// Run the particle system and write the final cloud and tracked paths.
    Simulate(RunArgs),
    /// Estimate the invariant law by burn-in and time averaging.
    Invariant(RunArgs),
    /// Green–Kubo asymptotic variance of an observable.
    Variance(RunArgs),
    /// W₂ distance to the invariant law against the exponential bound.
    Contraction(RunArgs),
    /// Pathwise bound along synchronously coupled pairs.
    Pathwise(RunArgs),
    /// Tail curve of the moderate functional.
    #[command(name = "mdp-tail")]
    MdpTail(RunArgs),
    /// Tail of the gap between the coupled moderate functionals.
    Equivalence(RunArgs),
    /// Exponential-moment probes of coupled path functionals.
    Probe(RunArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads, a positive integer or `auto`.
    #[arg(long)]
    threads: Option<Threads>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

/// Why a run stopped: the process exit code and the text for stderr (or
/// stdout, for `--help` and `--version`, which exit 0).
#[derive(Debug)]
pub struct Exit {
    pub code: u8,
    pub message: String,
}

/// Parse `args` (program name first) and run the chosen subcommand.
pub fn run<I, T>(args: I) -> Result<Vec<String>, Exit>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Exit {
        code: e.exit_code() as u8,
        message: e.render().to_string(),
    })?;
    let (name, args) = match &cli.command {
        Command::Check(a) => ("check", a),
        Command::Simulate(a) => ("simulate", a),
        Command::Invariant(a) => ("invariant", a),
        Command::Variance(a) => ("variance", a),
        Command::Contraction(a) => ("contraction", a),
        Command::Pathwise(a) => ("pathwise", a),
        Command::MdpTail(a) => ("mdp-tail", a),
        Command::Equivalence(a) => ("equivalence", a),
        Command::Probe(a) => ("probe", a),
    };
    let Format::Csv = args.format;
    let text = fs::read_to_string(&args.config).map_err(|e| Exit {
        code: 2,
        message: format!("mdplab: cannot read {}: {e}", args.config.display()),
    })?;
    let ov = Overrides {
        seed: args.seed,
        out_dir: args.out.clone(),
        threads: args.threads,
    };
    run_subcommand(name, &text, &ov).map_err(|e| Exit {
        code: e.exit_code(),
        message: format!("mdplab: {e}"),
    })
}
