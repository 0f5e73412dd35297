use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use ann_cli::{commands, CliError, ExperimentConfig};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    /// One forward pass on a seeded input.
    Demo,
    /// Identity-sampler equivalence of a sampled block and its dense form.
    Equivalence,
    /// Analytic multiply-accumulate and memory estimates.
    Flops,
    /// Reverse-mode gradients against finite differences.
    Gradcheck,
    /// Phase-level timing and allocation benchmark.
    Bench,
}

/// Non-local attention block experiments.
#[derive(Debug, Parser)]
#[command(name = "ann", version)]
struct Cli {
    command: Command,
    /// JSON experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Compare estimates with the published reference figures (flops).
    #[arg(long)]
    table1: bool,
    /// Run the benchmark untiled at the configured size, after a memory check.
    #[arg(long)]
    full: bool,
    /// Output path; overrides the config's `output`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Perturb weights between the two equivalence runs.
    #[arg(long, hide = true)]
    corrupt: bool,
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = cli
        .config
        .as_deref()
        .map(ExperimentConfig::load)
        .transpose()?;
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.as_ref().and_then(|c| c.output.clone()));
    let out = out.as_deref();
    if let Command::Flops = cli.command {
        return commands::flops(cfg.as_ref(), cli.table1, out);
    }
    let cfg = cfg.ok_or_else(|| CliError::Config("config: --config is required".into()))?;
    match cli.command {
        Command::Demo => commands::demo(&cfg, out),
        Command::Equivalence => commands::equivalence(&cfg, out, cli.corrupt),
        Command::Gradcheck => commands::gradcheck(&cfg, out),
        Command::Bench => commands::bench(&cfg, cli.full, out),
        Command::Flops => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
