use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use covnn::cli::{cmd_brainage, cmd_gen, cmd_stats, cmd_train, cmd_transfer, RunContext};

/// coVariance neural networks for brain-age estimation.
#[derive(Debug, Parser)]
#[command(name = "covnn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out_dir` in the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides `seed` in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for ensemble training.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic multi-scale and multi-site cohorts.
    Gen(Common),
    /// Train the ensemble.
    Train(Common),
    /// Bias-correct ensemble estimates and compute Δ-Age.
    Brainage(Common),
    /// Evaluate the trained taps on other scales and sites.
    Transfer(Common),
    /// Group statistics for Δ-Age reports.
    Stats {
        #[command(flatten)]
        common: Common,
        /// Report to analyse (repeatable); defaults to every report of the run.
        #[arg(long)]
        report: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> covnn::Result<()> {
    let (common, reports) = match &cli.command {
        Command::Gen(c) | Command::Train(c) | Command::Brainage(c) | Command::Transfer(c) => (c, &[][..]),
        Command::Stats { common, report } => (common, report.as_slice()),
    };
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| covnn::Error::Config(e.to_string()))?;
    }
    let ctx = RunContext::load(&common.config, common.out.clone(), common.seed)?;
    let manifest = match cli.command {
        Command::Gen(_) => cmd_gen(&ctx)?,
        Command::Train(_) => cmd_train(&ctx)?,
        Command::Brainage(_) => cmd_brainage(&ctx)?,
        Command::Transfer(_) => cmd_transfer(&ctx)?,
        Command::Stats { .. } => cmd_stats(&ctx, reports)?,
    };
    eprintln!(
        "{}: wrote {} files to {}",
        manifest.command,
        manifest.outputs.len(),
        ctx.out.display()
    );
    Ok(())
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
