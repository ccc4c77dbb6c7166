use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedspa_cli::{cmd_compare, cmd_run, cmd_verify, exit, Options};

/// Federated one-shot pruning simulator.
#[derive(Parser)]
#[command(name = "fedspa", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Output directory; overrides `output_dir` in the config.
    #[arg(long, global = true, env = "FEDSPA_OUT")]
    out: Option<PathBuf>,

    /// Worker threads for client pruning (0 = all cores).
    #[arg(long, global = true, env = "FEDSPA_JOBS")]
    jobs: Option<usize>,

    /// Replaces `federation.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the federated experiment; writes rounds.jsonl, eval.csv, final.fspa.
    Run { config: PathBuf },
    /// Standalone vs federated vs random over the eval sparsity grid; writes compare.csv.
    Compare { config: PathBuf },
    /// Check exact sparsity and sampling unbiasedness; prints PASS/FAIL per property.
    Verify { config: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let opts = Options {
        out: cli.out,
        jobs: cli.jobs,
        seed: cli.seed,
    };
    let result = match &cli.command {
        Command::Run { config } => cmd_run(config, &opts).map(drop),
        Command::Compare { config } => cmd_compare(config, &opts).map(drop),
        Command::Verify { config } => cmd_verify(config, &opts).map(drop),
    };
    match result {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
