use clap::Parser;
use transem_cli::args::{merge_with_file, Cli, Command};
use transem_cli::commands::{cmd_ablate, cmd_eval, cmd_recon, cmd_simulate, cmd_train};
use transem_cli::error::{CliError, CliResult};

/// Sizes the global thread pool from `TRANSEM_THREADS` when set.
fn configure_threads() -> CliResult<()> {
    let Ok(value) = std::env::var("TRANSEM_THREADS") else {
        return Ok(());
    };
    let n: usize = value.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::config(format!(
            "TRANSEM_THREADS={value:?} is not a positive integer"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::config(e.to_string()))
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    match cli.command {
        Command::Simulate(a) => cmd_simulate(&merge_with_file(&a, a.config.as_deref())?),
        Command::Recon(a) => cmd_recon(&merge_with_file(&a, a.config.as_deref())?),
        Command::Train(a) => cmd_train(&merge_with_file(&a, a.config.as_deref())?),
        Command::Eval(a) => cmd_eval(&merge_with_file(&a, a.config.as_deref())?),
        Command::Ablate(a) => cmd_ablate(&merge_with_file(&a, a.config.as_deref())?),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
