mod args;

use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Parser;

use args::Cli;

fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        anyhow::ensure!(jobs > 0, "--jobs must be positive");
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let config = cli.command.into_config()?;
    let output = bqkit::run::execute(&config)?;
    for file in &output.files {
        log::info!("wrote {}", file.display());
    }
    println!("{}", output.summary);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
