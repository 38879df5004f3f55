mod commands;
mod config;
mod failure;

use clap::Parser;

use config::{Cli, Command, RunConfig};
use failure::Failure;

fn run(cli: &Cli) -> Result<(), Failure> {
    let c = RunConfig::resolve(cli)?;
    if let Some(w) = c.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    match &cli.command {
        Command::Train(_) => commands::train(&c),
        Command::Eval(_) => commands::eval(&c),
        Command::Simulate(_) => commands::simulate(&c),
        Command::ExportHierarchy(_) => commands::export_hierarchy(&c),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
