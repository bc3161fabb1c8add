use clap::Parser;
use scate_cli::{execute, Cli, RunConfig, EXIT_ERROR};

fn main() {
    let cli = Cli::parse();
    let status = RunConfig::resolve(cli).and_then(|cfg| execute(&cfg)).unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        EXIT_ERROR
    });
    std::process::exit(status);
}
