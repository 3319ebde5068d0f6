mod commands;
mod config;
mod error;
mod figures;

use clap::Parser;

fn main() {
    let cli = match commands::Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    if let Err(e) = commands::run(cli) {
        eprintln!("{e}");
        std::process::exit(e.exit_code());
    }
}
