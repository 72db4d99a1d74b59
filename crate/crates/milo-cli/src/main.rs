//! `milo`: reproducible desk-scale experiments for entropy-scaled losses.
//! Each command reads a JSON config (plus `--set` overrides), writes its
//! outputs and an effective-config snapshot under `--out-dir`, and exits
//! with a category code on failure: 2 config, 3 numeric, 4 I/O.

mod commands;
mod config;

use clap::Parser;

fn main() {
    let cli = commands::Cli::parse();
    if let Err(e) = commands::run(cli) {
        eprintln!("error[{}]: {e}", e.category().name());
        std::process::exit(e.category().exit_code());
    }
}
