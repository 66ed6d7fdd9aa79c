//! `wgm`: runs the quasimode pipeline from a TOML configuration.
//!
//! Exit status: 0 success, 2 configuration error, 3 numerical or regime
//! error, 4 audit failure.

mod config;
mod output;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use crate::output::{Meta, Sink};
use crate::stages::{Context, Stage};

#[derive(Debug, Parser)]
#[command(name = "wgm", version, about = "Whispering-gallery quasimodes in a solid torus of revolution")]
struct Cli {
    /// Pipeline stage to run.
    #[arg(value_enum)]
    stage: Stage,
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output.directory`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated `h` values for the residual sweep (`a_n` held fixed).
    #[arg(long, value_delimiter = ',')]
    h_sweep: Vec<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let text = match std::fs::read_to_string(&cli.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("config: {}: {e}", cli.config.display());
            return ExitCode::from(2);
        }
    };
    let cfg = match config::parse_config(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config: {}: {e}", cli.config.display());
            return ExitCode::from(2);
        }
    };
    if let Some(h) = cli.h_sweep.iter().find(|h| !(**h > 0.0 && h.is_finite())) {
        eprintln!("config: --h-sweep values must be positive, got {h}");
        return ExitCode::from(2);
    }
    let dir = cli.out.clone().unwrap_or_else(|| cfg.output.directory.clone());
    let sink = match Sink::new(&dir, Meta::new(&text)) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("output: {}: {e}", dir.display());
            return ExitCode::from(3);
        }
    };
    let mut ctx = Context::new(&cfg, sink, cli.h_sweep);
    match ctx.run(cli.stage) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_audit() { 4 } else { 3 })
        }
    }
}
