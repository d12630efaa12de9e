//! `softtwin`: scenario generation, training, evaluation and the
//! playground server.

mod commands;
mod server;

use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use softtwin_core::scenario::{MismatchKind, ObjectKind, ScriptKind};

#[derive(Debug, Parser)]
#[command(name = "softtwin", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize a sequence bundle from a teacher simulation.
    GenScenario(commands::GenArgs),
    /// Fit materials, residual and actuator gains to a bundle.
    Train {
        #[arg(long)]
        bundle: PathBuf,
        /// TOML training config; defaults apply to absent fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for the fitted model, `loss.csv` and `report.txt`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Roll a fitted model out over a bundle and write per-frame metrics.
    Eval {
        #[arg(long)]
        bundle: PathBuf,
        /// Model directory written by `train`.
        #[arg(long)]
        params: PathBuf,
        /// CSV path for per-frame Chamfer and track error.
        #[arg(long)]
        report: PathBuf,
    },
    /// Serve interactive sessions over a websocket at `/ws`.
    Serve {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: SocketAddr,
        /// Step as fast as possible instead of pacing to simulated time.
        #[arg(long)]
        no_realtime: bool,
    },
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::GenScenario(args) => commands::gen_scenario(&args),
        Command::Train {
            bundle,
            config,
            out,
        } => commands::train(&bundle, config.as_deref(), &out),
        Command::Eval {
            bundle,
            params,
            report,
        } => commands::eval(&bundle, &params, &report),
        Command::Serve {
            params,
            bundle,
            listen,
            no_realtime,
        } => server::serve(&params, &bundle, listen, !no_realtime),
    }
}

/// Parsers for the core enums, which implement `FromStr`.
fn parse_kind(s: &str) -> Result<ObjectKind, String> {
    s.parse().map_err(|e: softtwin_core::Error| e.to_string())
}

fn parse_mismatch(s: &str) -> Result<MismatchKind, String> {
    s.parse().map_err(|e: softtwin_core::Error| e.to_string())
}

fn parse_script(s: &str) -> Result<ScriptKind, String> {
    s.parse().map_err(|e: softtwin_core::Error| e.to_string())
}
