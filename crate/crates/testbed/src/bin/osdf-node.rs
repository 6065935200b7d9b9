use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use osdf_fed::node::{self, NodeKind};

/// Runs one director, origin or cache from a JSON config file.
///
/// Prints `READY <base_url>` once serving and exits cleanly on SIGTERM.
#[derive(Debug, Parser)]
#[command(name = "osdf-node", version)]
struct Cli {
    #[arg(value_enum)]
    kind: NodeKind,
    /// Service config as JSON, matching the kind.
    #[arg(long)]
    config: PathBuf,
}

#[tokio::main]
async fn main() -> ExitCode {
    node::init_tracing();
    let cli = Cli::parse();
    match node::run(cli.kind, &cli.config).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("osdf-node: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
