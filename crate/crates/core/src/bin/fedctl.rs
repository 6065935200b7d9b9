use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use osdf_fed::client::{ClientError, FedClient, DIRECTOR_ENV};
use osdf_fed::{GeoPoint, ObjectPath};

const EXIT_NOT_FOUND: u8 = 2;
const EXIT_ALL_FAILED: u8 = 3;
const EXIT_BAD_ARGS: u8 = 4;

/// Command-line client for the data federation.
#[derive(Debug, Parser)]
#[command(name = "fedctl", version)]
struct Cli {
    /// Director base URL.
    #[arg(long, global = true, env = DIRECTOR_ENV, default_value = "http://127.0.0.1:8444")]
    director: String,
    /// Client location "lat,lon" sent instead of relying on GeoIP.
    #[arg(long, global = true)]
    geo: Option<GeoPoint>,
    /// Name reported to services for accounting.
    #[arg(long, global = true)]
    client_name: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Download an object through the nearest cache.
    Get {
        path: ObjectPath,
        #[arg(short = 'o', long = "output")]
        output: PathBuf,
        /// Go straight to the origin.
        #[arg(long)]
        no_cache: bool,
        /// Take the source list from the director's redirect.
        #[arg(long)]
        follow_redirect: bool,
    },
    /// Upload a local file to the origin that owns the path.
    Put { file: PathBuf, path: ObjectPath },
    /// Show where a path resolves.
    Locate { path: ObjectPath },
    /// Transfer accounting totals.
    Stats {
        #[arg(long)]
        service: Option<String>,
        #[arg(long)]
        since: Option<u64>,
    },
}

fn exit_for(e: &ClientError) -> u8 {
    if e.is_not_found() {
        EXIT_NOT_FOUND
    } else {
        match e {
            ClientError::AllSourcesFailed(_) => EXIT_ALL_FAILED,
            ClientError::Local { .. } => EXIT_BAD_ARGS,
            _ => 1,
        }
    }
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

async fn run(cli: Cli) -> Result<(), ClientError> {
    let mut client = FedClient::new(&cli.director);
    if let Some(geo) = cli.geo {
        client = client.with_geo(geo);
    }
    if let Some(name) = &cli.client_name {
        client = client.with_name(name);
    }
    match cli.command {
        Command::Get {
            path,
            output,
            no_cache,
            follow_redirect,
        } => {
            let report = client.follow_redirects(follow_redirect).fetch(&path, &output, no_cache).await?;
            print_json(&report);
        }
        Command::Put { file, path } => {
            let bytes = client.store(&file, &path).await?;
            print_json(&serde_json::json!({ "path": path, "bytes": bytes }));
        }
        Command::Locate { path } => print_json(&client.locate(&path).await?),
        Command::Stats { service, since } => print_json(&client.stats(service.as_deref(), since).await?),
    }
    Ok(())
}

#[tokio::main]
async fn main() -> ExitCode {
    osdf_fed::node::init_tracing();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_BAD_ARGS)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fedctl: {e}");
            ExitCode::from(exit_for(&e))
        }
    }
}
