use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use osdf_testbed::launch::{default_node_bin, state_path};
use osdf_testbed::{launch, run_scenario, Federation, FederationState, LaunchOptions, TopologySpec};

/// Runs a local federation of osdf-node processes.
#[derive(Debug, Parser)]
#[command(name = "fedbed", version)]
struct Cli {
    /// Where configs, logs, service data and the state file live.
    #[arg(long, global = true, default_value = ".fedbed")]
    work_dir: PathBuf,
    /// osdf-node executable; defaults to $OSDF_NODE_BIN or the one next to fedbed.
    #[arg(long, global = true)]
    node_bin: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Start the topology in the background and record it in the work dir.
    Up {
        #[arg(long)]
        topology: PathBuf,
    },
    /// Run a scenario: cold-hot, stampede, failover or bbso-cycle.
    ///
    /// With --topology a fresh federation is started and stopped around the
    /// run; without it the one from `fedbed up` is used.
    Run {
        scenario: String,
        #[arg(long)]
        topology: Option<PathBuf>,
    },
    /// Stop the federation started by `fedbed up`.
    Down,
    /// Print a sample topology: the desk layout, or a scaled one.
    Topology {
        #[arg(long, num_args = 2, value_names = ["ORIGINS", "CACHES"])]
        scaled: Option<Vec<usize>>,
    },
}

fn fail(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("fedbed: {msg}");
    ExitCode::FAILURE
}

fn print_json(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn load_state(work_dir: &Path) -> Result<FederationState, String> {
    let path = state_path(work_dir);
    let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e} (is a federation up?)", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn save_state(work_dir: &Path, state: &FederationState) -> Result<(), String> {
    let path = state_path(work_dir);
    std::fs::write(&path, serde_json::to_vec_pretty(state).expect("state serializes")).map_err(|e| format!("{}: {e}", path.display()))
}

#[tokio::main]
async fn main() -> ExitCode {
    osdf_fed::node::init_tracing();
    let cli = Cli::parse();
    let node_bin = cli.node_bin.clone().unwrap_or_else(default_node_bin);
    match cli.command {
        Command::Up { topology } => {
            if state_path(&cli.work_dir).exists() {
                return fail(format!("{} already holds a running federation; run `fedbed down` first", cli.work_dir.display()));
            }
            let spec = match TopologySpec::load(&topology) {
                Ok(s) => s,
                Err(e) => return fail(e),
            };
            match launch(&spec, &LaunchOptions::new(node_bin, &cli.work_dir)).await {
                Ok(fed) => {
                    let state = fed.detach();
                    if let Err(e) = save_state(&state.work_dir, &state) {
                        return fail(e);
                    }
                    print_json(&serde_json::json!({ "director_url": state.director_url, "services": state.services }));
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::Run { scenario, topology } => {
            let (mut fed, fresh) = match topology {
                Some(path) => {
                    let spec = match TopologySpec::load(&path) {
                        Ok(s) => s,
                        Err(e) => return fail(e),
                    };
                    match launch(&spec, &LaunchOptions::new(node_bin, &cli.work_dir)).await {
                        Ok(fed) => (fed, true),
                        Err(e) => return fail(e),
                    }
                }
                None => match load_state(&cli.work_dir) {
                    Ok(state) => (Federation::attach(state), false),
                    Err(e) => return fail(e),
                },
            };
            let outcome = run_scenario(&mut fed, &scenario).await;
            if fresh {
                fed.shutdown(Duration::from_secs(10)).await;
            } else if let Err(e) = save_state(&fed.work_dir.clone(), &fed.state()) {
                eprintln!("fedbed: {e}");
            }
            match outcome {
                Ok(report) => {
                    print_json(&report);
                    ExitCode::SUCCESS
                }
                Err(osdf_testbed::ScenarioError::Failed { scenario, assertion, evidence }) => {
                    print_json(&serde_json::json!({ "scenario": scenario, "passed": false, "failure": assertion, "evidence": evidence }));
                    ExitCode::FAILURE
                }
                Err(e) => fail(e),
            }
        }
        Command::Down => {
            let state = match load_state(&cli.work_dir) {
                Ok(s) => s,
                Err(e) => return fail(e),
            };
            let report = Federation::attach(state).shutdown(Duration::from_secs(10)).await;
            let _ = std::fs::remove_file(state_path(&cli.work_dir));
            print_json(&report);
            ExitCode::SUCCESS
        }
        Command::Topology { scaled } => {
            let spec = match scaled.as_deref() {
                Some([origins, caches]) => TopologySpec::scaled(*origins, *caches, 4, 1),
                _ => TopologySpec::desk(),
            };
            print_json(&spec);
            ExitCode::SUCCESS
        }
    }
}
