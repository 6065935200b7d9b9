//! Launches the desk topology as separate processes, runs every scenario
//! and shuts down. Build the node binary first: `cargo build -p osdf-testbed`.

use std::path::Path;
use std::time::Duration;

use osdf_testbed::launch::default_node_bin;
use osdf_testbed::{launch, run_scenario, LaunchOptions, TopologySpec, SCENARIOS};

pub async fn run_example(node_bin: &Path) -> Result<Vec<(String, bool)>, Box<dyn std::error::Error>> {
    let work = tempfile::tempdir()?;
    let mut fed = launch(&TopologySpec::desk(), &LaunchOptions::new(node_bin, work.path())).await?;
    println!("director at {}", fed.director_url);
    for (name, role, url) in fed.services() {
        println!("  {name:<15} {role:?} {url}");
    }
    let mut results = Vec::new();
    // failover kills a cache, so it goes last.
    let mut order = SCENARIOS.to_vec();
    order.sort_by_key(|s| *s == "failover");
    for scenario in order {
        let passed = match run_scenario(&mut fed, scenario).await {
            Ok(report) => report.passed,
            Err(e) => {
                println!("{e}");
                false
            }
        };
        println!("{scenario:<12} {}", if passed { "passed" } else { "FAILED" });
        results.push((scenario.to_string(), passed));
    }
    let report = fed.shutdown(Duration::from_secs(10)).await;
    println!(
        "stopped {} processes, {} accounting records",
        report.stopped,
        report.accounting_records.unwrap_or(0)
    );
    Ok(results)
}

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example(&default_node_bin()).await.map(|_| ())
}
