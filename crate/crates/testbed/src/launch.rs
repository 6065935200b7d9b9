//! Starts a federation as separate `osdf-node` processes on loopback.
//!
//! The director comes up first; origins and then caches are started
//! concurrently against it. Each process announces itself with a
//! `READY <base_url>` line and its stderr goes to `<work_dir>/logs/<name>.log`.

use std::path::{Path, PathBuf};
use std::process::Stdio;
use std::time::Duration;

use osdf_fed::accounting::read_log;
use osdf_fed::client::FedClient;
use osdf_fed::director::DirectorConfig;
use osdf_fed::node::{EXIT_CONFIG, EXIT_PORT_IN_USE, EXIT_REGISTRATION_FAILED};
use serde::{Deserialize, Serialize};
use tokio::io::{AsyncBufReadExt, BufReader};
use tokio::process::{Child, Command};

use crate::topology::{TopologyError, TopologySpec};

pub const NODE_BIN_ENV: &str = "OSDF_NODE_BIN";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Director,
    Origin,
    Cache,
}

impl Role {
    fn arg(self) -> &'static str {
        match self {
            Role::Director => "director",
            Role::Origin => "origin",
            Role::Cache => "cache",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LaunchError {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("{service}: listen address already in use")]
    PortInUse { service: String },
    #[error("{service}: registration failed: {reason}")]
    RegistrationFailed { service: String, reason: String },
    #[error("{service}: exited during startup ({status}): {reason}")]
    Exited { service: String, status: String, reason: String },
    #[error("{service}: no READY line within {seconds} s")]
    Timeout { service: String, seconds: u64 },
    #[error("director lists {listed} services, expected {expected}")]
    Incomplete { listed: usize, expected: usize },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> LaunchError {
    let context = context.into();
    move |source| LaunchError::Io { context, source }
}

#[derive(Debug, Clone)]
pub struct LaunchOptions {
    pub node_bin: PathBuf,
    pub work_dir: PathBuf,
    pub ready_timeout: Duration,
}

impl LaunchOptions {
    pub fn new(node_bin: impl Into<PathBuf>, work_dir: impl Into<PathBuf>) -> Self {
        LaunchOptions {
            node_bin: node_bin.into(),
            work_dir: work_dir.into(),
            ready_timeout: Duration::from_secs(30),
        }
    }
}

/// `$OSDF_NODE_BIN`, else the `osdf-node` built alongside the running executable.
pub fn default_node_bin() -> PathBuf {
    if let Some(p) = std::env::var_os(NODE_BIN_ENV) {
        return p.into();
    }
    let Some(mut dir) = std::env::current_exe().ok().and_then(|e| e.parent().map(Path::to_path_buf)) else {
        return PathBuf::from("osdf-node");
    };
    // cargo puts examples and test binaries one level below the bins.
    if dir.ends_with("examples") || dir.ends_with("deps") {
        dir.pop();
    }
    dir.join("osdf-node")
}

#[derive(Debug)]
pub struct ServiceProc {
    pub name: String,
    pub role: Role,
    pub base_url: String,
    pub pid: u32,
    child: Option<Child>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServiceEntry {
    pub name: String,
    pub role: Role,
    pub base_url: String,
    pub pid: u32,
}

/// What `fedbed up` leaves behind for later commands.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FederationState {
    pub director_url: String,
    pub work_dir: PathBuf,
    pub spec: TopologySpec,
    pub services: Vec<ServiceEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShutdownReport {
    pub stopped: usize,
    pub forced: Vec<String>,
    /// Records in the director's log after shutdown; `None` when it could not be parsed.
    pub accounting_records: Option<usize>,
}

/// A running federation. Dropping it kills every process it started.
#[derive(Debug)]
pub struct Federation {
    pub spec: TopologySpec,
    pub work_dir: PathBuf,
    pub director_url: String,
    procs: Vec<ServiceProc>,
}

fn absolutize(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn tail(path: &Path, lines: usize) -> String {
    let text = std::fs::read_to_string(path).unwrap_or_default();
    let all: Vec<&str> = text.lines().collect();
    all[all.len().saturating_sub(lines)..].join(" | ")
}

async fn spawn_node(
    opts: &LaunchOptions,
    name: &str,
    role: Role,
    config: &serde_json::Value,
) -> Result<ServiceProc, LaunchError> {
    let config_path = opts.work_dir.join("config").join(format!("{name}.json"));
    let log_path = opts.work_dir.join("logs").join(format!("{name}.log"));
    std::fs::write(&config_path, serde_json::to_vec_pretty(config).expect("config serializes"))
        .map_err(io(config_path.display().to_string()))?;
    let log = std::fs::File::create(&log_path).map_err(io(log_path.display().to_string()))?;
    let mut child = Command::new(&opts.node_bin)
        .arg(role.arg())
        .arg("--config")
        .arg(&config_path)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::from(log))
        .kill_on_drop(true)
        .spawn()
        .map_err(io(format!("spawn {} for {name}", opts.node_bin.display())))?;
    let pid = child.id().unwrap_or(0);
    let stdout = child.stdout.take().expect("stdout piped");
    let mut lines = BufReader::new(stdout).lines();

    let ready = tokio::time::timeout(opts.ready_timeout, async {
        while let Ok(Some(line)) = lines.next_line().await {
            if let Some(url) = line.strip_prefix("READY ") {
                return Some(url.trim().to_owned());
            }
        }
        None
    })
    .await;
    match ready {
        Ok(Some(base_url)) => {
            // keep draining so a chatty node never blocks on a full pipe
            tokio::spawn(async move { while let Ok(Some(_)) = lines.next_line().await {} });
            Ok(ServiceProc {
                name: name.to_owned(),
                role,
                base_url,
                pid,
                child: Some(child),
            })
        }
        Ok(None) => {
            let status = child.wait().await.map_err(io(format!("wait for {name}")))?;
            let reason = tail(&log_path, 3);
            let service = name.to_owned();
            Err(match status.code() {
                Some(EXIT_PORT_IN_USE) => LaunchError::PortInUse { service },
                Some(EXIT_REGISTRATION_FAILED) => LaunchError::RegistrationFailed { service, reason },
                Some(EXIT_CONFIG) => LaunchError::Exited {
                    service,
                    status: "bad config".into(),
                    reason,
                },
                _ => LaunchError::Exited {
                    service,
                    status: status.to_string(),
                    reason,
                },
            })
        }
        Err(_) => {
            let _ = child.kill().await;
            Err(LaunchError::Timeout {
                service: name.to_owned(),
                seconds: opts.ready_timeout.as_secs(),
            })
        }
    }
}

/// Launches the whole topology; on any failure everything already started is stopped.
pub async fn launch(spec: &TopologySpec, opts: &LaunchOptions) -> Result<Federation, LaunchError> {
    spec.validate()?;
    let work_dir = std::path::absolute(&opts.work_dir).map_err(io("work dir"))?;
    for sub in ["config", "logs"] {
        std::fs::create_dir_all(work_dir.join(sub)).map_err(io(work_dir.display().to_string()))?;
    }
    let opts = LaunchOptions {
        work_dir: work_dir.clone(),
        ..opts.clone()
    };

    let director_config = DirectorConfig {
        listen_addr: spec.director.listen_addr.clone(),
        geo_table_path: spec.director.geo_table.as_ref().map(|p| absolutize(&work_dir, p)),
        staleness_s: spec.director.staleness_s.unwrap_or(osdf_fed::registry::DEFAULT_STALENESS_S),
        data_dir: Some(work_dir.join("director")),
    };
    let director = spawn_node(&opts, "director", Role::Director, &serde_json::to_value(&director_config).expect("serializes")).await?;
    let mut fed = Federation {
        spec: spec.clone(),
        work_dir: work_dir.clone(),
        director_url: director.base_url.clone(),
        procs: vec![director],
    };

    let origins = spec.origins.iter().map(|o| {
        let mut o = o.clone();
        o.root_dir = absolutize(&work_dir, &o.root_dir);
        o.director_url = fed.director_url.clone();
        let opts = &opts;
        async move {
            std::fs::create_dir_all(&o.root_dir).map_err(io(o.root_dir.display().to_string()))?;
            spawn_node(opts, &o.name, Role::Origin, &serde_json::to_value(&o).expect("serializes")).await
        }
    });
    fed.absorb(futures::future::join_all(origins).await)?;

    let caches = spec.caches.iter().map(|c| {
        let mut c = c.clone();
        c.store_dir = absolutize(&work_dir, &c.store_dir);
        c.director_url = fed.director_url.clone();
        let opts = &opts;
        async move { spawn_node(opts, &c.name, Role::Cache, &serde_json::to_value(&c).expect("serializes")).await }
    });
    fed.absorb(futures::future::join_all(caches).await)?;

    let expected = spec.origins.len() + spec.caches.len();
    let listed = fed
        .client("testbed")
        .services()
        .await
        .map(|s| s.len())
        .unwrap_or(0);
    if listed != expected {
        return Err(LaunchError::Incomplete { listed, expected });
    }
    Ok(fed)
}

impl Federation {
    /// Keeps the started processes; returns the first failure after they are all collected.
    fn absorb(&mut self, results: Vec<Result<ServiceProc, LaunchError>>) -> Result<(), LaunchError> {
        let mut first_error = None;
        for r in results {
            match r {
                Ok(p) => self.procs.push(p),
                Err(e) => {
                    first_error.get_or_insert(e);
                }
            }
        }
        first_error.map_or(Ok(()), Err)
    }

    /// Reconnects to a federation started earlier by `fedbed up`.
    pub fn attach(state: FederationState) -> Federation {
        Federation {
            spec: state.spec,
            work_dir: state.work_dir,
            director_url: state.director_url,
            procs: state
                .services
                .into_iter()
                .map(|s| ServiceProc {
                    name: s.name,
                    role: s.role,
                    base_url: s.base_url,
                    pid: s.pid,
                    child: None,
                })
                .collect(),
        }
    }

    pub fn state(&self) -> FederationState {
        FederationState {
            director_url: self.director_url.clone(),
            work_dir: self.work_dir.clone(),
            spec: self.spec.clone(),
            services: self
                .procs
                .iter()
                .map(|p| ServiceEntry {
                    name: p.name.clone(),
                    role: p.role,
                    base_url: p.base_url.clone(),
                    pid: p.pid,
                })
                .collect(),
        }
    }

    /// Lets the processes outlive this handle.
    pub fn detach(mut self) -> FederationState {
        let state = self.state();
        for p in &mut self.procs {
            if let Some(child) = p.child.take() {
                std::mem::forget(child);
            }
        }
        state
    }

    pub fn services(&self) -> impl Iterator<Item = (&str, Role, &str)> {
        self.procs.iter().map(|p| (p.name.as_str(), p.role, p.base_url.as_str()))
    }

    pub fn base_url(&self, name: &str) -> Option<&str> {
        self.procs.iter().find(|p| p.name == name).map(|p| p.base_url.as_str())
    }

    pub fn name_of(&self, base_url: &str) -> Option<&str> {
        self.procs
            .iter()
            .find(|p| base_url == p.base_url || base_url.strip_prefix(p.base_url.as_str()).is_some_and(|rest| rest.starts_with('/')))
            .map(|p| p.name.as_str())
    }

    pub fn accounting_log(&self) -> PathBuf {
        self.work_dir.join("director").join("transfers.jsonl")
    }

    /// Client against this federation, placed at the named client's geo when the topology has it.
    pub fn client(&self, name: &str) -> FedClient {
        let c = FedClient::new(&self.director_url).with_name(name);
        match self.spec.client(name) {
            Some(spec) => c.with_geo(spec.geo),
            None => c,
        }
    }

    /// Origin root directory as launched.
    pub fn origin_root(&self, name: &str) -> Option<PathBuf> {
        self.spec
            .origins
            .iter()
            .find(|o| o.name == name)
            .map(|o| absolutize(&self.work_dir, &o.root_dir))
    }

    /// SIGKILLs one service, as a crash would.
    pub async fn kill(&mut self, name: &str) -> bool {
        let Some(i) = self.procs.iter().position(|p| p.name == name) else {
            return false;
        };
        let mut p = self.procs.remove(i);
        signal(p.pid, libc::SIGKILL);
        if let Some(child) = p.child.as_mut() {
            let _ = child.wait().await;
        } else {
            wait_gone(p.pid, Duration::from_secs(5)).await;
        }
        true
    }

    /// SIGTERM to caches and origins, then the director; SIGKILL for anything
    /// still running after `grace`. Checks the accounting log parses afterwards.
    pub async fn shutdown(mut self, grace: Duration) -> ShutdownReport {
        let mut forced = Vec::new();
        let mut stopped = 0;
        let (director, services): (Vec<_>, Vec<_>) = std::mem::take(&mut self.procs)
            .into_iter()
            .partition(|p| p.role == Role::Director);
        for batch in [services, director] {
            for p in &batch {
                signal(p.pid, libc::SIGTERM);
            }
            for mut p in batch {
                let clean = match p.child.as_mut() {
                    Some(child) => tokio::time::timeout(grace, child.wait()).await.is_ok(),
                    None => wait_gone(p.pid, grace).await,
                };
                if !clean {
                    signal(p.pid, libc::SIGKILL);
                    if let Some(child) = p.child.as_mut() {
                        let _ = child.wait().await;
                    }
                    forced.push(p.name.clone());
                }
                stopped += 1;
            }
        }
        let log = self.accounting_log();
        let accounting_records = if log.exists() {
            read_log(&log).ok().map(|r| r.len())
        } else {
            Some(0)
        };
        ShutdownReport {
            stopped,
            forced,
            accounting_records,
        }
    }
}

fn signal(pid: u32, sig: libc::c_int) {
    if pid > 0 {
        // SAFETY: plain kill(2) on a pid this testbed started
        unsafe {
            libc::kill(pid as libc::pid_t, sig);
        }
    }
}

fn alive(pid: u32) -> bool {
    // SAFETY: signal 0 only checks for existence
    pid > 0 && unsafe { libc::kill(pid as libc::pid_t, 0) } == 0
}

async fn wait_gone(pid: u32, limit: Duration) -> bool {
    let deadline = tokio::time::Instant::now() + limit;
    while alive(pid) {
        if tokio::time::Instant::now() >= deadline {
            return false;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    true
}

pub fn state_path(work_dir: &Path) -> PathBuf {
    work_dir.join("fedbed.json")
}
