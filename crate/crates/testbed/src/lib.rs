//! Local multi-process federations for tests and demos.
//!
//! [`topology::TopologySpec`] describes a federation in JSON,
//! [`launch::launch`] starts it as `osdf-node` processes on loopback, and
//! [`scenario::run_scenario`] drives named end-to-end checks against it.

pub mod launch;
pub mod scenario;
pub mod topology;

pub use launch::{launch, Federation, FederationState, LaunchError, LaunchOptions, Role, ShutdownReport};
pub use scenario::{run_scenario, ScenarioError, ScenarioReport, SCENARIOS};
pub use topology::{ClientSpec, DirectorSpec, TopologyError, TopologySpec};
