//! A desk-scale data federation.
//!
//! Origins export local directories under namespace prefixes, pull-through
//! caches keep recently read objects near clients, and a director registers
//! both, routes each client to its nearest cache and collects transfer
//! accounting. [`client::FedClient`] ties them together for users.

#![allow(clippy::result_large_err)]

pub mod accounting;
pub mod cache;
pub mod client;
pub mod director;
pub mod geo;
pub mod lru;
pub mod namespace;
pub mod node;
pub mod origin;
pub mod registry;
pub mod wire;

pub use accounting::{aggregate_stats, AccountingLog, Direction, TransferRecord, TransferStats};
pub use client::{ClientError, FedClient, FetchPlan, FetchReport};
pub use geo::{haversine_km, lookup_client, load_geo_table, rank_caches, GeoPoint, GeoTable};
pub use namespace::{match_prefix, normalize_path, MalformedPath, NamespacePrefix, ObjectPath};
pub use registry::{Registry, RegistryError, ResolutionResult, ServiceKind, ServiceRecord};
