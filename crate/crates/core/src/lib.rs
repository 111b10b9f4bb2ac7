//! Runtime switching between consensus protocols over a deterministic
//! simulated network.

pub mod baseline;
pub mod client;
pub mod cstruct;
pub mod democratic;
pub mod explore;
pub mod history;
pub mod meta;
pub mod metrics;
pub mod model;
pub mod monarchic;
pub mod node;
pub mod oligarchic;
pub mod oracle;
pub mod plugin;
pub mod report;
pub mod runner;
pub mod scenario;
pub mod simnet;
pub mod suite;
pub mod validator;
pub mod workload;

pub use cstruct::{cstruct_equivalent, cstruct_prefix_consistent, CStruct};
pub use model::*;

pub type MetricsSnapshot = oracle::MetricsSnapshot<f64>;
pub type NodeWindow = oracle::NodeWindow<f64>;
pub type RoundTrips = oracle::RoundTrips<f64>;
pub type Thresholds = oracle::Thresholds<f64>;
pub type ThresholdOracle = oracle::ThresholdOracle<f64>;
pub type StaticOracle = oracle::StaticOracle<f64>;
