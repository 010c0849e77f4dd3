//! Deterministic discrete-event simulation of hyperedges under a seeded
//! workload, with optional Byzantine participants.

mod engine;
pub mod metrics;
pub mod scenario;
pub mod workload;

pub use engine::{run, SimError};
pub use metrics::{BatchMetrics, LogEvent, RunReport, SafetyReport};
pub use scenario::{Profile, Scenario, ScenarioError};
