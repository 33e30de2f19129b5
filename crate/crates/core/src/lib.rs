//! Slot-level downlink HARQ simulator for one gNB and one mobile UE.
//!
//! Three retransmission strategies run on a shared MAC substrate: reactive
//! HARQ, fixed proactive clusters, and an adaptive controller that sizes each
//! cluster by minimizing a drift-plus-penalty bound.
//!
//! The usual entry point is [`engine::run`], which turns a validated
//! [`scenario::Scenario`] into a [`metrics::MetricsLog`].

pub mod channel;
pub mod controller;
pub mod engine;
pub mod mac;
pub mod metrics;
pub mod scenario;
pub mod strategy;
pub mod traffic;

pub use engine::{run, run_many, run_many_sequential, SimError};
pub use metrics::{summarize, MetricsLog, SummaryReport};
pub use scenario::{load_scenario, load_scenario_with_overrides, Scenario, StrategySpec};
