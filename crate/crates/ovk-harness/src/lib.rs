//! Operator-facing harness for the ownership-key stack: an emulated world
//! of authenticators and services, a scripted scenario engine with an
//! injected clock, an update-race simulator, an HTTP transport, and a
//! directory-based message channel for multi-process seed exchange.

pub mod channel;
pub mod http;
pub mod race;
pub mod scenario;

pub use race::{RaceConfig, RaceOutcome, Winner, run_race};
pub use scenario::{Report, Scenario, ScenarioError, TransportKind, run_scenario};
