//! Experiment harnesses for lcdnet: scenario files in, CSV out.
//!
//! Every workload except `blocking` runs in virtual time, so its CSV is a
//! pure function of the scenario and the seed.

pub mod formulas;
pub mod report;
pub mod scenario;
pub mod stats;
pub mod testbed;
pub mod workload;

use lcdnet::channel::ChannelError;
use lcdnet::sim::SimError;
use thiserror::Error;

pub use report::{RunOutput, Table};
pub use scenario::{Scenario, ScenarioError, Workload};
pub use stats::LatencyRecord;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error("{0}")]
    Setup(String),
}

/// Run a parsed scenario with the given seed.
pub fn run_scenario(sc: &Scenario, seed: u64) -> Result<RunOutput, BenchError> {
    match &sc.workload {
        Workload::Echo(s) => workload::echo::run(sc, s, seed),
        Workload::ConnSetup(s) => workload::conn_setup::run(sc, s, seed),
        Workload::Isolation(s) => workload::isolation::run(sc, s, seed),
        Workload::Blocking(s) => workload::blocking::run(sc, s, seed),
        Workload::Transfer(s) => workload::transfer::run(sc, s, seed),
    }
}
