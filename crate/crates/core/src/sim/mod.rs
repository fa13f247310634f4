//! Deterministic network simulation.
//!
//! Desktop clients, mobile devices and the server run on a virtual clock in
//! one thread. Every frame goes through a seeded [`FaultProfile`] that may
//! drop, duplicate or delay it, so a `(scenario, profile)` pair always gives
//! the same [`Transcript`].

mod runner;
mod scenario;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::ServiceError;

pub use runner::{run_scenario, LogEntry, Metrics, ServerSummary, ActorSummary, Simulation, Transcript, SIM_EPOCH_SECS};
pub use scenario::{
    Action, ActionKind, ActorDecl, ActorKind, AssignArgs, CommitArgs, EditArgs, RangeSpec, RawStep, Scenario,
    ScenarioHeader, Step, TaskArgs,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("scenario parse error: {0}")]
    ScenarioParse(String),
    #[error("invalid fault profile: {0}")]
    InvalidProfile(String),
    #[error(transparent)]
    Service(#[from] ServiceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultProfile {
    #[serde(default)]
    pub loss_prob: f64,
    #[serde(default)]
    pub dup_prob: f64,
    /// Chance a frame gets up to [`FaultProfile::REORDER_SPREAD_MS`] extra
    /// delay, letting later frames overtake it.
    #[serde(default)]
    pub reorder_prob: f64,
    #[serde(default = "default_latency_min")]
    pub latency_min_ms: u64,
    #[serde(default = "default_latency_max")]
    pub latency_max_ms: u64,
    #[serde(default)]
    pub seed: u64,
}

fn default_latency_min() -> u64 {
    10
}

fn default_latency_max() -> u64 {
    50
}

impl Default for FaultProfile {
    fn default() -> Self {
        FaultProfile {
            loss_prob: 0.0,
            dup_prob: 0.0,
            reorder_prob: 0.0,
            latency_min_ms: default_latency_min(),
            latency_max_ms: default_latency_max(),
            seed: 0,
        }
    }
}

impl FaultProfile {
    pub const REORDER_SPREAD_MS: u64 = 1000;

    pub fn lossless(seed: u64) -> Self {
        FaultProfile { seed, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for (name, p) in [("loss", self.loss_prob), ("dup", self.dup_prob), ("reorder", self.reorder_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SimError::InvalidProfile(format!("{name} probability {p} outside [0, 1]")));
            }
        }
        if self.latency_min_ms > self.latency_max_ms {
            return Err(SimError::InvalidProfile(format!(
                "latency min {} exceeds max {}",
                self.latency_min_ms, self.latency_max_ms
            )));
        }
        Ok(())
    }
}
