//! Discrete-event simulation of one training iteration under a plan.
//!
//! Resources: a serial GPU compute stream, a serial CPU optimizer, a
//! prefetch stream (all-gather then host-to-device upload, one chunk at a
//! time), a gradient stream (reduce then device-to-host offload, one chunk at
//! a time), and full-duplex PCIe links whose concurrent flows share
//! bandwidth equally. Collectives run for a fixed duration.
//!
//! Time is integer nanoseconds. At equal timestamps compute completions are
//! handled before transfer completions, and both before new starts; ties
//! inside a class go by subject id.

mod engine;
pub mod export;
pub mod validate;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hardware::HardwareProfile;
use crate::layout::{BlockSchedule, ChunkLayout, LayoutError, PlanConfig};
use crate::trace::ModelTrace;

pub use validate::{sample_configs, validate, ValidationReport, ValidationRow};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(
        "deadlock at {time_ns} ns: no runnable event and the iteration is incomplete ({detail})"
    )]
    DeadlockDetected { time_ns: u64, detail: String },
    #[error("memory ledger underflow at {time_ns} ns ({detail})")]
    LedgerUnderflow { time_ns: u64, detail: String },
    #[error(transparent)]
    Layout(#[from] LayoutError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resource {
    Gpu,
    Cpu,
    Collective,
    H2d,
    D2h,
}

impl Resource {
    pub fn as_str(self) -> &'static str {
        match self {
            Resource::Gpu => "gpu",
            Resource::Cpu => "cpu",
            Resource::Collective => "collective",
            Resource::H2d => "h2d",
            Resource::D2h => "d2h",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Start,
    End,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimEvent {
    pub time_ns: u64,
    pub resource: Resource,
    pub phase: Phase,
    /// Activity name, e.g. `fwd`, `gather`, `upload`, `swap_out`.
    pub name: String,
    /// Operator, block or chunk id, depending on the activity.
    pub subject: usize,
}

/// Link utilization from `time_ns` until the next sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkSample {
    pub time_ns: u64,
    pub h2d: f64,
    pub d2h: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub t_iter: f64,
    pub t_fwd: f64,
    pub t_bwd: f64,
    pub t_cpu_optim_span: f64,
    pub m_peak: f64,
    pub timeline: Vec<SimEvent>,
    /// `(time_ns, allocated bytes)` after every allocation change.
    pub mem_trace: Vec<(u64, i64)>,
    pub link_util: Vec<LinkSample>,
    /// Model-state bytes allocated before the iteration starts.
    pub initial_bytes: i64,
    /// Bytes still allocated after teardown.
    pub final_bytes: i64,
    /// Chunk fetches issued during the backward pass.
    pub backward_gathers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    /// Device bytes a persistent chunk occupies per byte of chunk capacity.
    pub persist_state_factor: u64,
    /// Record the event log and link samples.
    pub record_timeline: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            persist_state_factor: crate::cost::CostOptions::default().persist_state_factor,
            record_timeline: true,
        }
    }
}

pub fn simulate(
    trace: &ModelTrace,
    layout: &ChunkLayout,
    schedule: &BlockSchedule,
    config: &PlanConfig,
    hw: &HardwareProfile,
    opts: &SimOptions,
) -> Result<SimulationResult, SimError> {
    config.validate_for(trace, layout)?;
    if schedule.strategies.len() != trace.n_blocks {
        return Err(
            LayoutError::InvalidConfig("schedule length differs from block count".into()).into(),
        );
    }
    engine::Engine::new(trace, layout, schedule, config, hw, opts).run()
}
