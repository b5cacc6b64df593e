//! Execution-trace data model.
//!
//! A trace is the per-operator record of one training iteration: forward and
//! backward compute times, parameter and retained-activation sizes, and the
//! four memory deltas observed around each hooked operator. Memory deltas
//! describe the backward pass, which is where peak usage is reconstructed.
//!
//! Memory allocated by operators that cannot be hooked (functional calls
//! between two modules) is carried by the *prior* deltas of the following
//! record.

mod synth;

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use synth::{synthesize_trace, Architecture, CalibrationConstants, ModelSpec};

/// Errors produced while loading, validating or querying a trace.
#[derive(Debug, Error)]
pub enum TraceError {
    #[error("malformed trace: {0}")]
    MalformedTrace(String),
    #[error("invariant violated{}: {message}", .index.map(|i| format!(" at operator {i}")).unwrap_or_default())]
    InvariantViolation {
        index: Option<usize>,
        message: String,
    },
    #[error("block {block} out of range (trace has {n_blocks} blocks)")]
    BlockOutOfRange { block: usize, n_blocks: usize },
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
}

impl TraceError {
    fn violation(index: Option<usize>, message: impl Into<String>) -> Self {
        TraceError::InvariantViolation {
            index,
            message: message.into(),
        }
    }
}

/// One hooked operator, in forward execution order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorRecord {
    pub index: usize,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_id: Option<usize>,
    /// Forward compute time, seconds.
    pub t_fwd: f64,
    /// Backward compute time, seconds.
    pub t_bwd: f64,
    pub param_bytes: u64,
    /// Activation bytes retained for the backward pass.
    pub act_bytes: u64,
    /// Net allocation change between the previous hooked operator and this one.
    pub d_cur_prior: i64,
    /// Peak above the previous operator's end allocation, before this one starts.
    pub d_peak_prior: i64,
    /// Net allocation change across this operator.
    pub d_cur_op: i64,
    /// Peak above this operator's entry allocation.
    pub d_peak_op: i64,
}

/// A validated iteration trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelTrace {
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
    /// Allocated memory at the end of the forward pass, excluding retained
    /// activations (which are accounted per operator).
    pub m_fwd: u64,
    pub n_blocks: usize,
    pub ops: Vec<OperatorRecord>,
}

/// Bytes per parameter assumed when a trace does not say otherwise.
pub const DEFAULT_DTYPE_BYTES: u64 = 2;

impl ModelTrace {
    /// Checks every structural invariant, reporting the first violation.
    pub fn validate(&self) -> Result<(), TraceError> {
        if self.ops.is_empty() {
            return Err(TraceError::violation(None, "trace has no operators"));
        }
        let mut last_block: Option<usize> = None;
        for (pos, op) in self.ops.iter().enumerate() {
            let at = Some(pos);
            if op.index != pos {
                return Err(TraceError::violation(
                    at,
                    format!("index {} is not contiguous (expected {pos})", op.index),
                ));
            }
            if !(op.t_fwd.is_finite() && op.t_fwd >= 0.0) {
                return Err(TraceError::violation(at, "t_fwd must be finite and >= 0"));
            }
            if !(op.t_bwd.is_finite() && op.t_bwd >= 0.0) {
                return Err(TraceError::violation(at, "t_bwd must be finite and >= 0"));
            }
            if op.d_peak_op < op.d_cur_op.max(0) {
                return Err(TraceError::violation(at, "d_peak_op < max(0, d_cur_op)"));
            }
            if op.d_peak_prior < op.d_cur_prior.max(0) {
                return Err(TraceError::violation(
                    at,
                    "d_peak_prior < max(0, d_cur_prior)",
                ));
            }
            if let Some(b) = op.block_id {
                if b >= self.n_blocks {
                    return Err(TraceError::violation(
                        at,
                        format!("block_id {b} outside [0, {})", self.n_blocks),
                    ));
                }
                if last_block.is_some_and(|prev| b < prev) {
                    return Err(TraceError::violation(at, "block_id decreases"));
                }
                last_block = Some(b);
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Bytes per parameter element, read from `meta.dtype_bytes` when present.
    pub fn dtype_bytes(&self) -> u64 {
        self.meta
            .get("dtype_bytes")
            .and_then(|v| v.as_u64())
            .filter(|&b| b > 0)
            .unwrap_or(DEFAULT_DTYPE_BYTES)
    }

    pub fn total_param_bytes(&self) -> u64 {
        self.ops.iter().map(|o| o.param_bytes).sum()
    }

    pub fn total_act_bytes(&self) -> u64 {
        self.ops.iter().map(|o| o.act_bytes).sum()
    }

    /// Operators belonging to `block`, as a contiguous index range.
    pub fn block_ops(&self, block: usize) -> std::ops::Range<usize> {
        let first = self.ops.iter().position(|o| o.block_id == Some(block));
        match first {
            None => 0..0,
            Some(s) => {
                let len = self.ops[s..]
                    .iter()
                    .take_while(|o| o.block_id == Some(block))
                    .count();
                s..s + len
            }
        }
    }

    /// Sum of forward compute time over the operators of `block`.
    pub fn block_fwd_time(&self, block: usize) -> f64 {
        self.ops[self.block_ops(block)]
            .iter()
            .map(|o| o.t_fwd)
            .sum()
    }
}

/// Σ `act_bytes` over the operators of one block.
pub fn block_activation_bytes(trace: &ModelTrace, block: usize) -> Result<u64, TraceError> {
    if block >= trace.n_blocks {
        return Err(TraceError::BlockOutOfRange {
            block,
            n_blocks: trace.n_blocks,
        });
    }
    Ok(trace
        .ops
        .iter()
        .filter(|o| o.block_id == Some(block))
        .map(|o| o.act_bytes)
        .sum())
}

/// Parses and validates a JSON trace.
pub fn load_trace<R: Read>(source: R) -> Result<ModelTrace, TraceError> {
    let trace: ModelTrace =
        serde_json::from_reader(source).map_err(|e| TraceError::MalformedTrace(e.to_string()))?;
    trace.validate()?;
    Ok(trace)
}

pub fn save_trace<W: Write>(trace: &ModelTrace, sink: W) -> std::io::Result<()> {
    serde_json::to_writer_pretty(sink, trace).map_err(std::io::Error::other)
}
