//! Analytic runtime and peak-memory cost models.
//!
//! Runtime is evaluated chunk by chunk: each term of the forward and backward
//! sums is the larger of the chunk's compute and the communication that runs
//! alongside it, and the iteration overlaps CPU parameter updates with the
//! backward pass plus GPU updates.
//!
//! Chunk indices in the formulas are 1-based; terms indexed outside
//! `[1, n_chunk]` are zero. The backward pass visits chunks `n_chunk..=1`:
//! while chunk `i` computes, chunk `i − 1` is prefetched and chunk `i + 1`
//! reduces/offloads its gradients. The backward sum runs over
//! `i = 0..=n_chunk + 1` so the trailing reduce of chunk 1 is charged.
//!
//! Peak memory is reconstructed by replaying the trace in backward order from
//! the end-of-forward allocation, then adding resident model states and the
//! fragmentation factor.

use serde::{Deserialize, Serialize};

use crate::hardware::{contended_bandwidth, gather_time, reduce_time, HardwareProfile};
use crate::layout::{
    build_block_schedule, BlockSchedule, BlockStrategy, ChunkLayout, LayoutError, PlanConfig,
};
use crate::trace::ModelTrace;

/// Memory-model knobs that are not part of the hardware profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostOptions {
    /// Fragmentation factor applied to the final peak estimate.
    pub alpha: f64,
    /// Device bytes a persistent chunk occupies per byte of chunk capacity.
    ///
    /// A persistent chunk keeps parameters, gradients and the GPU optimizer's
    /// fp32 master weights and moments resident (16 bytes per fp16
    /// parameter); a chunk buffer only holds the fp16 parameters.
    pub persist_state_factor: u64,
}

impl Default for CostOptions {
    fn default() -> Self {
        CostOptions {
            alpha: 1.05,
            persist_state_factor: 8,
        }
    }
}

impl CostOptions {
    pub fn persist_chunk_bytes(&self, s_chunk: u64) -> u64 {
        s_chunk * self.persist_state_factor
    }

    /// Device bytes held by persistent chunks and buffers.
    pub fn model_state_bytes(&self, config: &PlanConfig) -> u64 {
        self.persist_chunk_bytes(config.s_chunk) * config.n_persist as u64
            + config.s_chunk * config.n_buffer as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub t_fwd: f64,
    pub t_bwd: f64,
    pub t_gpu_optim: f64,
    pub t_cpu_optim: f64,
    pub t_iter: f64,
    /// Estimated peak device memory, bytes, fragmentation included.
    pub m_peak: f64,
    /// Forward terms `i = 1..=n_chunk + 1`.
    pub fwd_terms: Vec<f64>,
    /// Backward terms `i = 0..=n_chunk + 1`.
    pub bwd_terms: Vec<f64>,
}

/// Column order of [`CostEstimate::csv_record`].
pub const CSV_HEADER: [&str; 14] = [
    "s_chunk",
    "n_chunk",
    "n_persist",
    "n_buffer",
    "n_block",
    "n_interval",
    "n_swap",
    "n_checkpoint",
    "t_fwd",
    "t_bwd",
    "t_gpu_optim",
    "t_cpu_optim",
    "t_iter",
    "m_peak",
];

impl CostEstimate {
    pub fn csv_record(&self, c: &PlanConfig) -> Vec<String> {
        vec![
            c.s_chunk.to_string(),
            c.n_chunk.to_string(),
            c.n_persist.to_string(),
            c.n_buffer.to_string(),
            c.n_block.to_string(),
            c.n_interval.to_string(),
            c.n_swap.to_string(),
            c.n_checkpoint.to_string(),
            format!("{:.9}", self.t_fwd),
            format!("{:.9}", self.t_bwd),
            format!("{:.9}", self.t_gpu_optim),
            format!("{:.9}", self.t_cpu_optim),
            format!("{:.9}", self.t_iter),
            format!("{:.0}", self.m_peak),
        ]
    }
}

/// Per-block savings used by the memory replay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSavings {
    /// Mean full block activation bytes.
    pub swap: i64,
    /// Mean block activation bytes minus the retained block input.
    pub checkpoint: i64,
}

fn rounded_mean(sum: i64, n: i64) -> i64 {
    if n == 0 {
        0
    } else {
        (sum + n / 2) / n
    }
}

pub fn block_savings(trace: &ModelTrace) -> BlockSavings {
    let n = trace.n_blocks as i64;
    let mut swap = 0i64;
    let mut ckpt = 0i64;
    for b in 0..trace.n_blocks {
        let ops = &trace.ops[trace.block_ops(b)];
        let total: i64 = ops.iter().map(|o| o.act_bytes as i64).sum();
        swap += total;
        ckpt += total - ops.first().map_or(0, |o| o.act_bytes as i64);
    }
    BlockSavings {
        swap: rounded_mean(swap, n),
        checkpoint: rounded_mean(ckpt, n),
    }
}

/// Backward-order replay of the trace's memory deltas, before model states
/// and fragmentation are added.
pub fn replay_activation_peak(trace: &ModelTrace, schedule: &BlockSchedule) -> i64 {
    let savings = block_savings(trace);
    let strategy = |op: usize| {
        trace.ops[op]
            .block_id
            .and_then(|b| schedule.strategies.get(b).copied())
            .unwrap_or(BlockStrategy::None)
    };
    let total_act: i64 = trace.ops.iter().map(|o| o.act_bytes as i64).sum();
    let mut cur = trace.m_fwd as i64 + total_act
        - savings.swap * schedule.count(BlockStrategy::Swap) as i64
        - savings.checkpoint * schedule.count(BlockStrategy::Checkpoint) as i64;
    let mut peak = cur;
    for i in (0..trace.ops.len()).rev() {
        let op = &trace.ops[i];
        let s = strategy(i);
        // Recompute fires at the first operator of a checkpointed block that
        // the backward pass reaches.
        let recompute_bump = if s == BlockStrategy::Checkpoint
            && (i + 1 == trace.ops.len() || trace.ops[i + 1].block_id != op.block_id)
        {
            savings.checkpoint
        } else {
            0
        };
        peak = peak
            .max(cur + op.d_peak_prior)
            .max(cur + op.d_cur_prior + op.d_peak_op + recompute_bump);
        cur += op.d_cur_prior + op.d_cur_op;
        if s == BlockStrategy::None {
            cur -= op.act_bytes as i64;
        }
    }
    peak
}

pub fn estimate_peak_memory(
    trace: &ModelTrace,
    schedule: &BlockSchedule,
    config: &PlanConfig,
    opts: &CostOptions,
) -> f64 {
    finalize_peak(replay_activation_peak(trace, schedule), config, opts)
}

pub(crate) fn finalize_peak(activation_peak: i64, config: &PlanConfig, opts: &CostOptions) -> f64 {
    (activation_peak as f64 + opts.model_state_bytes(config) as f64) * opts.alpha
}

/// Precomputed per-chunk and per-block quantities for fast repeated
/// evaluation of many configurations over one trace/layout/hardware triple.
#[derive(Debug, Clone)]
pub struct CostModel {
    n_chunk: usize,
    comp_fwd: Vec<f64>,
    comp_bwd: Vec<f64>,
    params: Vec<f64>,
    prefetch: Vec<f64>,
    prefetch_contended: Vec<f64>,
    reduce: Vec<f64>,
    offload: Vec<f64>,
    /// Forward compute window `[start, end)` of each chunk, compute-only timeline.
    chunk_window: Vec<(f64, f64)>,
    block_chunk: Vec<Option<usize>>,
    block_fwd: Vec<f64>,
    /// Swap-out interval of each block on the compute-only timeline.
    block_swap_out: Vec<(f64, f64)>,
    cpu_rate: f64,
    gpu_rate: f64,
    world_size: f64,
}

impl CostModel {
    pub fn new(trace: &ModelTrace, layout: &ChunkLayout, hw: &HardwareProfile) -> Self {
        let n = layout.n_chunk();
        let dtype = trace.dtype_bytes() as f64;
        let mut comp_fwd = vec![0.0; n];
        let mut comp_bwd = vec![0.0; n];
        for (i, c) in layout.op_chunks(trace.len()).into_iter().enumerate() {
            if let Some(c) = c {
                comp_fwd[c] += trace.ops[i].t_fwd;
                comp_bwd[c] += trace.ops[i].t_bwd;
            }
        }
        let mut chunk_window = Vec::with_capacity(n);
        let mut t = 0.0;
        for &c in &comp_fwd {
            chunk_window.push((t, t + c));
            t += c;
        }
        let h2d_shared = contended_bandwidth(hw.h2d_bw, 2);
        let mut prefetch = Vec::with_capacity(n);
        let mut prefetch_contended = Vec::with_capacity(n);
        let mut reduce = Vec::with_capacity(n);
        let mut offload = Vec::with_capacity(n);
        let mut params = Vec::with_capacity(n);
        for c in &layout.chunks {
            let used = c.used_bytes as f64;
            let shard = hw.shard_bytes(c.used_bytes);
            let gather = gather_time(used, hw);
            prefetch.push(gather + shard / hw.h2d_bw);
            prefetch_contended.push(gather + shard / h2d_shared);
            reduce.push(reduce_time(used, hw));
            offload.push(shard / hw.d2h_bw);
            params.push(used / dtype);
        }

        let mut block_end = vec![0.0; trace.n_blocks];
        let mut clock = 0.0;
        for op in &trace.ops {
            clock += op.t_fwd;
            if let Some(b) = op.block_id {
                block_end[b] = clock;
            }
        }
        let mut block_act = vec![0u64; trace.n_blocks];
        for op in &trace.ops {
            if let Some(b) = op.block_id {
                block_act[b] += op.act_bytes;
            }
        }
        let block_swap_out = block_end
            .iter()
            .zip(&block_act)
            .map(|(&e, &a)| (e, e + a as f64 / hw.d2h_bw))
            .collect();

        CostModel {
            n_chunk: n,
            comp_fwd,
            comp_bwd,
            params,
            prefetch,
            prefetch_contended,
            reduce,
            offload,
            chunk_window,
            block_chunk: (0..trace.n_blocks)
                .map(|b| layout.block_chunk(trace, b))
                .collect(),
            block_fwd: (0..trace.n_blocks)
                .map(|b| trace.block_fwd_time(b))
                .collect(),
            block_swap_out,
            cpu_rate: hw.cpu_optim_rate,
            gpu_rate: hw.gpu_optim_rate,
            world_size: hw.world_size as f64,
        }
    }

    pub fn n_chunk(&self) -> usize {
        self.n_chunk
    }

    /// Whether the forward prefetch of chunk `i` (1-based) overlaps an active
    /// activation swap-out.
    fn prefetch_contended(&self, i: usize, schedule: &BlockSchedule) -> bool {
        if i < 2 {
            return false;
        }
        let (ws, we) = self.chunk_window[i - 2];
        schedule
            .strategies
            .iter()
            .zip(&self.block_swap_out)
            .any(|(&s, &(ss, se))| s == BlockStrategy::Swap && ss.max(ws) < se.min(we))
    }

    pub fn fwd_terms(&self, config: &PlanConfig, schedule: &BlockSchedule) -> Vec<f64> {
        let n = self.n_chunk;
        (1..=n + 1)
            .map(|i| {
                let comp = if i >= 2 { self.comp_fwd[i - 2] } else { 0.0 };
                let pf = if i <= config.n_persist || i > n {
                    0.0
                } else if self.prefetch_contended(i, schedule) {
                    self.prefetch_contended[i - 1]
                } else {
                    self.prefetch[i - 1]
                };
                comp.max(pf)
            })
            .collect()
    }

    fn recompute(&self, schedule: &BlockSchedule) -> Vec<f64> {
        let mut r = vec![0.0; self.n_chunk];
        for (b, &s) in schedule.strategies.iter().enumerate() {
            if s == BlockStrategy::Checkpoint {
                if let Some(Some(c)) = self.block_chunk.get(b) {
                    r[*c] += self.block_fwd[b];
                }
            }
        }
        r
    }

    pub fn bwd_terms(&self, config: &PlanConfig, schedule: &BlockSchedule) -> Vec<f64> {
        let n = self.n_chunk;
        let recomp = self.recompute(schedule);
        let in_range = |j: usize| (1..=n).contains(&j);
        let bwd_prefetch = |j: usize| {
            if !in_range(j) || j <= config.n_persist || j + config.n_buffer > n {
                0.0
            } else {
                self.prefetch[j - 1]
            }
        };
        let reduce_offload = |j: usize| {
            if !in_range(j) {
                0.0
            } else if j <= config.n_persist {
                self.reduce[j - 1]
            } else {
                self.reduce[j - 1] + self.offload[j - 1]
            }
        };
        (0..=n + 1)
            .map(|i| {
                let comp = if in_range(i) {
                    self.comp_bwd[i - 1] + recomp[i - 1]
                } else {
                    0.0
                };
                let pf = if i >= 1 { bwd_prefetch(i - 1) } else { 0.0 };
                comp.max(pf).max(reduce_offload(i + 1))
            })
            .collect()
    }

    pub fn optim(&self, config: &PlanConfig) -> (f64, f64) {
        let p = config.n_persist.min(self.n_chunk);
        let gpu = self.params[..p].iter().fold(0.0, |a, b| a + b);
        let cpu = self.params[p..].iter().fold(0.0, |a, b| a + b);
        // Each rank updates only its shard of the offloaded parameters.
        (gpu / self.gpu_rate, cpu / self.world_size / self.cpu_rate)
    }

    /// Full estimate given an already-replayed activation peak.
    pub fn estimate_with_peak(
        &self,
        config: &PlanConfig,
        schedule: &BlockSchedule,
        activation_peak: i64,
        opts: &CostOptions,
    ) -> CostEstimate {
        let fwd_terms = self.fwd_terms(config, schedule);
        let bwd_terms = self.bwd_terms(config, schedule);
        let t_fwd: f64 = fwd_terms.iter().sum();
        let t_bwd: f64 = bwd_terms.iter().sum();
        let (t_gpu_optim, t_cpu_optim) = self.optim(config);
        CostEstimate {
            t_fwd,
            t_bwd,
            t_gpu_optim,
            t_cpu_optim,
            t_iter: t_fwd + (t_bwd + t_gpu_optim).max(t_cpu_optim),
            m_peak: finalize_peak(activation_peak, config, opts),
            fwd_terms,
            bwd_terms,
        }
    }
}

pub fn estimate_fwd(
    trace: &ModelTrace,
    layout: &ChunkLayout,
    schedule: &BlockSchedule,
    config: &PlanConfig,
    hw: &HardwareProfile,
) -> f64 {
    CostModel::new(trace, layout, hw)
        .fwd_terms(config, schedule)
        .iter()
        .sum()
}

pub fn estimate_bwd(
    trace: &ModelTrace,
    layout: &ChunkLayout,
    schedule: &BlockSchedule,
    config: &PlanConfig,
    hw: &HardwareProfile,
) -> f64 {
    CostModel::new(trace, layout, hw)
        .bwd_terms(config, schedule)
        .iter()
        .sum()
}

/// `(t_gpu_optim, t_cpu_optim)`.
pub fn estimate_optim(
    trace: &ModelTrace,
    layout: &ChunkLayout,
    config: &PlanConfig,
    hw: &HardwareProfile,
) -> (f64, f64) {
    CostModel::new(trace, layout, hw).optim(config)
}

pub fn estimate_iteration(
    trace: &ModelTrace,
    layout: &ChunkLayout,
    schedule: &BlockSchedule,
    config: &PlanConfig,
    hw: &HardwareProfile,
    opts: &CostOptions,
) -> Result<CostEstimate, LayoutError> {
    config.validate_for(trace, layout)?;
    if schedule.strategies.len() != trace.n_blocks
        || schedule.count(BlockStrategy::Swap) != config.n_swap
        || schedule.count(BlockStrategy::Checkpoint) != config.n_checkpoint
    {
        return Err(LayoutError::InvalidConfig(
            "block schedule does not match the config counts".into(),
        ));
    }
    let model = CostModel::new(trace, layout, hw);
    let peak = replay_activation_peak(trace, schedule);
    Ok(model.estimate_with_peak(config, schedule, peak, opts))
}

/// Builds the interleaved schedule for `config` and estimates it.
pub fn estimate_config(
    trace: &ModelTrace,
    layout: &ChunkLayout,
    config: &PlanConfig,
    hw: &HardwareProfile,
    opts: &CostOptions,
) -> Result<CostEstimate, LayoutError> {
    let schedule = build_block_schedule(
        config.n_block,
        config.n_swap,
        config.n_checkpoint,
        config.n_interval,
    )?;
    estimate_iteration(trace, layout, &schedule, config, hw, opts)
}

#[cfg(test)]
mod tests;
