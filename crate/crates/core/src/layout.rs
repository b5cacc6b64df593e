//! Parameter chunk packing and the interleaved block schedule.
//!
//! Parameters are packed into fixed-capacity chunks in forward execution
//! order. A transformer block is the packing unit: its parameters always
//! land in a single chunk. Operators outside any block are packed one by one.
//! Operators without parameters ride along with the chunk that is open when
//! they execute.
//!
//! Shared parameters are expected to appear in the trace only at their first
//! use, so later uses reference the chunk that already holds them.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hardware::HardwareProfile;
use crate::trace::{block_activation_bytes, ModelTrace};

#[derive(Debug, Error, PartialEq)]
pub enum LayoutError {
    #[error("chunk size {s_chunk} is smaller than a packing unit of {unit_bytes} bytes (operator {op_index})")]
    ChunkTooSmall {
        s_chunk: u64,
        unit_bytes: u64,
        op_index: usize,
    },
    #[error("no feasible chunk size in the grid")]
    NoFeasibleChunkSize,
    #[error("{requested} persistent chunks requested but layout has {n_chunk}")]
    OutOfRange { requested: usize, n_chunk: usize },
    #[error("infeasible block layout: {0}")]
    InfeasibleLayout(String),
    #[error("invalid plan config: {0}")]
    InvalidConfig(String),
}

/// The tunable parameter vector of one plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanConfig {
    pub s_chunk: u64,
    pub n_chunk: usize,
    pub n_persist: usize,
    pub n_buffer: usize,
    pub n_block: usize,
    pub n_interval: usize,
    pub n_swap: usize,
    pub n_checkpoint: usize,
}

impl PlanConfig {
    pub fn validate(&self) -> Result<(), LayoutError> {
        let bad = |m: &str| Err(LayoutError::InvalidConfig(m.to_string()));
        if self.n_persist > self.n_chunk {
            return bad("n_persist > n_chunk");
        }
        if self.n_buffer > self.n_chunk - self.n_persist {
            return bad("n_buffer > n_chunk - n_persist");
        }
        if self.n_swap + self.n_checkpoint > self.n_block {
            return bad("n_swap + n_checkpoint > n_block");
        }
        if self.n_persist < self.n_chunk && self.n_buffer == 0 {
            return bad("non-persistent chunks need at least one buffer");
        }
        Ok(())
    }

    /// Checks that the config describes `layout` and `trace`.
    pub fn validate_for(
        &self,
        trace: &ModelTrace,
        layout: &ChunkLayout,
    ) -> Result<(), LayoutError> {
        self.validate()?;
        if self.n_chunk != layout.n_chunk() || self.s_chunk != layout.s_chunk {
            return Err(LayoutError::InvalidConfig(format!(
                "config describes {} chunks of {} bytes, layout has {} of {}",
                self.n_chunk,
                self.s_chunk,
                layout.n_chunk(),
                layout.s_chunk
            )));
        }
        if self.n_block != trace.n_blocks {
            return Err(LayoutError::InvalidConfig(format!(
                "config has {} blocks, trace has {}",
                self.n_block, trace.n_blocks
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Chunk {
    pub chunk_id: usize,
    pub used_bytes: u64,
    /// Inclusive forward-order operator range served by this chunk.
    pub op_span: (usize, usize),
    pub block_ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkLayout {
    pub chunks: Vec<Chunk>,
    pub s_chunk: u64,
    pub waste_bytes: u64,
}

impl ChunkLayout {
    pub fn n_chunk(&self) -> usize {
        self.chunks.len()
    }

    /// Chunk serving each operator (`None` only when the layout is empty).
    pub fn op_chunks(&self, n_ops: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n_ops];
        for c in &self.chunks {
            for slot in out.iter_mut().take(c.op_span.1 + 1).skip(c.op_span.0) {
                *slot = Some(c.chunk_id);
            }
        }
        out
    }

    /// Chunk holding a block's parameters (or serving its first operator).
    pub fn block_chunk(&self, trace: &ModelTrace, block: usize) -> Option<usize> {
        if let Some(c) = self.chunks.iter().find(|c| c.block_ids.contains(&block)) {
            return Some(c.chunk_id);
        }
        let first = trace.block_ops(block).start;
        self.chunks
            .iter()
            .find(|c| c.op_span.0 <= first && first <= c.op_span.1)
            .map(|c| c.chunk_id)
    }
}

/// Packing units: a whole block, or a single non-block operator.
fn packing_units(trace: &ModelTrace) -> Vec<(usize, usize, u64, Option<usize>)> {
    let mut units: Vec<(usize, usize, u64, Option<usize>)> = Vec::new();
    for op in &trace.ops {
        match (units.last_mut(), op.block_id) {
            (Some(last), Some(b)) if last.3 == Some(b) => {
                last.1 = op.index;
                last.2 += op.param_bytes;
            }
            _ => units.push((op.index, op.index, op.param_bytes, op.block_id)),
        }
    }
    units
}

/// Greedy first-fit packing in execution order.
pub fn pack_chunks(trace: &ModelTrace, s_chunk: u64) -> Result<ChunkLayout, LayoutError> {
    let mut chunks: Vec<Chunk> = Vec::new();
    for (first, last, bytes, block) in packing_units(trace) {
        if bytes > s_chunk {
            return Err(LayoutError::ChunkTooSmall {
                s_chunk,
                unit_bytes: bytes,
                op_index: first,
            });
        }
        let fits = chunks
            .last()
            .is_some_and(|c| c.used_bytes + bytes <= s_chunk);
        if bytes > 0 && !fits {
            let start = chunks.last().map_or(0, |c| c.op_span.1 + 1);
            chunks.push(Chunk {
                chunk_id: chunks.len(),
                used_bytes: 0,
                op_span: (start, last),
                block_ids: Vec::new(),
            });
        }
        if let Some(c) = chunks.last_mut() {
            c.op_span.1 = last;
            c.used_bytes += bytes;
            if let (Some(b), true) = (block, bytes > 0) {
                c.block_ids.push(b);
            }
        }
    }
    let waste_bytes = chunks.iter().map(|c| s_chunk - c.used_bytes).sum();
    Ok(ChunkLayout {
        chunks,
        s_chunk,
        waste_bytes,
    })
}

const MIB: u64 = 1 << 20;
const GIB: u64 = 1 << 30;

/// Powers of two from 16 MiB to 1 GiB, raised so the smallest candidate
/// holds the largest packing unit.
pub fn default_grid(trace: &ModelTrace) -> Vec<u64> {
    let largest = packing_units(trace).iter().map(|u| u.2).max().unwrap_or(0);
    let lo = (16 * MIB).max(largest.next_power_of_two());
    let hi = GIB.max(lo);
    std::iter::successors(Some(lo), |&s| (s < hi).then_some(s * 2)).collect()
}

/// Picks the grid candidate with minimal waste; ties go to the smaller size.
pub fn chunk_size_search(
    trace: &ModelTrace,
    grid: &[u64],
) -> Result<(u64, ChunkLayout), LayoutError> {
    let mut best: Option<ChunkLayout> = None;
    for &s in grid {
        let Ok(layout) = pack_chunks(trace, s) else {
            continue;
        };
        let better = match &best {
            None => true,
            Some(b) => (layout.waste_bytes, layout.s_chunk) < (b.waste_bytes, b.s_chunk),
        };
        if better {
            best = Some(layout);
        }
    }
    best.map(|l| (l.s_chunk, l))
        .ok_or(LayoutError::NoFeasibleChunkSize)
}

/// Persistent / non-persistent split of chunk ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Persistence {
    pub persistent: Vec<usize>,
    pub non_persistent: Vec<usize>,
}

/// The first `n_persist` chunks in execution order stay on the device.
pub fn assign_persistent(
    layout: &ChunkLayout,
    n_persist: usize,
) -> Result<Persistence, LayoutError> {
    let n = layout.n_chunk();
    if n_persist > n {
        return Err(LayoutError::OutOfRange {
            requested: n_persist,
            n_chunk: n,
        });
    }
    Ok(Persistence {
        persistent: (0..n_persist).collect(),
        non_persistent: (n_persist..n).collect(),
    })
}

/// Mean per-block forward time and mean per-block activation bytes.
pub(crate) fn block_means(trace: &ModelTrace) -> (f64, f64) {
    if trace.n_blocks == 0 {
        return (0.0, 0.0);
    }
    let n = trace.n_blocks as f64;
    let t: f64 = (0..trace.n_blocks).map(|b| trace.block_fwd_time(b)).sum();
    let a: u64 = (0..trace.n_blocks)
        .map(|b| block_activation_bytes(trace, b).unwrap_or(0))
        .sum();
    (t / n, a as f64 / n)
}

/// Blocks of forward compute needed to hide one block's activation swap-out.
pub fn compute_interval(trace: &ModelTrace, hw: &HardwareProfile) -> usize {
    let cap = trace.n_blocks.max(1);
    let (block_time, block_act) = block_means(trace);
    let swap_out = block_act / hw.d2h_bw;
    if swap_out <= block_time {
        return 1;
    }
    if block_time <= 0.0 {
        return cap;
    }
    let mut k = (swap_out / block_time).ceil().max(1.0) as usize;
    // Guard the float division against landing one past the answer.
    if k > 1 && (k - 1) as f64 * block_time >= swap_out {
        k -= 1;
    }
    k.min(cap)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockStrategy {
    Swap,
    Checkpoint,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSchedule {
    pub strategies: Vec<BlockStrategy>,
}

impl BlockSchedule {
    pub fn count(&self, s: BlockStrategy) -> usize {
        self.strategies.iter().filter(|&&x| x == s).count()
    }
}

/// Interleaved layout: swap blocks every `n_interval + 1` positions from the
/// front, checkpoint blocks filling the remaining optimized prefix, and
/// unoptimized blocks at the tail.
pub fn build_block_schedule(
    n_block: usize,
    n_swap: usize,
    n_checkpoint: usize,
    n_interval: usize,
) -> Result<BlockSchedule, LayoutError> {
    if n_swap + n_checkpoint > n_block {
        return Err(LayoutError::InfeasibleLayout(format!(
            "{n_swap} swap + {n_checkpoint} checkpoint blocks exceed {n_block} blocks"
        )));
    }
    let prefix = n_swap + n_checkpoint;
    if n_swap > 0 && (n_swap - 1) * (n_interval + 1) >= prefix {
        return Err(LayoutError::InfeasibleLayout(format!(
            "{n_swap} swap blocks spaced {n_interval} apart do not fit a prefix of {prefix}"
        )));
    }
    let strategies = (0..n_block)
        .map(|pos| {
            if pos >= prefix {
                BlockStrategy::None
            } else if pos % (n_interval + 1) == 0 && pos / (n_interval + 1) < n_swap {
                BlockStrategy::Swap
            } else {
                BlockStrategy::Checkpoint
            }
        })
        .collect();
    Ok(BlockSchedule { strategies })
}

/// Whether `(n_swap, n_checkpoint)` admits an interleaved layout.
pub fn schedule_feasible(
    n_block: usize,
    n_swap: usize,
    n_checkpoint: usize,
    n_interval: usize,
) -> bool {
    n_swap + n_checkpoint <= n_block
        && (n_swap == 0 || (n_swap - 1) * (n_interval + 1) < n_swap + n_checkpoint)
}

/// Serialized plan: the configuration, chunk table and block strategies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Plan {
    pub config: PlanConfig,
    pub chunks: Vec<Chunk>,
    pub strategies: Vec<BlockStrategy>,
}

impl Plan {
    pub fn new(layout: &ChunkLayout, config: PlanConfig) -> Result<Self, LayoutError> {
        config.validate()?;
        let schedule = build_block_schedule(
            config.n_block,
            config.n_swap,
            config.n_checkpoint,
            config.n_interval,
        )?;
        Ok(Plan {
            config,
            chunks: layout.chunks.clone(),
            strategies: schedule.strategies,
        })
    }

    pub fn layout(&self) -> ChunkLayout {
        let waste_bytes = self
            .chunks
            .iter()
            .map(|c| self.config.s_chunk.saturating_sub(c.used_bytes))
            .sum();
        ChunkLayout {
            chunks: self.chunks.clone(),
            s_chunk: self.config.s_chunk,
            waste_bytes,
        }
    }

    pub fn schedule(&self) -> BlockSchedule {
        BlockSchedule {
            strategies: self.strategies.clone(),
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::trace::{ModelTrace, OperatorRecord};
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    /// One two-op block per entry of `block_params`.
    pub(crate) fn blocks_trace(block_params: &[u64]) -> ModelTrace {
        let mut ops = Vec::new();
        for (b, &p) in block_params.iter().enumerate() {
            for k in 0..2 {
                ops.push(OperatorRecord {
                    index: ops.len(),
                    name: format!("b{b}.{k}"),
                    block_id: Some(b),
                    t_fwd: 0.01,
                    t_bwd: 0.02,
                    param_bytes: if k == 0 { p } else { 0 },
                    act_bytes: 10,
                    d_cur_prior: 0,
                    d_peak_prior: 0,
                    d_cur_op: 0,
                    d_peak_op: 0,
                });
            }
        }
        ModelTrace {
            meta: BTreeMap::new(),
            m_fwd: 0,
            n_blocks: block_params.len(),
            ops,
        }
    }

    #[test]
    fn first_fit_examples() {
        let t = blocks_trace(&[6, 6, 6]);
        let l = pack_chunks(&t, 12).unwrap();
        assert_eq!(
            l.chunks.iter().map(|c| c.used_bytes).collect::<Vec<_>>(),
            vec![12, 6]
        );
        assert_eq!(l.waste_bytes, 6);
        assert_eq!(l.chunks[0].op_span, (0, 3));
        assert_eq!(l.chunks[1].op_span, (4, 5));

        let l = pack_chunks(&t, 100).unwrap();
        assert_eq!(l.n_chunk(), 1);
        assert_eq!(l.waste_bytes, 82);

        assert!(matches!(
            pack_chunks(&t, 5),
            Err(LayoutError::ChunkTooSmall { .. })
        ));
    }

    #[test]
    fn grid_search_examples() {
        let t = blocks_trace(&[6, 6, 6]);
        let (s, l) = chunk_size_search(&t, &[12, 18]).unwrap();
        assert_eq!((s, l.waste_bytes, l.n_chunk()), (18, 0, 1));
        assert_eq!(chunk_size_search(&t, &[40]).unwrap().0, 40);
        assert_eq!(
            chunk_size_search(&t, &[1, 2]),
            Err(LayoutError::NoFeasibleChunkSize)
        );
        assert_eq!(
            chunk_size_search(&t, &[]),
            Err(LayoutError::NoFeasibleChunkSize)
        );
        // Tie goes to the smaller size.
        let t = blocks_trace(&[4, 4]);
        assert_eq!(chunk_size_search(&t, &[8, 4]).unwrap().0, 4);
    }

    #[test]
    fn default_grid_covers_largest_block() {
        let t = blocks_trace(&[3 * GIB / 2]);
        let g = default_grid(&t);
        assert_eq!(g, vec![2 * GIB]);
        let t = blocks_trace(&[10]);
        let g = default_grid(&t);
        assert_eq!(g.first(), Some(&(16 * MIB)));
        assert_eq!(g.last(), Some(&GIB));
        assert_eq!(g.len(), 7);
    }

    #[test]
    fn persistent_prefix() {
        let t = blocks_trace(&[1; 5]);
        let l = pack_chunks(&t, 1).unwrap();
        let p = assign_persistent(&l, 2).unwrap();
        assert_eq!(p.persistent, vec![0, 1]);
        assert_eq!(p.non_persistent, vec![2, 3, 4]);
        assert!(assign_persistent(&l, 5).unwrap().non_persistent.is_empty());
        assert!(assign_persistent(&l, 0).unwrap().persistent.is_empty());
        assert!(assign_persistent(&l, 6).is_err());
    }

    #[test]
    fn interleaved_layout_example() {
        use BlockStrategy::*;
        let s = build_block_schedule(8, 2, 4, 2).unwrap();
        assert_eq!(
            s.strategies,
            vec![Swap, Checkpoint, Checkpoint, Swap, Checkpoint, Checkpoint, None, None]
        );
        assert!(build_block_schedule(5, 0, 0, 3)
            .unwrap()
            .strategies
            .iter()
            .all(|&x| x == None));
        assert!(build_block_schedule(8, 0, 8, 1)
            .unwrap()
            .strategies
            .iter()
            .all(|&x| x == Checkpoint));
        assert!(matches!(
            build_block_schedule(8, 2, 0, 2),
            Err(LayoutError::InfeasibleLayout(_))
        ));
        assert!(build_block_schedule(4, 3, 2, 1).is_err());
    }

    #[test]
    fn plan_config_invariants() {
        let c = PlanConfig {
            s_chunk: 1,
            n_chunk: 4,
            n_persist: 2,
            n_buffer: 1,
            n_block: 4,
            n_interval: 1,
            n_swap: 1,
            n_checkpoint: 3,
        };
        assert!(c.validate().is_ok());
        assert!(PlanConfig { n_buffer: 0, ..c }.validate().is_err());
        assert!(PlanConfig { n_buffer: 3, ..c }.validate().is_err());
        assert!(PlanConfig { n_persist: 5, ..c }.validate().is_err());
        assert!(PlanConfig { n_swap: 2, ..c }.validate().is_err());
        assert!(PlanConfig {
            n_persist: 4,
            n_buffer: 0,
            ..c
        }
        .validate()
        .is_ok());
    }

    proptest! {
        #[test]
        fn packing_preserves_bytes_and_order(params in proptest::collection::vec(0u64..50, 1..30), s in 50u64..200) {
            let t = blocks_trace(&params);
            let l = pack_chunks(&t, s).unwrap();
            prop_assert_eq!(l.chunks.iter().map(|c| c.used_bytes).sum::<u64>(), t.total_param_bytes());
            let map = l.op_chunks(t.len());
            for w in map.windows(2) {
                prop_assert!(w[0] <= w[1]);
            }
            for c in &l.chunks {
                prop_assert!(c.used_bytes <= s);
            }
            if t.total_param_bytes() > 0 {
                prop_assert!(map.iter().all(|c| c.is_some()));
            }
        }

        #[test]
        fn schedule_counts_and_suffix(n_block in 0usize..40, a in 0usize..40, b in 0usize..40, k in 0usize..5) {
            let (n_swap, n_ckpt) = (a.min(n_block), b.min(n_block - a.min(n_block)));
            match build_block_schedule(n_block, n_swap, n_ckpt, k) {
                Ok(s) => {
                    prop_assert!(schedule_feasible(n_block, n_swap, n_ckpt, k));
                    prop_assert_eq!(s.count(BlockStrategy::Swap), n_swap);
                    prop_assert_eq!(s.count(BlockStrategy::Checkpoint), n_ckpt);
                    let first_none = s.strategies.iter().position(|&x| x == BlockStrategy::None).unwrap_or(n_block);
                    prop_assert!(s.strategies[first_none..].iter().all(|&x| x == BlockStrategy::None));
                    let swaps: Vec<_> = s.strategies.iter().enumerate().filter(|(_, &x)| x == BlockStrategy::Swap).map(|(i, _)| i).collect();
                    for w in swaps.windows(2) {
                        prop_assert_eq!(w[1] - w[0] - 1, k);
                    }
                }
                Err(_) => prop_assert!(!schedule_feasible(n_block, n_swap, n_ckpt, k)),
            }
        }
    }
}
