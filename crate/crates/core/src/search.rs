//! Constrained search over `{n_persist, n_buffer, n_swap, n_checkpoint}`.
//!
//! The chunk size is fixed upstream. Candidates are visited in ascending
//! estimated peak memory, so the first one over the device budget proves all
//! the rest infeasible; those are counted as pruned without evaluating their
//! runtime. Among feasible candidates the fastest wins.

use std::cmp::Ordering;
use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{finalize_peak, replay_activation_peak, CostEstimate, CostModel, CostOptions};
use crate::hardware::{contended_bandwidth, HardwareProfile};
use crate::layout::{
    block_means, build_block_schedule, compute_interval, schedule_feasible, BlockSchedule,
    ChunkLayout, LayoutError, PlanConfig,
};
use crate::trace::ModelTrace;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("no configuration fits in {gpu_mem:.0} bytes (smallest estimate {min_peak:.0})")]
    NoFeasibleConfig { min_peak: f64, gpu_mem: f64 },
    #[error(transparent)]
    Layout(#[from] LayoutError),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchOptions {
    pub cost: CostOptions,
    /// Keep the (m_peak, t_iter) Pareto frontier of evaluated candidates.
    pub frontier: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub best: PlanConfig,
    pub estimate: CostEstimate,
    pub n_evaluated: usize,
    pub n_pruned: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frontier: Option<Vec<(PlanConfig, CostEstimate)>>,
}

/// Smallest buffer count allowed for `n_persist` persistent chunks.
pub fn min_buffers(n_chunk: usize, n_persist: usize) -> usize {
    if n_persist < n_chunk {
        3.min(n_chunk - n_persist)
    } else {
        0
    }
}

/// Largest `n` such that every `n' <= n` swap-outs, each at half the D2H
/// bandwidth, finish within the forward compute of the blocks they span.
pub fn swap_bandwidth_cap(trace: &ModelTrace, hw: &HardwareProfile, n_interval: usize) -> usize {
    let (block_time, block_act) = block_means(trace);
    let swap_out = block_act / contended_bandwidth(hw.d2h_bw, 2);
    let mut n = 0;
    while n < trace.n_blocks {
        let next = n + 1;
        let span = (next * (n_interval + 1)).min(trace.n_blocks);
        if next as f64 * swap_out > span as f64 * block_time {
            break;
        }
        n = next;
    }
    n
}

pub fn max_swap(trace: &ModelTrace, hw: &HardwareProfile, n_interval: usize) -> usize {
    if trace.n_blocks == 0 {
        return 0;
    }
    let structural = (trace.n_blocks - 1) / (n_interval + 1) + 1;
    structural.min(swap_bandwidth_cap(trace, hw, n_interval))
}

/// Shared state for evaluating many candidates of one trace/layout/hardware.
pub struct SearchContext<'a> {
    pub trace: &'a ModelTrace,
    pub layout: &'a ChunkLayout,
    pub hw: &'a HardwareProfile,
    pub opts: CostOptions,
    pub n_interval: usize,
    pub n_swap_max: usize,
    model: CostModel,
    peaks: HashMap<(usize, usize), (BlockSchedule, i64)>,
}

impl<'a> SearchContext<'a> {
    pub fn new(
        trace: &'a ModelTrace,
        layout: &'a ChunkLayout,
        hw: &'a HardwareProfile,
        opts: CostOptions,
    ) -> Result<Self, LayoutError> {
        let n_interval = compute_interval(trace, hw);
        let n_swap_max = max_swap(trace, hw, n_interval);
        let n_block = trace.n_blocks;
        let pairs: Vec<(usize, usize)> = (0..=n_swap_max)
            .flat_map(|s| (0..=n_block.saturating_sub(s)).map(move |c| (s, c)))
            .filter(|&(s, c)| schedule_feasible(n_block, s, c, n_interval))
            .collect();
        let peaks = pairs
            .par_iter()
            .map(|&(s, c)| {
                let sched = build_block_schedule(n_block, s, c, n_interval)?;
                let peak = replay_activation_peak(trace, &sched);
                Ok(((s, c), (sched, peak)))
            })
            .collect::<Result<HashMap<_, _>, LayoutError>>()?;
        Ok(SearchContext {
            trace,
            layout,
            hw,
            opts,
            n_interval,
            n_swap_max,
            model: CostModel::new(trace, layout, hw),
            peaks,
        })
    }

    fn config(&self, p: usize, b: usize, s: usize, c: usize) -> PlanConfig {
        PlanConfig {
            s_chunk: self.layout.s_chunk,
            n_chunk: self.layout.n_chunk(),
            n_persist: p,
            n_buffer: b,
            n_block: self.trace.n_blocks,
            n_interval: self.n_interval,
            n_swap: s,
            n_checkpoint: c,
        }
    }

    /// Estimated peak memory of `config`, or `None` when its block counts
    /// admit no interleaved layout.
    pub fn peak_memory(&self, config: &PlanConfig) -> Option<f64> {
        self.peaks
            .get(&(config.n_swap, config.n_checkpoint))
            .map(|&(_, raw)| finalize_peak(raw, config, &self.opts))
    }

    pub fn evaluate(&self, config: &PlanConfig) -> Option<CostEstimate> {
        let (sched, raw) = self.peaks.get(&(config.n_swap, config.n_checkpoint))?;
        Some(
            self.model
                .estimate_with_peak(config, sched, *raw, &self.opts),
        )
    }

    /// All candidates with their memory estimates, ascending in memory.
    pub fn candidates(&self) -> Vec<(PlanConfig, f64)> {
        let n = self.layout.n_chunk();
        let mut keys: Vec<&(usize, usize)> = self.peaks.keys().collect();
        keys.sort_unstable();
        let mut out = Vec::new();
        for p in 0..=n {
            for b in min_buffers(n, p)..=n - p {
                for &&(s, c) in &keys {
                    let cfg = self.config(p, b, s, c);
                    let m = self.peak_memory(&cfg).unwrap_or(f64::INFINITY);
                    out.push((cfg, m));
                }
            }
        }
        out.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| config_order(&a.0, &b.0)));
        out
    }
}

fn config_order(a: &PlanConfig, b: &PlanConfig) -> Ordering {
    (a.n_persist, a.n_buffer, a.n_swap, a.n_checkpoint).cmp(&(
        b.n_persist,
        b.n_buffer,
        b.n_swap,
        b.n_checkpoint,
    ))
}

/// Preference order between two feasible candidates: faster first; at equal
/// runtime, fewer swapped then fewer checkpointed blocks, lower memory, more
/// persistent chunks, fewer buffers.
pub fn preference(a: (&PlanConfig, &CostEstimate), b: (&PlanConfig, &CostEstimate)) -> Ordering {
    let (ca, ea) = a;
    let (cb, eb) = b;
    ea.t_iter
        .total_cmp(&eb.t_iter)
        .then(ca.n_swap.cmp(&cb.n_swap))
        .then(ca.n_checkpoint.cmp(&cb.n_checkpoint))
        .then(ea.m_peak.total_cmp(&eb.m_peak))
        .then(cb.n_persist.cmp(&ca.n_persist))
        .then(ca.n_buffer.cmp(&cb.n_buffer))
}

pub fn enumerate_candidates(
    layout: &ChunkLayout,
    trace: &ModelTrace,
    hw: &HardwareProfile,
    opts: &CostOptions,
) -> Result<Vec<(PlanConfig, f64)>, LayoutError> {
    Ok(SearchContext::new(trace, layout, hw, *opts)?.candidates())
}

/// Feasible candidates with their estimates, plus the pruned count.
pub struct Evaluated {
    pub rows: Vec<(PlanConfig, CostEstimate)>,
    pub n_pruned: usize,
    pub min_peak: f64,
}

pub fn evaluate_candidates(ctx: &SearchContext<'_>) -> Evaluated {
    let cands = ctx.candidates();
    let cut = cands
        .iter()
        .position(|(_, m)| *m >= ctx.hw.gpu_mem)
        .unwrap_or(cands.len());
    let rows: Vec<(PlanConfig, CostEstimate)> = cands[..cut]
        .par_iter()
        .filter_map(|(cfg, _)| ctx.evaluate(cfg).map(|e| (*cfg, e)))
        .collect();
    Evaluated {
        rows,
        n_pruned: cands.len() - cut,
        min_peak: cands.first().map_or(f64::INFINITY, |c| c.1),
    }
}

fn pareto(rows: &[(PlanConfig, CostEstimate)]) -> Vec<(PlanConfig, CostEstimate)> {
    let mut sorted: Vec<&(PlanConfig, CostEstimate)> = rows.iter().collect();
    sorted.sort_by(|a, b| {
        a.1.m_peak
            .total_cmp(&b.1.m_peak)
            .then_with(|| preference((&a.0, &a.1), (&b.0, &b.1)))
    });
    let mut best = f64::INFINITY;
    let mut out = Vec::new();
    for r in sorted {
        if r.1.t_iter < best {
            best = r.1.t_iter;
            out.push(r.clone());
        }
    }
    out
}

pub fn find_optimal(
    trace: &ModelTrace,
    layout: &ChunkLayout,
    hw: &HardwareProfile,
    opts: &SearchOptions,
) -> Result<SearchOutcome, SearchError> {
    let ctx = SearchContext::new(trace, layout, hw, opts.cost)?;
    let ev = evaluate_candidates(&ctx);
    let best = ev
        .rows
        .iter()
        .min_by(|a, b| preference((&a.0, &a.1), (&b.0, &b.1)))
        .cloned();
    let Some((best, estimate)) = best else {
        return Err(SearchError::NoFeasibleConfig {
            min_peak: ev.min_peak,
            gpu_mem: hw.gpu_mem,
        });
    };
    Ok(SearchOutcome {
        best,
        estimate,
        n_evaluated: ev.rows.len(),
        n_pruned: ev.n_pruned,
        frontier: opts.frontier.then(|| pareto(&ev.rows)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::estimate_config;
    use crate::layout::pack_chunks;
    use crate::layout::tests::blocks_trace;

    fn hw(gpu_mem: f64, bw: f64) -> HardwareProfile {
        HardwareProfile {
            h2d_bw: bw,
            d2h_bw: bw,
            coll_alpha: 1e-4,
            coll_bw: bw,
            world_size: 2,
            gpu_mem,
            cpu_mem: 1e12,
            cpu_optim_rate: 1e4,
            gpu_optim_rate: 1e5,
        }
    }

    #[test]
    fn buffers_floor() {
        assert_eq!(min_buffers(12, 12), 0);
        assert_eq!(min_buffers(12, 11), 1);
        assert_eq!(min_buffers(12, 0), 3);
    }

    #[test]
    fn swap_cap_is_structural_when_bandwidth_is_ample() {
        let t = blocks_trace(&[1; 8]);
        // 20 bytes per block at 1e6 B/s is far below 0.02 s of compute.
        assert_eq!(max_swap(&t, &hw(1e9, 1e6), 2), 3);
        // Contended swap-out 20/(1000/2)=0.04 s needs two blocks of compute.
        assert_eq!(swap_bandwidth_cap(&t, &hw(1e9, 1e3), 0), 0);
        assert_eq!(swap_bandwidth_cap(&t, &hw(1e9, 1e3), 1), 4);
        assert_eq!(swap_bandwidth_cap(&t, &hw(1e9, 1e3), 3), 4);
    }

    #[test]
    fn unlimited_memory_picks_zero_overhead() {
        let t = blocks_trace(&[40, 40, 40, 40, 40, 40]);
        let l = pack_chunks(&t, 64).unwrap();
        let out = find_optimal(&t, &l, &hw(f64::INFINITY, 1e2), &SearchOptions::default()).unwrap();
        assert_eq!(out.best.n_persist, l.n_chunk());
        assert_eq!(
            (out.best.n_buffer, out.best.n_swap, out.best.n_checkpoint),
            (0, 0, 0)
        );
        assert_eq!(out.n_pruned, 0);
    }

    #[test]
    fn candidates_ascend_and_contain_resident_config() {
        let t = blocks_trace(&[40, 40, 40, 40]);
        let l = pack_chunks(&t, 64).unwrap();
        let c = enumerate_candidates(&l, &t, &hw(1e9, 1e4), &CostOptions::default()).unwrap();
        assert!(c.windows(2).all(|w| w[0].1 <= w[1].1));
        assert!(c.iter().any(|(x, _)| x.n_persist == 4
            && x.n_buffer == 0
            && x.n_swap == 0
            && x.n_checkpoint == 0));
    }

    #[test]
    fn infeasible_budget_errors() {
        let t = blocks_trace(&[40, 40]);
        let l = pack_chunks(&t, 64).unwrap();
        let r = find_optimal(&t, &l, &hw(10.0, 1e4), &SearchOptions::default());
        assert!(matches!(r, Err(SearchError::NoFeasibleConfig { .. })));
    }

    #[test]
    fn counts_and_soundness_under_budget() {
        let t = blocks_trace(&[40, 40, 40, 40, 40]);
        let l = pack_chunks(&t, 64).unwrap();
        let h = hw(1100.0, 1e3);
        let ctx = SearchContext::new(&t, &l, &h, CostOptions::default()).unwrap();
        let total = ctx.candidates().len();
        let opts = SearchOptions {
            frontier: true,
            ..Default::default()
        };
        let out = find_optimal(&t, &l, &h, &opts).unwrap();
        assert_eq!(out.n_evaluated + out.n_pruned, total);
        assert!(out.estimate.m_peak < h.gpu_mem);
        let direct = estimate_config(&t, &l, &out.best, &h, &opts.cost).unwrap();
        assert_eq!(direct, out.estimate);
        let front = out.frontier.unwrap();
        assert!(front.windows(2).all(|w| w[1].1.t_iter < w[0].1.t_iter));
    }

    #[test]
    fn deterministic() {
        let t = blocks_trace(&[40, 30, 20, 40, 10]);
        let l = pack_chunks(&t, 64).unwrap();
        let h = hw(1200.0, 1e3);
        let a = find_optimal(&t, &l, &h, &SearchOptions::default()).unwrap();
        let b = find_optimal(&t, &l, &h, &SearchOptions::default()).unwrap();
        assert_eq!(a, b);
    }
}
