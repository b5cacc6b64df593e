//! Estimator-versus-simulator comparison over a set of configurations.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{estimate_config, CostOptions};
use crate::hardware::HardwareProfile;
use crate::layout::{build_block_schedule, ChunkLayout, PlanConfig};
use crate::search::SearchContext;
use crate::trace::ModelTrace;

use super::{simulate, SimOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRow {
    pub config: PlanConfig,
    pub est_t_iter: f64,
    pub sim_t_iter: f64,
    /// `|est − sim| / sim`.
    pub t_iter_err: f64,
    pub est_m_peak: f64,
    pub sim_m_peak: f64,
    /// `(est − sim) / sim`; positive when the estimate is conservative.
    pub m_peak_err: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub rows: Vec<ValidationRow>,
    pub max_t_iter_err: f64,
    pub median_t_iter_err: f64,
    pub max_abs_m_peak_err: f64,
}

pub const CSV_HEADER: [&str; 16] = [
    "s_chunk",
    "n_chunk",
    "n_persist",
    "n_buffer",
    "n_block",
    "n_interval",
    "n_swap",
    "n_checkpoint",
    "est_t_iter",
    "sim_t_iter",
    "t_iter_err",
    "est_m_peak",
    "sim_m_peak",
    "m_peak_err",
    "status",
    "detail",
];

fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn row(
    trace: &ModelTrace,
    layout: &ChunkLayout,
    hw: &HardwareProfile,
    config: &PlanConfig,
    cost: &CostOptions,
    sim: &SimOptions,
) -> ValidationRow {
    let failed = |msg: String| ValidationRow {
        config: *config,
        est_t_iter: f64::NAN,
        sim_t_iter: f64::NAN,
        t_iter_err: f64::NAN,
        est_m_peak: f64::NAN,
        sim_m_peak: f64::NAN,
        m_peak_err: f64::NAN,
        failure: Some(msg),
    };
    let est = match estimate_config(trace, layout, config, hw, cost) {
        Ok(e) => e,
        Err(e) => return failed(e.to_string()),
    };
    let schedule = match build_block_schedule(
        config.n_block,
        config.n_swap,
        config.n_checkpoint,
        config.n_interval,
    ) {
        Ok(s) => s,
        Err(e) => return failed(e.to_string()),
    };
    let sim_opts = SimOptions {
        record_timeline: false,
        ..*sim
    };
    let res = match simulate(trace, layout, &schedule, config, hw, &sim_opts) {
        Ok(r) => r,
        Err(e) => return failed(e.to_string()),
    };
    ValidationRow {
        config: *config,
        est_t_iter: est.t_iter,
        sim_t_iter: res.t_iter,
        t_iter_err: (est.t_iter - res.t_iter).abs() / res.t_iter,
        est_m_peak: est.m_peak,
        sim_m_peak: res.m_peak,
        m_peak_err: (est.m_peak - res.m_peak) / res.m_peak,
        failure: None,
    }
}

/// Estimates and simulates every config; failed simulations are kept as
/// marked rows and excluded from the summary statistics.
pub fn validate(
    trace: &ModelTrace,
    layout: &ChunkLayout,
    hw: &HardwareProfile,
    configs: &[PlanConfig],
    cost: &CostOptions,
    sim: &SimOptions,
) -> ValidationReport {
    let rows: Vec<ValidationRow> = configs
        .par_iter()
        .map(|c| row(trace, layout, hw, c, cost, sim))
        .collect();
    let ok: Vec<&ValidationRow> = rows.iter().filter(|r| r.failure.is_none()).collect();
    ValidationReport {
        max_t_iter_err: ok.iter().map(|r| r.t_iter_err).fold(0.0, f64::max),
        median_t_iter_err: median(ok.iter().map(|r| r.t_iter_err).collect()),
        max_abs_m_peak_err: ok.iter().map(|r| r.m_peak_err.abs()).fold(0.0, f64::max),
        rows,
    }
}

/// Draws up to `n` distinct candidates without replacement. With
/// `fit_only`, only candidates whose estimated peak fits the device are
/// eligible.
pub fn sample_configs(
    ctx: &SearchContext<'_>,
    n: usize,
    seed: u64,
    fit_only: bool,
) -> Vec<PlanConfig> {
    let pool: Vec<PlanConfig> = ctx
        .candidates()
        .into_iter()
        .filter(|(_, m)| !fit_only || *m < ctx.hw.gpu_mem)
        .map(|(c, _)| c)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.choose_multiple(&mut rng, n).copied().collect()
}

impl ValidationReport {
    pub fn write_csv<W: Write>(&self, sink: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(CSV_HEADER)?;
        for r in &self.rows {
            let c = &r.config;
            let (status, detail) = match &r.failure {
                None => ("ok", String::new()),
                Some(m) => ("failed", m.clone()),
            };
            w.write_record([
                c.s_chunk.to_string(),
                c.n_chunk.to_string(),
                c.n_persist.to_string(),
                c.n_buffer.to_string(),
                c.n_block.to_string(),
                c.n_interval.to_string(),
                c.n_swap.to_string(),
                c.n_checkpoint.to_string(),
                format!("{:.9}", r.est_t_iter),
                format!("{:.9}", r.sim_t_iter),
                format!("{:.6}", r.t_iter_err),
                format!("{:.0}", r.est_m_peak),
                format!("{:.0}", r.sim_m_peak),
                format!("{:.6}", r.m_peak_err),
                status.to_string(),
                detail,
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
