//! The `memplan` command line.
//!
//! Exit status is 0 on success, 2 on usage errors and 1 on domain errors;
//! domain errors print `memplan: <module>::<Kind>: <message>` on stderr.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::cost::{estimate_config, estimate_iteration, CostOptions, CSV_HEADER};
use crate::hardware::{load_profile, HardwareProfile};
use crate::layout::{
    build_block_schedule, chunk_size_search, compute_interval, default_grid, pack_chunks,
    schedule_feasible, BlockSchedule, ChunkLayout, LayoutError, Plan, PlanConfig,
};
use crate::presets::PresetCatalog;
use crate::search::{find_optimal, min_buffers, SearchContext, SearchOptions, SearchOutcome};
use crate::sim::{export, sample_configs, simulate, validate, SimOptions};
use crate::trace::{
    load_trace, save_trace, synthesize_trace, CalibrationConstants, ModelSpec, ModelTrace,
    TraceError,
};
use crate::Error;

#[derive(Parser)]
#[command(
    name = "memplan",
    version,
    about = "Memory planner and iteration simulator for chunk-based training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize an operator trace from a model preset or spec file.
    GenTrace(GenTraceArgs),
    /// Pack a trace's parameters into chunks.
    Pack(PackArgs),
    /// Search for the fastest configuration that fits in device memory.
    Plan(PlanArgs),
    /// Analytic runtime and peak-memory estimate of a plan.
    Estimate(EstimateArgs),
    /// Event-driven simulation of one iteration under a plan.
    Simulate(SimulateArgs),
    /// Compare estimates with simulation on sampled configurations (CSV).
    Validate(ValidateArgs),
    /// Estimate every configuration of a parameter grid (CSV).
    Sweep(SweepArgs),
    /// Print the model and hardware presets.
    ListPresets,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct ModelSource {
    /// Model preset name.
    #[arg(long)]
    model: Option<String>,
    /// JSON model spec file.
    #[arg(long)]
    spec: Option<PathBuf>,
}

#[derive(Args)]
struct GenTraceArgs {
    #[command(flatten)]
    source: ModelSource,
    #[arg(long)]
    batch: Option<u64>,
    #[arg(long)]
    seq_len: Option<u64>,
    /// JSON calibration constants.
    #[arg(long)]
    calib: Option<PathBuf>,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Inputs {
    /// JSON trace file.
    #[arg(long)]
    trace: PathBuf,
    /// Hardware preset name or JSON profile file.
    #[arg(long)]
    hw: String,
}

#[derive(Args)]
struct ChunkArgs {
    /// Fixed chunk size, e.g. `268435456` or `256MiB`.
    #[arg(long, value_parser = parse_size, conflicts_with = "grid")]
    s_chunk: Option<u64>,
    /// Comma-separated chunk-size grid.
    #[arg(long, value_parser = parse_size, value_delimiter = ',')]
    grid: Option<Vec<u64>>,
}

#[derive(Args)]
struct CostArgs {
    /// Fragmentation factor on the peak-memory estimate.
    #[arg(long, default_value_t = CostOptions::default().alpha)]
    alpha: f64,
    /// Device bytes per persistent-chunk byte.
    #[arg(long, default_value_t = CostOptions::default().persist_state_factor)]
    persist_factor: u64,
}

impl CostArgs {
    fn options(&self) -> CostOptions {
        CostOptions {
            alpha: self.alpha,
            persist_state_factor: self.persist_factor,
        }
    }
}

#[derive(Args)]
struct PackArgs {
    #[arg(long)]
    trace: PathBuf,
    #[command(flatten)]
    chunk: ChunkArgs,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlanArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    chunk: ChunkArgs,
    #[command(flatten)]
    cost: CostArgs,
    /// Include the memory/runtime Pareto frontier.
    #[arg(long)]
    frontier: bool,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// Plan document, plan or bare config (JSON).
    #[arg(long)]
    plan: PathBuf,
    #[command(flatten)]
    cost: CostArgs,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long)]
    plan: PathBuf,
    #[arg(long, default_value_t = CostOptions::default().persist_state_factor)]
    persist_factor: u64,
    /// Event log CSV.
    #[arg(long)]
    events: Option<PathBuf>,
    /// Memory trace CSV.
    #[arg(long)]
    memory: Option<PathBuf>,
    /// Chrome trace-event JSON.
    #[arg(long)]
    chrome: Option<PathBuf>,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    chunk: ChunkArgs,
    #[command(flatten)]
    cost: CostArgs,
    #[arg(long, default_value_t = 50)]
    n_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sample from all candidates, not only those that fit.
    #[arg(long)]
    include_unfit: bool,
    /// Validate these plans instead of sampling; repeatable.
    #[arg(long)]
    plan: Vec<PathBuf>,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    chunk: ChunkArgs,
    #[command(flatten)]
    cost: CostArgs,
    /// Values as `a`, `a:b` (inclusive) or `a,b,c`; default 0:n_chunk.
    #[arg(long, value_parser = parse_values)]
    n_persist: Option<Values>,
    /// Default: the minimum buffer count for each n_persist.
    #[arg(long, value_parser = parse_values)]
    n_buffer: Option<Values>,
    #[arg(long, value_parser = parse_values, default_value = "0")]
    n_swap: Values,
    #[arg(long, value_parser = parse_values, default_value = "0")]
    n_checkpoint: Values,
    /// Default: derived from the trace and hardware.
    #[arg(long)]
    n_interval: Option<usize>,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
struct Values(Vec<usize>);

fn parse_values(s: &str) -> Result<Values, String> {
    let num = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("`{x}`: {e}"));
    if let Some((lo, hi)) = s.split_once(':') {
        let (lo, hi) = (num(lo)?, num(hi)?);
        if lo > hi {
            return Err(format!("empty range {s}"));
        }
        return Ok(Values((lo..=hi).collect()));
    }
    s.split(',').map(num).collect::<Result<_, _>>().map(Values)
}

fn parse_size(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let split = s.find(|c: char| !c.is_ascii_digit()).unwrap_or(s.len());
    let (digits, unit) = s.split_at(split);
    let n: u64 = digits.parse().map_err(|e| format!("`{s}`: {e}"))?;
    let mult: u64 = match unit.trim() {
        "" | "B" => 1,
        "K" | "KiB" => 1 << 10,
        "M" | "MiB" => 1 << 20,
        "G" | "GiB" => 1 << 30,
        u => return Err(format!("unknown size unit `{u}`")),
    };
    n.checked_mul(mult)
        .filter(|&v| v > 0)
        .ok_or_else(|| format!("bad size `{s}`"))
}

/// What `plan` writes; `estimate` and `simulate` read it back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanDocument {
    pub plan: Plan,
    pub outcome: SearchOutcome,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PlanInput {
    Document { plan: Plan },
    Plan(Plan),
    Config(PlanConfig),
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn open(path: &Path) -> Result<BufReader<File>, Error> {
    File::open(path).map(BufReader::new).map_err(io_err(path))
}

fn create(path: Option<&Path>) -> Result<Box<dyn Write>, Error> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(io_err(p))?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn finish(mut w: Box<dyn Write>, path: Option<&Path>) -> Result<(), Error> {
    let p = path.unwrap_or(Path::new("<stdout>"));
    w.flush().map_err(io_err(p))
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<(), Error> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w).map_err(io_err(path.unwrap_or(Path::new("<stdout>"))))?;
    finish(w, path)
}

fn read_trace(path: &Path) -> Result<ModelTrace, Error> {
    Ok(load_trace(open(path)?)?)
}

fn read_hardware(name: &str, catalog: &PresetCatalog) -> Result<HardwareProfile, Error> {
    let path = Path::new(name);
    if path.is_file() {
        Ok(load_profile(open(path)?)?)
    } else {
        Ok(catalog.hardware(name)?)
    }
}

fn load_inputs(inputs: &Inputs) -> Result<(ModelTrace, HardwareProfile), Error> {
    let catalog = PresetCatalog::load()?;
    Ok((
        read_trace(&inputs.trace)?,
        read_hardware(&inputs.hw, &catalog)?,
    ))
}

fn choose_layout(trace: &ModelTrace, chunk: &ChunkArgs) -> Result<ChunkLayout, Error> {
    if let Some(s) = chunk.s_chunk {
        return Ok(pack_chunks(trace, s)?);
    }
    let grid = chunk.grid.clone().unwrap_or_else(|| default_grid(trace));
    Ok(chunk_size_search(trace, &grid)?.1)
}

/// Resolves a plan file against `trace`; the chunks must be the trace's own
/// packing at the plan's chunk size.
fn read_plan(
    path: &Path,
    trace: &ModelTrace,
) -> Result<(ChunkLayout, BlockSchedule, PlanConfig), Error> {
    let input: PlanInput = serde_json::from_reader(open(path)?)?;
    let (config, chunks) = match input {
        PlanInput::Document { plan } | PlanInput::Plan(plan) => (plan.config, Some(plan.chunks)),
        PlanInput::Config(c) => (c, None),
    };
    let layout = pack_chunks(trace, config.s_chunk)?;
    if chunks.is_some_and(|c| c != layout.chunks) {
        return Err(LayoutError::InvalidConfig(
            "plan chunks differ from the trace's packing".into(),
        )
        .into());
    }
    config.validate_for(trace, &layout)?;
    let schedule = build_block_schedule(
        config.n_block,
        config.n_swap,
        config.n_checkpoint,
        config.n_interval,
    )?;
    Ok((layout, schedule, config))
}

fn gen_trace(a: GenTraceArgs) -> Result<(), Error> {
    let mut spec: ModelSpec = match (&a.source.model, &a.source.spec) {
        (Some(name), _) => PresetCatalog::load()?.model(name)?,
        (None, Some(path)) => serde_json::from_reader(open(path)?)
            .map_err(|e| TraceError::InvalidSpec(e.to_string()))?,
        (None, None) => unreachable!("clap enforces one model source"),
    };
    if let Some(b) = a.batch {
        spec.batch_size = b;
    }
    if let Some(s) = a.seq_len {
        spec.seq_len = s;
    }
    let calib: CalibrationConstants = match &a.calib {
        Some(p) => serde_json::from_reader(open(p)?)?,
        None => CalibrationConstants::default(),
    };
    let trace = synthesize_trace(&spec, &calib)?;
    let out = a.out.as_deref();
    let mut w = create(out)?;
    let p = out.unwrap_or(Path::new("<stdout>"));
    save_trace(&trace, &mut w).map_err(io_err(p))?;
    writeln!(w).map_err(io_err(p))?;
    finish(w, out)
}

fn pack(a: PackArgs) -> Result<(), Error> {
    let trace = read_trace(&a.trace)?;
    write_json(a.out.as_deref(), &choose_layout(&trace, &a.chunk)?)
}

fn plan(a: PlanArgs) -> Result<(), Error> {
    let (trace, hw) = load_inputs(&a.inputs)?;
    let layout = choose_layout(&trace, &a.chunk)?;
    let opts = SearchOptions {
        cost: a.cost.options(),
        frontier: a.frontier,
    };
    let started = Instant::now();
    let outcome = find_optimal(&trace, &layout, &hw, &opts)?;
    eprintln!(
        "search: {} evaluated, {} pruned in {:.3} s",
        outcome.n_evaluated,
        outcome.n_pruned,
        started.elapsed().as_secs_f64()
    );
    let doc = PlanDocument {
        plan: Plan::new(&layout, outcome.best)?,
        outcome,
    };
    write_json(a.out.as_deref(), &doc)
}

fn estimate(a: EstimateArgs) -> Result<(), Error> {
    let (trace, hw) = load_inputs(&a.inputs)?;
    let (layout, schedule, config) = read_plan(&a.plan, &trace)?;
    let est = estimate_iteration(&trace, &layout, &schedule, &config, &hw, &a.cost.options())?;
    match a.format {
        Format::Json => write_json(a.out.as_deref(), &est),
        Format::Csv => {
            let out = a.out.as_deref();
            let mut w = csv::Writer::from_writer(create(out)?);
            w.write_record(CSV_HEADER)?;
            w.write_record(est.csv_record(&config))?;
            let inner = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
            finish(inner, out)
        }
    }
}

fn simulate_cmd(a: SimulateArgs) -> Result<(), Error> {
    let (trace, hw) = load_inputs(&a.inputs)?;
    let (layout, schedule, config) = read_plan(&a.plan, &trace)?;
    let opts = SimOptions {
        persist_state_factor: a.persist_factor,
        record_timeline: true,
    };
    let result = simulate(&trace, &layout, &schedule, &config, &hw, &opts)?;
    if let Some(p) = &a.events {
        export::write_event_csv(&result, create(Some(p))?)?;
    }
    if let Some(p) = &a.memory {
        export::write_memory_csv(&result, create(Some(p))?)?;
    }
    if let Some(p) = &a.chrome {
        let mut w = create(Some(p))?;
        export::write_chrome_trace(&result, &mut w)?;
        finish(w, Some(p))?;
    }
    eprintln!(
        "simulated: t_iter {:.6} s, m_peak {:.0} bytes, {} backward fetches",
        result.t_iter, result.m_peak, result.backward_gathers
    );
    write_json(a.out.as_deref(), &result)
}

fn validate_cmd(a: ValidateArgs) -> Result<(), Error> {
    let (trace, hw) = load_inputs(&a.inputs)?;
    let cost = a.cost.options();
    let (layout, configs) = if a.plan.is_empty() {
        let layout = choose_layout(&trace, &a.chunk)?;
        let ctx = SearchContext::new(&trace, &layout, &hw, cost)?;
        let configs = sample_configs(&ctx, a.n_samples, a.seed, !a.include_unfit);
        (layout, configs)
    } else {
        let mut layout = None;
        let mut configs = Vec::new();
        for p in &a.plan {
            let (l, _, c) = read_plan(p, &trace)?;
            if layout
                .as_ref()
                .is_some_and(|prev: &ChunkLayout| prev.s_chunk != l.s_chunk)
            {
                return Err(LayoutError::InvalidConfig(
                    "validated plans must share one chunk size".into(),
                )
                .into());
            }
            layout = Some(l);
            configs.push(c);
        }
        (layout.expect("at least one plan"), configs)
    };
    let report = validate(
        &trace,
        &layout,
        &hw,
        &configs,
        &cost,
        &SimOptions::default(),
    );
    eprintln!(
        "validated {} configs: max runtime error {:.4}, median {:.4}, max |memory error| {:.4}",
        report.rows.len(),
        report.max_t_iter_err,
        report.median_t_iter_err,
        report.max_abs_m_peak_err
    );
    let out = a.out.as_deref();
    let mut w = create(out)?;
    report.write_csv(&mut w)?;
    finish(w, out)
}

fn sweep(a: SweepArgs) -> Result<(), Error> {
    let (trace, hw) = load_inputs(&a.inputs)?;
    let layout = choose_layout(&trace, &a.chunk)?;
    let cost = a.cost.options();
    let n_chunk = layout.n_chunk();
    let n_interval = a
        .n_interval
        .unwrap_or_else(|| compute_interval(&trace, &hw));
    let persists = a.n_persist.map_or_else(|| (0..=n_chunk).collect(), |v| v.0);
    let out = a.out.as_deref();
    let mut w = csv::Writer::from_writer(create(out)?);
    let mut header: Vec<&str> = CSV_HEADER.to_vec();
    header.push("fits");
    w.write_record(header)?;
    for &p in &persists {
        let buffers = match &a.n_buffer {
            Some(v) => v.0.clone(),
            None => vec![min_buffers(n_chunk, p.min(n_chunk))],
        };
        for &b in &buffers {
            for &s in &a.n_swap.0 {
                for &c in &a.n_checkpoint.0 {
                    let config = PlanConfig {
                        s_chunk: layout.s_chunk,
                        n_chunk,
                        n_persist: p,
                        n_buffer: b,
                        n_block: trace.n_blocks,
                        n_interval,
                        n_swap: s,
                        n_checkpoint: c,
                    };
                    if config.validate().is_err()
                        || !schedule_feasible(trace.n_blocks, s, c, n_interval)
                    {
                        continue;
                    }
                    let est = estimate_config(&trace, &layout, &config, &hw, &cost)?;
                    let mut rec = est.csv_record(&config);
                    rec.push((est.m_peak < hw.gpu_mem).to_string());
                    w.write_record(rec)?;
                }
            }
        }
    }
    let inner = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    finish(inner, out)
}

fn list_presets() -> Result<(), Error> {
    let catalog = PresetCatalog::load()?;
    let mut w = create(None)?;
    let p = Path::new("<stdout>");
    for (name, m) in &catalog.models {
        writeln!(
            w,
            "model\t{name}\t{:.2}B params, {} blocks, hidden {}",
            m.param_count() as f64 / 1e9,
            m.n_blocks,
            m.hidden_size
        )
        .map_err(io_err(p))?;
    }
    for (name, h) in &catalog.hardware {
        writeln!(
            w,
            "hardware\t{name}\t{} ranks, {:.0} GB device memory",
            h.world_size,
            h.gpu_mem / 1e9
        )
        .map_err(io_err(p))?;
    }
    finish(w, None)
}

fn execute(command: Command) -> Result<(), Error> {
    match command {
        Command::GenTrace(a) => gen_trace(a),
        Command::Pack(a) => pack(a),
        Command::Plan(a) => plan(a),
        Command::Estimate(a) => estimate(a),
        Command::Simulate(a) => simulate_cmd(a),
        Command::Validate(a) => validate_cmd(a),
        Command::Sweep(a) => sweep(a),
        Command::ListPresets => list_presets(),
    }
}

/// Parses `args` (program name first), runs the verb and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("memplan: {}::{}: {e}", e.module(), e.kind());
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn grammar_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn value_lists() {
        assert_eq!(parse_values("3"), Ok(Values(vec![3])));
        assert_eq!(parse_values("1:3"), Ok(Values(vec![1, 2, 3])));
        assert_eq!(parse_values("0,4,2"), Ok(Values(vec![0, 4, 2])));
        assert!(parse_values("3:1").is_err());
        assert!(parse_values("x").is_err());
    }

    #[test]
    fn sizes() {
        assert_eq!(parse_size("512MiB"), Ok(512 << 20));
        assert_eq!(parse_size("2G"), Ok(2 << 30));
        assert_eq!(parse_size("4096"), Ok(4096));
        assert!(parse_size("0").is_err());
        assert!(parse_size("3TB").is_err());
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["memplan", "frobnicate"]), 2);
        assert_eq!(run(["memplan", "gen-trace"]), 2);
        assert_eq!(
            run(["memplan", "gen-trace", "--model", "a", "--spec", "b"]),
            2
        );
        assert_eq!(
            run(["memplan", "sweep", "--trace", "t", "--hw", "h", "--n-swap", "z"]),
            2
        );
    }

    #[test]
    fn domain_errors_exit_1() {
        assert_eq!(run(["memplan", "gen-trace", "--model", "no-such-model"]), 1);
        assert_eq!(
            run(["memplan", "pack", "--trace", "/nonexistent/trace.json"]),
            1
        );
    }

    #[test]
    fn error_names() {
        let e: Error = crate::search::SearchError::NoFeasibleConfig {
            min_peak: 2.0,
            gpu_mem: 1.0,
        }
        .into();
        assert_eq!(
            (e.module(), e.kind().as_str()),
            ("search", "NoFeasibleConfig")
        );
        let e: Error = LayoutError::NoFeasibleChunkSize.into();
        assert_eq!(
            (e.module(), e.kind().as_str()),
            ("layout", "NoFeasibleChunkSize")
        );
    }
}
