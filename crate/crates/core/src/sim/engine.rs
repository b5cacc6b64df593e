use std::collections::VecDeque;

use crate::hardware::{gather_time, reduce_time, HardwareProfile};
use crate::layout::{BlockSchedule, BlockStrategy, ChunkLayout, PlanConfig};
use crate::trace::ModelTrace;

use super::{LinkSample, Phase, Resource, SimError, SimEvent, SimOptions, SimulationResult};

fn ns(secs: f64) -> u64 {
    (secs * 1e9).round().max(0.0) as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Task {
    Fwd(usize),
    Recompute(usize),
    Bwd(usize),
    GpuOptim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ChunkState {
    Persistent,
    Host,
    Fetching,
    Ready,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dir {
    H2d,
    D2h,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FlowKind {
    Upload,
    Offload,
    SwapOut,
    SwapIn,
}

impl FlowKind {
    fn dir(self) -> Dir {
        match self {
            FlowKind::Upload | FlowKind::SwapIn => Dir::H2d,
            FlowKind::Offload | FlowKind::SwapOut => Dir::D2h,
        }
    }

    fn name(self) -> &'static str {
        match self {
            FlowKind::Upload => "upload",
            FlowKind::Offload => "offload",
            FlowKind::SwapOut => "swap_out",
            FlowKind::SwapIn => "swap_in",
        }
    }
}

#[derive(Debug, Clone)]
struct Flow {
    id: usize,
    kind: FlowKind,
    subject: usize,
    bytes_left: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SwapState {
    OnDevice,
    Leaving,
    Away,
    Returning,
    Back,
}

#[derive(Debug, Clone, Copy)]
enum Stream {
    Idle,
    Collective { chunk: usize, end: u64 },
    Link,
}

#[derive(Debug, Clone, Copy)]
struct Use {
    chunk: usize,
    backward: bool,
    last_task: usize,
}

pub(super) struct Engine<'a> {
    trace: &'a ModelTrace,
    layout: &'a ChunkLayout,
    hw: &'a HardwareProfile,
    cfg: &'a PlanConfig,
    strategies: &'a [BlockStrategy],
    record: bool,

    now: u64,
    program: Vec<Task>,
    /// Use index beginning at each task, if any.
    task_use: Vec<Option<usize>>,
    /// Use ending at each task, if any.
    task_use_end: Vec<Option<usize>>,
    uses: Vec<Use>,
    op_chunk: Vec<Option<usize>>,
    block_ops: Vec<std::ops::Range<usize>>,

    pc: usize,
    gpu: Option<(u64, usize)>,
    uses_started: usize,
    fwd_end: Option<u64>,
    bwd_end: Option<u64>,
    gpu_end: Option<u64>,
    bwd_cursor: Option<usize>,

    chunk_state: Vec<ChunkState>,
    chunk_buf: Vec<Option<usize>>,
    buffers: Vec<Option<usize>>,
    pins: Vec<usize>,
    next_fetch: usize,
    prefetch: Stream,
    backward_gathers: usize,

    grad_queue: VecDeque<usize>,
    grad: Stream,
    persistent_reduced: usize,

    cpu_queue: VecDeque<usize>,
    cpu: Option<(u64, usize)>,
    cpu_first: Option<u64>,
    cpu_last: Option<u64>,

    flows: Vec<Flow>,
    next_flow: usize,
    swap: Vec<SwapState>,

    cur: i64,
    peak: i64,
    act_live: Vec<bool>,
    initial: i64,

    timeline: Vec<SimEvent>,
    mem_trace: Vec<(u64, i64)>,
    link_util: Vec<LinkSample>,
}

impl<'a> Engine<'a> {
    pub(super) fn new(
        trace: &'a ModelTrace,
        layout: &'a ChunkLayout,
        schedule: &'a BlockSchedule,
        cfg: &'a PlanConfig,
        hw: &'a HardwareProfile,
        opts: &SimOptions,
    ) -> Self {
        let n_ops = trace.len();
        let strategies = &schedule.strategies[..];
        let block_ops: Vec<_> = (0..trace.n_blocks).map(|b| trace.block_ops(b)).collect();

        let mut program: Vec<Task> = (0..n_ops).map(Task::Fwd).collect();
        for i in (0..n_ops).rev() {
            if let Some(b) = trace.ops[i].block_id {
                if strategies[b] == BlockStrategy::Checkpoint && block_ops[b].end == i + 1 {
                    program.push(Task::Recompute(b));
                }
            }
            program.push(Task::Bwd(i));
        }
        program.push(Task::GpuOptim);

        let op_chunk = layout.op_chunks(n_ops);
        let task_chunk = |t: &Task| match *t {
            Task::Fwd(i) | Task::Bwd(i) => op_chunk[i],
            Task::Recompute(b) => op_chunk[block_ops[b].start],
            Task::GpuOptim => None,
        };
        let mut uses: Vec<Use> = Vec::new();
        let mut task_use = vec![None; program.len()];
        let mut prev: Option<(usize, bool)> = None;
        for (k, t) in program.iter().enumerate() {
            let backward = !matches!(t, Task::Fwd(_));
            let Some(c) = task_chunk(t) else {
                continue;
            };
            if prev != Some((c, backward)) {
                task_use[k] = Some(uses.len());
                uses.push(Use {
                    chunk: c,
                    backward,
                    last_task: k,
                });
            }
            if let Some(u) = uses.last_mut() {
                u.last_task = k;
            }
            prev = Some((c, backward));
        }

        let mut task_use_end = vec![None; program.len()];
        for (u, x) in uses.iter().enumerate() {
            task_use_end[x.last_task] = Some(u);
        }

        let n_chunk = layout.n_chunk();
        let chunk_state = (0..n_chunk)
            .map(|c| {
                if c < cfg.n_persist {
                    ChunkState::Persistent
                } else {
                    ChunkState::Host
                }
            })
            .collect();
        let initial = (layout.s_chunk * opts.persist_state_factor * cfg.n_persist as u64
            + layout.s_chunk * cfg.n_buffer as u64) as i64;

        Engine {
            trace,
            layout,
            hw,
            cfg,
            strategies,
            record: opts.record_timeline,
            now: 0,
            program,
            task_use,
            task_use_end,
            uses,
            op_chunk,
            block_ops,
            pc: 0,
            gpu: None,
            uses_started: 0,
            fwd_end: None,
            bwd_end: None,
            gpu_end: None,
            bwd_cursor: None,
            chunk_state,
            chunk_buf: vec![None; n_chunk],
            buffers: vec![None; cfg.n_buffer],
            pins: vec![0; n_chunk],
            next_fetch: 0,
            prefetch: Stream::Idle,
            backward_gathers: 0,
            grad_queue: VecDeque::new(),
            grad: Stream::Idle,
            persistent_reduced: 0,
            cpu_queue: VecDeque::new(),
            cpu: None,
            cpu_first: None,
            cpu_last: None,
            flows: Vec::new(),
            next_flow: 0,
            swap: vec![SwapState::OnDevice; trace.n_blocks],
            cur: initial,
            peak: initial,
            act_live: vec![false; n_ops],
            initial,
            timeline: Vec::new(),
            mem_trace: vec![(0, initial)],
            link_util: Vec::new(),
        }
    }

    fn log(&mut self, resource: Resource, phase: Phase, name: &str, subject: usize) {
        if self.record {
            self.timeline.push(SimEvent {
                time_ns: self.now,
                resource,
                phase,
                name: name.to_string(),
                subject,
            });
        }
    }

    fn probe(&mut self, bytes: i64) {
        self.peak = self.peak.max(bytes);
    }

    fn alloc(&mut self, bytes: i64) {
        self.cur += bytes;
        self.peak = self.peak.max(self.cur);
        self.mem_trace.push((self.now, self.cur));
    }

    fn free(&mut self, bytes: i64, what: &str) -> Result<(), SimError> {
        self.cur -= bytes;
        if self.cur < 0 {
            return Err(SimError::LedgerUnderflow {
                time_ns: self.now,
                detail: what.to_string(),
            });
        }
        self.mem_trace.push((self.now, self.cur));
        Ok(())
    }

    fn alloc_act(&mut self, op: usize) {
        if !self.act_live[op] {
            self.act_live[op] = true;
            self.alloc(self.trace.ops[op].act_bytes as i64);
        }
    }

    fn free_act(&mut self, op: usize) -> Result<(), SimError> {
        if self.act_live[op] {
            self.act_live[op] = false;
            self.free(self.trace.ops[op].act_bytes as i64, "activation")?;
        }
        Ok(())
    }

    fn block_act(&self, b: usize) -> u64 {
        self.trace.ops[self.block_ops[b].clone()]
            .iter()
            .map(|o| o.act_bytes)
            .sum()
    }

    fn is_persistent(&self, c: usize) -> bool {
        self.chunk_state[c] == ChunkState::Persistent
    }

    fn shard(&self, c: usize) -> f64 {
        self.hw.shard_bytes(self.layout.chunks[c].used_bytes)
    }

    // ---- links -------------------------------------------------------

    fn shares(&self, dir: Dir) -> usize {
        let n = self.flows.iter().filter(|f| f.kind.dir() == dir).count();
        // Uploads and swap-ins stage through host memory that an active
        // swap-out is draining into.
        let staging =
            dir == Dir::H2d && n > 0 && self.flows.iter().any(|f| f.kind == FlowKind::SwapOut);
        n + usize::from(staging)
    }

    fn rate_per_ns(&self, dir: Dir) -> f64 {
        let bw = match dir {
            Dir::H2d => self.hw.h2d_bw,
            Dir::D2h => self.hw.d2h_bw,
        };
        bw * 1e-9 / self.shares(dir).max(1) as f64
    }

    fn sample_links(&mut self) {
        if !self.record {
            return;
        }
        let util = |e: &Self, dir: Dir| {
            let n = e.flows.iter().filter(|f| f.kind.dir() == dir).count();
            if n == 0 {
                0.0
            } else {
                n as f64 / e.shares(dir) as f64
            }
        };
        let sample = LinkSample {
            time_ns: self.now,
            h2d: util(self, Dir::H2d),
            d2h: util(self, Dir::D2h),
        };
        match self.link_util.last_mut() {
            Some(last) if last.time_ns == sample.time_ns => *last = sample,
            _ => self.link_util.push(sample),
        }
    }

    fn start_flow(&mut self, kind: FlowKind, subject: usize, bytes: f64) {
        let id = self.next_flow;
        self.next_flow += 1;
        self.flows.push(Flow {
            id,
            kind,
            subject,
            bytes_left: bytes,
        });
        let res = match kind.dir() {
            Dir::H2d => Resource::H2d,
            Dir::D2h => Resource::D2h,
        };
        self.log(res, Phase::Start, kind.name(), subject);
        self.sample_links();
    }

    fn flow_finish(&self, f: &Flow) -> u64 {
        if f.bytes_left <= 1e-6 {
            return self.now;
        }
        let steps = f.bytes_left / self.rate_per_ns(f.kind.dir());
        self.now + (steps - 1e-9).ceil().max(0.0) as u64
    }

    // ---- event loop --------------------------------------------------

    pub(super) fn run(mut self) -> Result<SimulationResult, SimError> {
        loop {
            while self.start_ready()? {}
            if self.done() {
                break;
            }
            let Some(t) = self.next_event() else {
                return Err(SimError::DeadlockDetected {
                    time_ns: self.now,
                    detail: self.stall_reason(),
                });
            };
            self.advance(t);
            self.complete_due()?;
        }
        self.teardown()
    }

    fn done(&self) -> bool {
        self.pc == self.program.len()
            && self.gpu.is_none()
            && matches!(self.grad, Stream::Idle)
            && self.grad_queue.is_empty()
            && self.cpu.is_none()
            && self.cpu_queue.is_empty()
            && self.flows.is_empty()
            && matches!(self.prefetch, Stream::Idle)
    }

    fn stall_reason(&self) -> String {
        match self.program.get(self.pc) {
            Some(t) => format!("GPU waiting on {t:?}; {} buffers", self.buffers.len()),
            None => "GPU finished, streams idle".into(),
        }
    }

    fn next_event(&self) -> Option<u64> {
        let mut t: Option<u64> = None;
        let mut take = |x: u64| t = Some(t.map_or(x, |y: u64| y.min(x)));
        if let Some((end, _)) = self.gpu {
            take(end);
        }
        if let Some((end, _)) = self.cpu {
            take(end);
        }
        for s in [self.prefetch, self.grad] {
            if let Stream::Collective { end, .. } = s {
                take(end);
            }
        }
        for f in &self.flows {
            take(self.flow_finish(f));
        }
        t
    }

    fn advance(&mut self, t: u64) {
        let dt = (t - self.now) as f64;
        if dt > 0.0 {
            let h2d = self.rate_per_ns(Dir::H2d);
            let d2h = self.rate_per_ns(Dir::D2h);
            for f in &mut self.flows {
                let r = match f.kind.dir() {
                    Dir::H2d => h2d,
                    Dir::D2h => d2h,
                };
                f.bytes_left = (f.bytes_left - r * dt).max(0.0);
            }
        }
        self.now = t;
    }

    fn complete_due(&mut self) -> Result<(), SimError> {
        let now = self.now;
        if let Some((end, k)) = self.gpu {
            if end == now {
                self.gpu = None;
                self.finish_task(k)?;
            }
        }
        if let Some((end, c)) = self.cpu {
            if end == now {
                self.cpu = None;
                self.cpu_last = Some(now);
                self.log(Resource::Cpu, Phase::End, "cpu_update", c);
            }
        }
        if let Stream::Collective { chunk, end } = self.prefetch {
            if end == now {
                self.log(Resource::Collective, Phase::End, "gather", chunk);
                let bytes = self.shard(chunk);
                self.start_flow(FlowKind::Upload, chunk, bytes);
                self.prefetch = Stream::Link;
            }
        }
        if let Stream::Collective { chunk, end } = self.grad {
            if end == now {
                self.log(Resource::Collective, Phase::End, "reduce", chunk);
                self.after_reduce(chunk);
            }
        }
        let mut due: Vec<Flow> = Vec::new();
        let mut keep = Vec::with_capacity(self.flows.len());
        for f in std::mem::take(&mut self.flows) {
            if self.flow_finish_at(&f, now) {
                due.push(f);
            } else {
                keep.push(f);
            }
        }
        self.flows = keep;
        due.sort_by_key(|f| (f.subject, f.id));
        for f in due {
            self.finish_flow(f)?;
        }
        self.sample_links();
        Ok(())
    }

    fn flow_finish_at(&self, f: &Flow, now: u64) -> bool {
        f.bytes_left <= 1e-6 || self.flow_finish(f) <= now
    }

    fn finish_flow(&mut self, f: Flow) -> Result<(), SimError> {
        let res = match f.kind.dir() {
            Dir::H2d => Resource::H2d,
            Dir::D2h => Resource::D2h,
        };
        self.log(res, Phase::End, f.kind.name(), f.subject);
        match f.kind {
            FlowKind::Upload => {
                self.chunk_state[f.subject] = ChunkState::Ready;
                self.prefetch = Stream::Idle;
            }
            FlowKind::Offload => {
                let c = f.subject;
                self.grad = Stream::Idle;
                self.pins[c] -= 1;
                if let Some(b) = self.chunk_buf[c].take() {
                    self.buffers[b] = None;
                }
                self.chunk_state[c] = ChunkState::Host;
                self.cpu_queue.push_back(c);
            }
            FlowKind::SwapOut => {
                let b = f.subject;
                self.swap[b] = SwapState::Away;
                for op in self.block_ops[b].clone() {
                    self.free_act(op)?;
                }
            }
            FlowKind::SwapIn => {
                self.swap[f.subject] = SwapState::Back;
            }
        }
        Ok(())
    }

    fn after_reduce(&mut self, c: usize) {
        if self.is_persistent(c) {
            self.persistent_reduced += 1;
            self.grad = Stream::Idle;
        } else {
            let bytes = self.shard(c);
            self.start_flow(FlowKind::Offload, c, bytes);
            self.grad = Stream::Link;
        }
    }

    // ---- starts ------------------------------------------------------

    fn start_ready(&mut self) -> Result<bool, SimError> {
        let mut changed = self.try_start_gpu()?;
        changed |= self.try_start_cpu();
        changed |= self.try_start_grad();
        changed |= self.try_start_prefetch();
        changed |= self.try_start_swap_in();
        Ok(changed)
    }

    fn task_chunk(&self, t: Task) -> Option<usize> {
        match t {
            Task::Fwd(i) | Task::Bwd(i) => self.op_chunk[i],
            Task::Recompute(b) => self.op_chunk[self.block_ops[b].start],
            Task::GpuOptim => None,
        }
    }

    fn resident(&self, c: usize) -> bool {
        matches!(
            self.chunk_state[c],
            ChunkState::Persistent | ChunkState::Ready
        )
    }

    fn try_start_gpu(&mut self) -> Result<bool, SimError> {
        if self.gpu.is_some() || self.pc >= self.program.len() {
            return Ok(false);
        }
        let k = self.pc;
        let task = self.program[k];
        if let Some(c) = self.task_chunk(task) {
            if !self.resident(c) {
                return Ok(false);
            }
        }
        match task {
            Task::Bwd(i) => {
                if let Some(b) = self.trace.ops[i].block_id {
                    if self.strategies[b] == BlockStrategy::Swap && self.swap[b] != SwapState::Back
                    {
                        self.bwd_cursor = Some(b);
                        return Ok(false);
                    }
                }
            }
            Task::GpuOptim => {
                let n_persist = self.cfg.n_persist.min(self.layout.n_chunk());
                if self.persistent_reduced < n_persist {
                    return Ok(false);
                }
            }
            _ => {}
        }
        if self.task_use[k].is_some() {
            self.uses_started += 1;
        }
        let (dur, name, subject) = match task {
            Task::Fwd(i) => {
                let op = &self.trace.ops[i];
                self.probe(self.cur + op.d_peak_prior.max(op.d_peak_op));
                (op.t_fwd, "fwd", i)
            }
            Task::Recompute(b) => {
                self.bwd_cursor = Some(b);
                let ops = self.block_ops[b].clone();
                for op in ops.clone().skip(1) {
                    self.alloc_act(op);
                }
                (self.trace.block_fwd_time(b), "recompute", b)
            }
            Task::Bwd(i) => {
                let op = &self.trace.ops[i];
                let (pp, cp, po) = (op.d_peak_prior, op.d_cur_prior, op.d_peak_op);
                let t = op.t_bwd;
                if let Some(b) = op.block_id {
                    self.bwd_cursor = Some(b);
                }
                self.probe(self.cur + pp);
                if cp >= 0 {
                    self.alloc(cp);
                } else {
                    self.free(-cp, "prior delta")?;
                }
                self.probe(self.cur + po);
                (t, "bwd", i)
            }
            Task::GpuOptim => {
                let dtype = self.trace.dtype_bytes() as f64;
                let params: f64 = self.layout.chunks
                    [..self.cfg.n_persist.min(self.layout.n_chunk())]
                    .iter()
                    .map(|c| c.used_bytes as f64 / dtype)
                    .sum();
                (params / self.hw.gpu_optim_rate, "gpu_optim", 0)
            }
        };
        self.log(Resource::Gpu, Phase::Start, name, subject);
        self.gpu = Some((self.now + ns(dur), k));
        self.pc += 1;
        Ok(true)
    }

    fn finish_task(&mut self, k: usize) -> Result<(), SimError> {
        let task = self.program[k];
        match task {
            Task::Fwd(i) => {
                self.log(Resource::Gpu, Phase::End, "fwd", i);
                self.alloc_act(i);
                if let Some(b) = self.trace.ops[i].block_id {
                    if self.block_ops[b].end == i + 1 {
                        match self.strategies[b] {
                            BlockStrategy::Checkpoint => {
                                for op in self.block_ops[b].clone().skip(1) {
                                    self.free_act(op)?;
                                }
                            }
                            BlockStrategy::Swap => {
                                self.swap[b] = SwapState::Leaving;
                                let bytes = self.block_act(b) as f64;
                                self.start_flow(FlowKind::SwapOut, b, bytes);
                            }
                            BlockStrategy::None => {}
                        }
                    }
                }
                if i + 1 == self.trace.len() {
                    self.fwd_end = Some(self.now);
                    self.bwd_cursor = Some(self.trace.n_blocks);
                    self.alloc(self.trace.m_fwd as i64);
                }
            }
            Task::Recompute(b) => self.log(Resource::Gpu, Phase::End, "recompute", b),
            Task::Bwd(i) => {
                self.log(Resource::Gpu, Phase::End, "bwd", i);
                let d = self.trace.ops[i].d_cur_op;
                if d >= 0 {
                    self.alloc(d);
                } else {
                    self.free(-d, "operator delta")?;
                }
                self.free_act(i)?;
                if i == 0 {
                    self.bwd_end = Some(self.now);
                }
            }
            Task::GpuOptim => {
                self.log(Resource::Gpu, Phase::End, "gpu_optim", 0);
                self.gpu_end = Some(self.now);
            }
        }
        if let Some(u) = self.task_use_end[k].map(|u| self.uses[u]) {
            if u.backward {
                self.grad_queue.push_back(u.chunk);
            } else if !self.is_persistent(u.chunk) {
                self.pins[u.chunk] -= 1;
            }
        }
        Ok(())
    }

    fn try_start_cpu(&mut self) -> bool {
        if self.cpu.is_some() {
            return false;
        }
        let Some(c) = self.cpu_queue.pop_front() else {
            return false;
        };
        let params = self.shard(c) / self.trace.dtype_bytes() as f64;
        self.cpu_first.get_or_insert(self.now);
        self.log(Resource::Cpu, Phase::Start, "cpu_update", c);
        self.cpu = Some((self.now + ns(params / self.hw.cpu_optim_rate), c));
        true
    }

    fn try_start_grad(&mut self) -> bool {
        if !matches!(self.grad, Stream::Idle) {
            return false;
        }
        let Some(c) = self.grad_queue.pop_front() else {
            return false;
        };
        let t = reduce_time(self.layout.chunks[c].used_bytes as f64, self.hw);
        if t > 0.0 {
            self.log(Resource::Collective, Phase::Start, "reduce", c);
            self.grad = Stream::Collective {
                chunk: c,
                end: self.now + ns(t),
            };
        } else {
            self.after_reduce(c);
        }
        true
    }

    /// Position of the next use of chunk `c` strictly after use `k`.
    fn next_use(&self, c: usize, k: usize) -> usize {
        self.uses[k + 1..]
            .iter()
            .position(|u| u.chunk == c)
            .map_or(usize::MAX, |p| k + 1 + p)
    }

    fn try_start_prefetch(&mut self) -> bool {
        if !matches!(self.prefetch, Stream::Idle) {
            return false;
        }
        let mut changed = false;
        while self.next_fetch < self.uses.len() {
            let k = self.next_fetch;
            // One use of lookahead: fetch for use k once use k-1 has begun.
            if k > 0 && self.uses_started < k {
                break;
            }
            let u = self.uses[k];
            let c = u.chunk;
            match self.chunk_state[c] {
                ChunkState::Persistent => {
                    self.next_fetch += 1;
                    changed = true;
                    continue;
                }
                ChunkState::Ready => {
                    self.pins[c] += 1;
                    self.next_fetch += 1;
                    changed = true;
                    continue;
                }
                ChunkState::Fetching => break,
                ChunkState::Host => {}
            }
            let Some(buf) = self.pick_buffer(k) else {
                break;
            };
            if let Some(old) = self.buffers[buf].take() {
                self.chunk_state[old] = ChunkState::Host;
                self.chunk_buf[old] = None;
                self.log(Resource::Gpu, Phase::End, "evict", old);
            }
            self.buffers[buf] = Some(c);
            self.chunk_buf[c] = Some(buf);
            self.chunk_state[c] = ChunkState::Fetching;
            self.pins[c] += 1;
            self.next_fetch += 1;
            if u.backward {
                self.backward_gathers += 1;
            }
            let g = gather_time(self.layout.chunks[c].used_bytes as f64, self.hw);
            if g > 0.0 {
                self.log(Resource::Collective, Phase::Start, "gather", c);
                self.prefetch = Stream::Collective {
                    chunk: c,
                    end: self.now + ns(g),
                };
            } else {
                let bytes = self.shard(c);
                self.start_flow(FlowKind::Upload, c, bytes);
                self.prefetch = Stream::Link;
            }
            return true;
        }
        changed
    }

    /// Empty buffer, else the unpinned resident chunk used farthest ahead.
    fn pick_buffer(&self, k: usize) -> Option<usize> {
        if let Some(b) = self.buffers.iter().position(|b| b.is_none()) {
            return Some(b);
        }
        self.buffers
            .iter()
            .enumerate()
            .filter_map(|(b, c)| c.map(|c| (b, c)))
            .filter(|&(_, c)| self.pins[c] == 0 && self.chunk_state[c] == ChunkState::Ready)
            .max_by_key(|&(b, c)| (self.next_use(c, k), std::cmp::Reverse(b)))
            .map(|(b, _)| b)
    }

    fn try_start_swap_in(&mut self) -> bool {
        let Some(cursor) = self.bwd_cursor else {
            return false;
        };
        let forced = match self.program.get(self.pc) {
            Some(Task::Bwd(i)) if self.gpu.is_none() => self.trace.ops[*i].block_id,
            _ => None,
        };
        let mut changed = false;
        for b in (0..self.trace.n_blocks).rev() {
            if self.swap[b] != SwapState::Away {
                continue;
            }
            let near = b + self.cfg.n_interval >= cursor;
            let bytes = self.block_act(b) as i64;
            let fits = self.cur + bytes <= self.peak;
            if forced == Some(b) || (near && fits) {
                self.swap[b] = SwapState::Returning;
                for op in self.block_ops[b].clone() {
                    self.alloc_act(op);
                }
                self.start_flow(FlowKind::SwapIn, b, bytes as f64);
                changed = true;
            }
        }
        changed
    }

    #[cfg(test)]
    pub(super) fn skip_program(&mut self) {
        self.pc = self.program.len();
        self.fwd_end = Some(0);
        self.alloc(self.trace.m_fwd as i64);
    }

    #[cfg(test)]
    pub(super) fn inject_swap_out(&mut self, block: usize, bytes: f64) {
        self.swap[block] = SwapState::Leaving;
        self.start_flow(FlowKind::SwapOut, block, bytes);
    }

    fn teardown(mut self) -> Result<SimulationResult, SimError> {
        self.free(self.trace.m_fwd as i64, "forward residual")?;
        // Net allocations made by operator deltas over the backward pass.
        let scratch: i64 = self
            .trace
            .ops
            .iter()
            .map(|o| o.d_cur_prior + o.d_cur_op)
            .sum();
        if scratch >= 0 {
            self.free(scratch, "operator scratch")?;
        } else {
            self.alloc(-scratch);
        }
        let secs = |t: u64| t as f64 * 1e-9;
        let fwd_end = self.fwd_end.unwrap_or(0);
        let bwd_end = self.bwd_end.unwrap_or(fwd_end);
        let end = self
            .gpu_end
            .unwrap_or(bwd_end)
            .max(self.cpu_last.unwrap_or(0))
            .max(self.now);
        let cpu_span = match (self.cpu_first, self.cpu_last) {
            (Some(a), Some(b)) => secs(b - a),
            _ => 0.0,
        };
        Ok(SimulationResult {
            t_iter: secs(end),
            t_fwd: secs(fwd_end),
            t_bwd: secs(bwd_end - fwd_end),
            t_cpu_optim_span: cpu_span,
            m_peak: self.peak as f64,
            timeline: self.timeline,
            mem_trace: self.mem_trace,
            link_util: self.link_util,
            initial_bytes: self.initial,
            final_bytes: self.cur,
            backward_gathers: self.backward_gathers,
        })
    }
}
