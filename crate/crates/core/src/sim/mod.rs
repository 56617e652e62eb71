//! Discrete-event simulation of PD-disaggregated serving with retrieval.
//!
//! Each request retrieves once before prefill, ships its KV cache over a
//! single FIFO link, then decodes `output_len` tokens and blocks on a
//! retrieval probe before every `delta`-th token. All retrievals go through
//! one shared vector pool: a real [`Engine`] over the real store and graph,
//! fed by the two-queue [`Scheduler`]. Pool time per engine step is
//! `extend_overhead + batches * ann_batch_time`. The three architectures
//! differ only in retrieval path latency, the decode EP dispatch term and
//! decode contention with an active co-located vector GPU.
//!
//! Time is in milliseconds throughout.

mod events;
mod model;

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use events::{Event, EventKind, EventQueue};
pub use model::{
    ann_batch_time, decode_token_duration, prefill_duration, retrieval_path_latency, Architecture,
    LatencyModel, PathLatency,
};

use crate::ann_graph::{build_knn_graph, NeighborGraph, VectorStore};
use crate::engine::{Admission, Engine, EngineConfig, RequestStage};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::roofline::{Stage, StageRooflineParams};
use crate::scheduler::{ControlAction, FeedbackSample, QueueEntry, Scheduler, SchedulerConfig};
use crate::workload::{gen_trace, gen_vectors, Trace, WorkloadSpec};

/// Serving-side constants that are not part of the latency model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub layers: u32,
    pub prefill_flops_per_token: f64,
    pub decode_bytes_per_token: f64,
    pub kv_bytes_per_token: f64,
    /// Concurrent prefills per prefill server.
    pub prefill_slots: usize,
    /// Concurrent decoding requests.
    pub decode_slots: usize,
    /// FLOPs of one fixed-shape distance batch at production scale.
    pub ann_batch_flops: f64,
    /// Fixed cost of one engine step.
    pub extend_overhead: f64,
    /// Results per retrieval.
    pub k: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            layers: 32,
            prefill_flops_per_token: 2.0e9,
            decode_bytes_per_token: 1.2e10,
            kv_bytes_per_token: 1.0e5,
            prefill_slots: 8,
            decode_slots: 256,
            ann_batch_flops: 1.2e8,
            extend_overhead: 0.02,
            k: 10,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::config(format!("sim.{key}"), msg));
        for (key, v) in [
            ("prefill_flops_per_token", self.prefill_flops_per_token),
            ("decode_bytes_per_token", self.decode_bytes_per_token),
            ("kv_bytes_per_token", self.kv_bytes_per_token),
            ("ann_batch_flops", self.ann_batch_flops),
            ("extend_overhead", self.extend_overhead),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(key, "must be finite and > 0");
            }
        }
        if self.prefill_slots == 0 {
            return bad("prefill_slots", "must be >= 1");
        }
        if self.decode_slots == 0 {
            return bad("decode_slots", "must be >= 1");
        }
        if self.k == 0 {
            return bad("k", "must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageRooflines {
    pub prefill: StageRooflineParams<f64>,
    pub decode: StageRooflineParams<f64>,
    pub ann: StageRooflineParams<f64>,
}

impl Default for StageRooflines {
    fn default() -> Self {
        Self {
            prefill: StageRooflineParams::preset(Stage::Prefill),
            decode: StageRooflineParams::preset(Stage::Decode),
            ann: StageRooflineParams::preset(Stage::Ann),
        }
    }
}

/// Every knob of a simulation run except the architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct SimSetup {
    pub latency: LatencyModel,
    pub scheduler: SchedulerConfig,
    pub engine: EngineConfig,
    pub sim: SimConfig,
    pub roofline: StageRooflines,
}

impl Default for SimSetup {
    fn default() -> Self {
        Self {
            latency: LatencyModel::default(),
            scheduler: SchedulerConfig::default(),
            engine: EngineConfig::default(),
            sim: SimConfig::default(),
            roofline: StageRooflines::default(),
        }
    }
}

impl SimSetup {
    pub fn validate(&self) -> Result<()> {
        self.latency.validate()?;
        self.scheduler.validate()?;
        self.engine.validate()?;
        self.sim.validate()?;
        if self.sim.k > self.engine.m {
            return Err(Error::config("sim.k", "must not exceed engine.m"));
        }
        Ok(())
    }
}

/// Store, graph and trace shared by every architecture of one run.
#[derive(Debug, Clone)]
pub struct World {
    pub store: Arc<VectorStore<f32>>,
    pub graph: Arc<NeighborGraph>,
    pub trace: Trace,
}

impl World {
    /// Database from the seed's database stream, trace from the same seed.
    pub fn generate(workload: &WorkloadSpec, degree: usize, seed: u64) -> Result<Self> {
        let spec = WorkloadSpec {
            seed,
            ..workload.clone()
        };
        spec.validate()?;
        let store = gen_vectors(spec.n_db, spec.dim, seed);
        let graph = build_knn_graph(&store, degree)?;
        let trace = gen_trace(&spec)?;
        Ok(Self {
            store: Arc::new(store),
            graph: Arc::new(graph),
            trace,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RequestMetrics {
    pub id: u64,
    pub t_arrival: f64,
    pub ttft: f64,
    pub tokens: u32,
    pub probes: u32,
    pub stall_time: f64,
    pub completion: f64,
    pub per_token_times: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimMetrics {
    pub architecture: Architecture,
    pub requests: usize,
    pub retrievals: usize,
    pub ttft_p50: f64,
    pub ttft_p95: f64,
    pub ttft_mean: f64,
    pub tpt_mean: f64,
    pub decode_stall_fraction: f64,
    pub u_kv: f64,
    pub retrieval_prefill_p50: f64,
    pub retrieval_prefill_p95: f64,
    pub retrieval_decode_p50: f64,
    pub retrieval_decode_p95: f64,
    pub pool_busy_fraction: f64,
    pub makespan: f64,
    pub pool_steps: u64,
    pub launches: usize,
    pub mean_extends: f64,
    pub final_r: f64,
    pub final_tau_pre: f64,
    pub t_ext: f64,
    /// Some resource was busy nearly the whole run: the offered load is at
    /// or beyond what the configuration can serve.
    pub saturated: bool,
    #[serde(skip)]
    pub per_request: Vec<RequestMetrics>,
}

impl SimMetrics {
    /// Named aggregates, in `summary.csv` column order.
    pub fn aggregates(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("ttft_p50", self.ttft_p50),
            ("ttft_p95", self.ttft_p95),
            ("ttft_mean", self.ttft_mean),
            ("tpt_mean", self.tpt_mean),
            ("decode_stall_fraction", self.decode_stall_fraction),
            ("u_kv", self.u_kv),
            ("retrieval_prefill_p50", self.retrieval_prefill_p50),
            ("retrieval_prefill_p95", self.retrieval_prefill_p95),
            ("retrieval_decode_p50", self.retrieval_decode_p50),
            ("retrieval_decode_p95", self.retrieval_decode_p95),
            ("pool_busy_fraction", self.pool_busy_fraction),
            ("makespan", self.makespan),
            ("mean_extends", self.mean_extends),
            ("final_r", self.final_r),
            ("final_tau_pre", self.final_tau_pre),
            ("t_ext", self.t_ext),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRecord {
    pub t: f64,
    pub seq: u64,
    pub kind: EventKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub request: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub info: Option<serde_json::Value>,
}

#[derive(Debug, Clone)]
pub struct SimRun {
    pub metrics: SimMetrics,
    pub trace: Vec<TraceRecord>,
}

/// Nearest-rank percentile of an unsorted sample; 0 for an empty one.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Ev {
    Arrival(usize),
    Dispatch(usize),
    Complete(usize),
    StepDone,
    Launch,
    PrefillDone(usize),
    KvDone(usize),
    TokenDone(usize),
    Tick,
}

#[derive(Debug, Clone)]
struct Retrieval {
    req: usize,
    stage: RequestStage,
    query: u32,
    t_issue: f64,
    t_enqueue: f64,
}

#[derive(Debug, Clone, Default)]
struct ReqState {
    next_probe: u32,
    token_start: f64,
    ttft: f64,
    stall: f64,
    per_token: Vec<f64>,
    completion: Option<f64>,
}

#[derive(Debug, Default)]
struct Window {
    prefill_waits: Vec<f64>,
    stall: f64,
    token_time: f64,
}

struct Sim<'a> {
    arch: Architecture,
    setup: &'a SimSetup,
    trace: &'a Trace,
    q: EventQueue<Ev>,
    log: Vec<TraceRecord>,
    reqs: Vec<ReqState>,
    retrievals: Vec<Retrieval>,
    retrieval_lat: [Vec<f64>; 2],
    extends: Vec<u32>,

    engine: Engine<f32>,
    sched: Scheduler<usize>,
    pool_busy: bool,
    pool_busy_time: f64,
    pool_steps: u64,
    pending_launch: Option<f64>,
    step_started: f64,

    prefill_running: usize,
    prefill_queue: VecDeque<usize>,
    decode_resident: usize,
    decode_queue: VecDeque<usize>,
    kv_free_at: f64,
    kv_intervals: Vec<(f64, f64)>,
    kv_busy_total: f64,

    window: Window,
    window_start: f64,
    finished: usize,
    cur_seq: u64,
}

fn stage_index(stage: RequestStage) -> usize {
    match stage {
        RequestStage::Prefill => 0,
        RequestStage::Decode => 1,
    }
}

impl<'a> Sim<'a> {
    fn record(&mut self, t: f64, kind: EventKind, request: Option<u64>, info: Option<serde_json::Value>) {
        self.log.push(TraceRecord {
            t,
            seq: self.cur_seq,
            kind,
            request,
            info,
        });
    }

    fn request_id(&self, idx: usize) -> u64 {
        self.trace.requests[idx].id
    }

    fn issue_retrieval(&mut self, t: f64, req: usize, stage: RequestStage, probe: u32) {
        let rid = self.retrievals.len();
        self.retrievals.push(Retrieval {
            req,
            stage,
            query: self.trace.requests[req].query_ids[probe as usize],
            t_issue: t,
            t_enqueue: f64::NAN,
        });
        let path = retrieval_path_latency(self.arch, stage, &self.setup.latency);
        self.q.schedule(t + path.dispatch, EventKind::RetrievalDispatch, Ev::Dispatch(rid));
    }

    fn kick_pool(&mut self, t: f64) -> Result<()> {
        if self.pool_busy {
            return Ok(());
        }
        let slots = self.setup.scheduler.slots_n;
        if self.sched.should_launch(slots, t) {
            self.launch(t, slots)?;
            self.start_step(t)?;
        } else if let Some(d) = self.sched.next_flush_deadline() {
            let d = d.max(t);
            if self.pending_launch.is_none_or(|p| d < p) {
                self.pending_launch = Some(d);
                self.q.schedule(d, EventKind::BatchLaunch, Ev::Launch);
            }
        }
        Ok(())
    }

    fn launch(&mut self, t: f64, free: usize) -> Result<()> {
        let plan = self.sched.launch(free, t);
        let rec = self.sched.log.last().expect("launch logs a decision").clone();
        self.record(t, EventKind::BatchLaunch, None, Some(serde_json::to_value(&rec).expect("serializable")));
        for entry in plan.picked_prefill.iter().chain(&plan.picked_decode) {
            let rid = entry.payload;
            let r = &self.retrievals[rid];
            if r.stage == RequestStage::Prefill {
                self.window.prefill_waits.push(t - r.t_enqueue);
            }
            self.engine.submit(Admission {
                request_id: rid as u64,
                query: self.trace.queries.row(r.query).to_vec(),
                stage: r.stage,
                t_arrival: entry.t_arrival,
                deadline: entry.deadline,
                k: self.setup.sim.k,
            })?;
        }
        Ok(())
    }

    fn start_step(&mut self, t: f64) -> Result<()> {
        let report = self.engine.step()?;
        let occupancy = self.engine.active_count() + report.requests_retired;
        let batch = ann_batch_time(&self.setup.roofline.ann, self.setup.sim.ann_batch_flops, occupancy);
        let dur = self.setup.sim.extend_overhead + report.batches_launched as f64 * batch;
        self.pool_busy = true;
        self.step_started = t;
        self.pool_steps += 1;
        self.q.schedule(t + dur, EventKind::PoolStepDone, Ev::StepDone);
        Ok(())
    }

    fn step_done(&mut self, t: f64) -> Result<()> {
        let dur = t - self.step_started;
        self.pool_busy = false;
        self.pool_busy_time += dur;
        self.sched.record_extend_latency(dur)?;
        let done = self.engine.take_completed();
        self.record(
            t,
            EventKind::PoolStepDone,
            None,
            Some(json!({"retired": done.len(), "active": self.engine.active_count()})),
        );
        for c in done {
            let rid = c.request_id as usize;
            self.extends.push(c.extends);
            let path = retrieval_path_latency(self.arch, self.retrievals[rid].stage, &self.setup.latency);
            self.q.schedule(t + path.ret, EventKind::RetrievalComplete, Ev::Complete(rid));
        }
        if self.engine.active_count() > 0 {
            // running batch: waiting entries join at the step boundary
            let free = self.setup.scheduler.slots_n.saturating_sub(self.engine.active_count());
            if free > 0 && self.sched.waiting() > 0 {
                self.launch(t, free)?;
            }
            self.start_step(t)
        } else {
            self.kick_pool(t)
        }
    }

    fn start_prefills(&mut self, t: f64) -> Result<()> {
        while self.prefill_running < self.setup.sim.prefill_slots {
            let Some(req) = self.prefill_queue.pop_front() else { break };
            self.prefill_running += 1;
            let s = &self.setup.sim;
            let dur = prefill_duration(
                self.trace.requests[req].prompt_len,
                self.prefill_running,
                &self.setup.roofline.prefill,
                s.prefill_flops_per_token,
                s.layers,
                self.setup.latency.tp_collective_per_layer,
            )?;
            self.q.schedule(t + dur, EventKind::PrefillDone, Ev::PrefillDone(req));
        }
        Ok(())
    }

    fn start_decodes(&mut self, t: f64) {
        while self.decode_resident < self.setup.sim.decode_slots {
            let Some(req) = self.decode_queue.pop_front() else { break };
            self.decode_resident += 1;
            self.begin_token(t, req);
        }
    }

    fn begin_token(&mut self, t: f64, req: usize) {
        let r = &self.trace.requests[req];
        let st = &mut self.reqs[req];
        st.token_start = t;
        let index = st.per_token.len() as u32 + 1;
        let probe = st.next_probe;
        if probe <= r.probe_count() && index == probe * r.delta {
            st.next_probe += 1;
            self.issue_retrieval(t, req, RequestStage::Decode, probe);
        } else {
            self.compute_token(t, req);
        }
    }

    fn compute_token(&mut self, t: f64, req: usize) {
        let lm = &self.setup.latency;
        let dur = decode_token_duration(
            self.decode_resident,
            &self.setup.roofline.decode,
            self.setup.sim.decode_bytes_per_token,
            self.arch,
            self.pool_busy,
            lm,
        );
        if self.arch == Architecture::Coupled && self.pool_busy {
            let excess = dur - dur / lm.contention_factor;
            self.reqs[req].stall += excess;
            self.window.stall += excess;
        }
        self.q.schedule(t + dur, EventKind::TokenDone, Ev::TokenDone(req));
    }

    fn control_tick(&mut self, t: f64) -> Result<()> {
        let interval = t - self.window_start;
        let busy: f64 = self
            .kv_intervals
            .iter()
            .map(|&(a, b)| (b.min(t) - a.max(self.window_start)).max(0.0))
            .sum();
        let u_kv = if interval > 0.0 { (busy / interval).clamp(0.0, 1.0) } else { 0.0 };
        let stall = if self.window.token_time > 0.0 {
            (self.window.stall / self.window.token_time).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let sample = FeedbackSample {
            window_end: t,
            u_kv,
            prefill_wait_p95: percentile(&self.window.prefill_waits, 0.95),
            decode_stall_fraction: stall,
        };
        let action = self.sched.control_update(&sample)?;
        self.record(
            t,
            EventKind::ControlTick,
            None,
            Some(json!({
                "u_kv": sample.u_kv,
                "prefill_wait_p95": sample.prefill_wait_p95,
                "decode_stall_fraction": sample.decode_stall_fraction,
                "action": action,
                "r": self.sched.config.r,
                "tau_pre": self.sched.config.tau_pre,
            })),
        );
        self.kv_intervals.retain(|&(_, b)| b > t);
        self.window = Window::default();
        self.window_start = t;
        if action == ControlAction::BoostPrefill {
            // tau_pre shrank: a pending flush may now be due earlier
            self.kick_pool(t)?;
        }
        if self.finished < self.reqs.len() {
            let next = t + self.sched.config.control.interval;
            self.q.schedule(next, EventKind::ControlTick, Ev::Tick);
        }
        Ok(())
    }

    fn handle(&mut self, ev: Event<Ev>) -> Result<()> {
        let t = ev.t;
        self.cur_seq = ev.seq;
        match ev.payload {
            Ev::Arrival(req) => {
                self.record(t, ev.kind, Some(self.request_id(req)), None);
                self.issue_retrieval(t, req, RequestStage::Prefill, 0);
            }
            Ev::Dispatch(rid) => {
                let r = &mut self.retrievals[rid];
                r.t_enqueue = t;
                let (req, stage) = (r.req, r.stage);
                let e0 = self.sched.config.e0;
                let entry = match stage {
                    RequestStage::Prefill => QueueEntry::prefill(rid as u64, t, self.sched.config.l_pre_max, e0, rid),
                    RequestStage::Decode => QueueEntry::decode(rid as u64, t, e0, rid),
                };
                self.sched.enqueue(entry)?;
                self.record(t, ev.kind, Some(self.request_id(req)), Some(json!({"stage": stage})));
                self.kick_pool(t)?;
            }
            Ev::Launch => {
                if self.pending_launch == Some(t) {
                    self.pending_launch = None;
                }
                self.kick_pool(t)?;
            }
            Ev::StepDone => self.step_done(t)?,
            Ev::Complete(rid) => {
                let r = &self.retrievals[rid];
                let (req, stage, wait) = (r.req, r.stage, t - r.t_issue);
                self.retrieval_lat[stage_index(stage)].push(wait);
                self.record(
                    t,
                    ev.kind,
                    Some(self.request_id(req)),
                    Some(json!({"stage": stage, "latency": wait})),
                );
                match stage {
                    RequestStage::Prefill => {
                        self.prefill_queue.push_back(req);
                        self.start_prefills(t)?;
                    }
                    RequestStage::Decode => {
                        self.reqs[req].stall += wait;
                        self.window.stall += wait;
                        self.compute_token(t, req);
                    }
                }
            }
            Ev::PrefillDone(req) => {
                self.prefill_running -= 1;
                let r = &self.trace.requests[req];
                self.reqs[req].ttft = t - r.t_arrival;
                let bytes = f64::from(r.prompt_len) * self.setup.sim.kv_bytes_per_token;
                let start = self.kv_free_at.max(t);
                let end = start + self.setup.latency.kv_transfer_time(bytes);
                self.kv_free_at = end;
                self.kv_intervals.push((start, end));
                self.kv_busy_total += end - start;
                self.q.schedule(end, EventKind::KvTransferDone, Ev::KvDone(req));
                self.record(t, ev.kind, Some(r.id), None);
                self.start_prefills(t)?;
            }
            Ev::KvDone(req) => {
                self.record(t, ev.kind, Some(self.request_id(req)), None);
                self.decode_queue.push_back(req);
                self.start_decodes(t);
            }
            Ev::TokenDone(req) => {
                let st = &mut self.reqs[req];
                let dt = t - st.token_start;
                st.per_token.push(dt);
                self.window.token_time += dt;
                let done = st.per_token.len() as u32 == self.trace.requests[req].output_len;
                self.record(t, ev.kind, Some(self.request_id(req)), None);
                if done {
                    self.reqs[req].completion = Some(t);
                    self.finished += 1;
                    self.decode_resident -= 1;
                    self.start_decodes(t);
                } else {
                    self.begin_token(t, req);
                }
            }
            Ev::Tick => self.control_tick(t)?,
        }
        Ok(())
    }
}

/// Runs one architecture over `world` to completion.
pub fn simulate(world: &World, arch: Architecture, setup: &SimSetup) -> Result<SimRun> {
    setup.validate()?;
    let trace = &world.trace;
    if trace.requests.is_empty() {
        return Err(Error::input("workload has no requests"));
    }
    if trace.queries.dim() != world.store.dim() {
        return Err(Error::input(format!(
            "query dim {} does not match store dim {}",
            trace.queries.dim(),
            world.store.dim()
        )));
    }
    let mut sim = Sim {
        arch,
        setup,
        trace,
        q: EventQueue::new(),
        log: Vec::new(),
        reqs: vec![
            ReqState {
                next_probe: 1,
                ..ReqState::default()
            };
            trace.requests.len()
        ],
        retrievals: Vec::new(),
        retrieval_lat: [Vec::new(), Vec::new()],
        extends: Vec::new(),
        engine: Engine::new(Arc::clone(&world.store), Arc::clone(&world.graph), setup.engine.clone())?,
        sched: Scheduler::new(setup.scheduler.clone())?,
        pool_busy: false,
        pool_busy_time: 0.0,
        pool_steps: 0,
        pending_launch: None,
        step_started: 0.0,
        prefill_running: 0,
        prefill_queue: VecDeque::new(),
        decode_resident: 0,
        decode_queue: VecDeque::new(),
        kv_free_at: 0.0,
        kv_intervals: Vec::new(),
        kv_busy_total: 0.0,
        window: Window::default(),
        window_start: 0.0,
        finished: 0,
        cur_seq: 0,
    };
    for (i, r) in trace.requests.iter().enumerate() {
        sim.q.schedule(r.t_arrival, EventKind::Arrival, Ev::Arrival(i));
    }
    sim.q
        .schedule(setup.scheduler.control.interval, EventKind::ControlTick, Ev::Tick);
    while let Some(ev) = sim.q.pop() {
        sim.handle(ev)?;
    }
    if sim.finished != trace.requests.len() {
        return Err(Error::internal(format!(
            "{} of {} requests finished",
            sim.finished,
            trace.requests.len()
        )));
    }
    Ok(sim.finish())
}

impl Sim<'_> {
    fn finish(self) -> SimRun {
        let per_request: Vec<RequestMetrics> = self
            .trace
            .requests
            .iter()
            .zip(self.reqs)
            .map(|(r, st)| RequestMetrics {
                id: r.id,
                t_arrival: r.t_arrival,
                ttft: st.ttft,
                tokens: r.output_len,
                probes: r.probe_count(),
                stall_time: st.stall,
                completion: st.completion.expect("all requests finished"),
                per_token_times: st.per_token,
            })
            .collect();
        let ttfts: Vec<f64> = per_request.iter().map(|m| m.ttft).collect();
        let decode_time: f64 = per_request.iter().flat_map(|m| &m.per_token_times).sum();
        let tokens: u64 = per_request.iter().map(|m| u64::from(m.tokens)).sum();
        let stall: f64 = per_request.iter().map(|m| m.stall_time).sum();
        let makespan = per_request.iter().map(|m| m.completion).fold(0.0, f64::max);
        let pool_busy_fraction = self.pool_busy_time / makespan;
        let u_kv = (self.kv_busy_total / makespan).min(1.0);
        let [pre_lat, dec_lat] = &self.retrieval_lat;
        let metrics = SimMetrics {
            architecture: self.arch,
            requests: per_request.len(),
            retrievals: self.retrievals.len(),
            ttft_p50: percentile(&ttfts, 0.5),
            ttft_p95: percentile(&ttfts, 0.95),
            ttft_mean: ttfts.iter().sum::<f64>() / ttfts.len() as f64,
            tpt_mean: decode_time / tokens as f64,
            decode_stall_fraction: if decode_time > 0.0 { (stall / decode_time).min(1.0) } else { 0.0 },
            u_kv,
            retrieval_prefill_p50: percentile(pre_lat, 0.5),
            retrieval_prefill_p95: percentile(pre_lat, 0.95),
            retrieval_decode_p50: percentile(dec_lat, 0.5),
            retrieval_decode_p95: percentile(dec_lat, 0.95),
            pool_busy_fraction,
            makespan,
            pool_steps: self.pool_steps,
            launches: self.sched.log.len(),
            mean_extends: self.extends.iter().map(|&e| f64::from(e)).sum::<f64>() / self.extends.len().max(1) as f64,
            final_r: self.sched.config.r,
            final_tau_pre: self.sched.config.tau_pre,
            t_ext: self.sched.t_ext.current(),
            saturated: pool_busy_fraction > 0.98 || u_kv > 0.98,
            per_request,
        };
        SimRun {
            metrics,
            trace: self.log,
        }
    }
}

/// Simulates all three architectures on the same world; rows come back in
/// [`Architecture::ALL`] order. Runs are independent and execute in parallel.
pub fn compare_architectures(world: &World, setup: &SimSetup) -> Result<Vec<SimRun>> {
    Architecture::ALL
        .par_iter()
        .map(|&arch| simulate(world, arch, setup))
        .collect()
}

pub fn metrics_json(metrics: &SimMetrics) -> String {
    let mut s = serde_json::to_string_pretty(metrics).expect("metrics serialize");
    s.push('\n');
    s
}

pub fn trace_jsonl(records: &[TraceRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("trace record serializes"));
        out.push('\n');
    }
    out
}

pub fn requests_csv(metrics: &SimMetrics) -> String {
    let mut out = String::from("id,t_arrival,ttft,tokens,probes,stall_time,completion,tpt_mean\n");
    for m in &metrics.per_request {
        let tpt = m.per_token_times.iter().sum::<f64>() / f64::from(m.tokens);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            m.id, m.t_arrival, m.ttft, m.tokens, m.probes, m.stall_time, m.completion, tpt
        );
    }
    out
}

pub fn summary_csv(rows: &[&SimMetrics]) -> String {
    let mut out = String::from("architecture,requests,retrievals");
    if let Some(first) = rows.first() {
        for (name, _) in first.aggregates() {
            out.push(',');
            out.push_str(name);
        }
    }
    out.push_str(",saturated\n");
    for m in rows {
        let _ = write!(out, "{},{},{}", m.architecture, m.requests, m.retrievals);
        for (_, v) in m.aggregates() {
            let _ = write!(out, ",{v}");
        }
        let _ = writeln!(out, ",{}", m.saturated);
    }
    out
}

/// Writes `resolved_config`, `metrics.json`, `trace.jsonl`, `requests.csv`
/// and `summary.csv` for one run.
pub fn write_sim_artifacts(dir: &Path, run: &SimRun, resolved_config: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(dir.join("resolved_config"), resolved_config.as_bytes())?;
    write_atomic(dir.join("metrics.json"), metrics_json(&run.metrics).as_bytes())?;
    write_atomic(dir.join("trace.jsonl"), trace_jsonl(&run.trace).as_bytes())?;
    write_atomic(dir.join("requests.csv"), requests_csv(&run.metrics).as_bytes())?;
    write_atomic(dir.join("summary.csv"), summary_csv(&[&run.metrics]).as_bytes())
}

/// Top-level `summary.csv` with one row per architecture, a combined
/// `metrics.json`, and a full per-run artifact set under `<dir>/<arch>/`.
pub fn write_compare_artifacts(dir: &Path, runs: &[SimRun], resolved_config: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(dir.join("resolved_config"), resolved_config.as_bytes())?;
    let rows: Vec<&SimMetrics> = runs.iter().map(|r| &r.metrics).collect();
    write_atomic(dir.join("summary.csv"), summary_csv(&rows).as_bytes())?;
    let mut combined = serde_json::to_string_pretty(&rows).expect("metrics serialize");
    combined.push('\n');
    write_atomic(dir.join("metrics.json"), combined.as_bytes())?;
    let mut requests = String::new();
    let mut trace = String::new();
    for run in runs {
        let arch = run.metrics.architecture;
        write_sim_artifacts(&dir.join(arch.as_str()), run, resolved_config)?;
        for (i, line) in requests_csv(&run.metrics).lines().enumerate() {
            if i == 0 {
                if requests.is_empty() {
                    let _ = writeln!(requests, "architecture,{line}");
                }
            } else {
                let _ = writeln!(requests, "{arch},{line}");
            }
        }
        for r in &run.trace {
            let mut v = serde_json::to_value(r).expect("trace record serializes");
            v["arch"] = json!(arch);
            trace.push_str(&v.to_string());
            trace.push('\n');
        }
    }
    write_atomic(dir.join("requests.csv"), requests.as_bytes())?;
    write_atomic(dir.join("trace.jsonl"), trace.as_bytes())
}
