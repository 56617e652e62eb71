//! Two-queue retrieval scheduler for the shared vector pool.
//!
//! Prefill retrievals wait in an EDF queue ranked by slack
//! `deadline - (now + est_remaining_extends * t_ext)`; decode probes wait in
//! a FIFO queue. Each launch fills `N` slots: at least `ceil(r * N)` go to
//! prefill when it has that many entries, decode takes the rest, any share a
//! queue cannot use is handed to the other, and leftover slots are padded.
//! A periodic control loop moves `r` and the prefill flush timeout from
//! KV-link utilization and decode stall feedback.

use std::cmp::Ordering;
use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::engine::{RequestId, RequestStage};
use crate::error::{Error, Result};

/// Float slack below which reservation and clamping treat values as equal.
const EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct QueueEntry<P = ()> {
    pub request_id: RequestId,
    pub stage: RequestStage,
    pub t_arrival: f64,
    /// `t_arrival + l_pre_max` for prefill, `None` for decode.
    pub deadline: Option<f64>,
    pub est_remaining_extends: f64,
    pub payload: P,
}

impl<P> QueueEntry<P> {
    pub fn prefill(request_id: RequestId, t_arrival: f64, l_pre_max: f64, e_hat: f64, payload: P) -> Self {
        Self {
            request_id,
            stage: RequestStage::Prefill,
            t_arrival,
            deadline: Some(t_arrival + l_pre_max),
            est_remaining_extends: e_hat,
            payload,
        }
    }

    pub fn decode(request_id: RequestId, t_arrival: f64, e_hat: f64, payload: P) -> Self {
        Self {
            request_id,
            stage: RequestStage::Decode,
            t_arrival,
            deadline: None,
            est_remaining_extends: e_hat,
            payload,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlGains {
    pub interval: f64,
    pub delta_r: f64,
    pub beta_tau: f64,
    pub tau_pre_min: f64,
    pub u_kv_target: f64,
    pub u_kv_margin: f64,
    pub stall_target: f64,
}

impl Default for ControlGains {
    fn default() -> Self {
        Self {
            interval: 200.0,
            delta_r: 0.05,
            beta_tau: 0.8,
            tau_pre_min: 0.25,
            u_kv_target: 0.9,
            u_kv_margin: 0.05,
            stall_target: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerConfig {
    pub slots_n: usize,
    pub r: f64,
    pub r_min: f64,
    pub r_max: f64,
    pub tau_pre: f64,
    pub tau_global: f64,
    /// Prefill retrieval latency budget; sets each prefill deadline.
    pub l_pre_max: f64,
    /// Prior on the number of extends a search needs.
    pub e0: f64,
    /// EMA smoothing factor for the per-extend latency estimate.
    pub gamma: f64,
    pub control: ControlGains,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            slots_n: 64,
            r: 0.25,
            r_min: 0.05,
            r_max: 0.75,
            tau_pre: 2.0,
            tau_global: 10.0,
            l_pre_max: 20.0,
            e0: 12.0,
            gamma: 0.9,
            control: ControlGains::default(),
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::config(format!("scheduler.{key}"), msg));
        if self.slots_n == 0 {
            return bad("slots_n", "must be >= 1");
        }
        if !(0.0 <= self.r_min && self.r_min <= self.r && self.r <= self.r_max && self.r_max <= 1.0) {
            return bad("r", "must satisfy 0 <= r_min <= r <= r_max <= 1");
        }
        if !(self.tau_pre > 0.0) {
            return bad("tau_pre", "must be > 0");
        }
        if !(self.tau_global > 0.0 && self.tau_pre <= self.tau_global) {
            return bad("tau_global", "must be > 0 and >= tau_pre");
        }
        if !(self.l_pre_max >= 0.0) {
            return bad("l_pre_max", "must be >= 0");
        }
        if !(self.e0 >= 0.0) {
            return bad("e0", "must be >= 0");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma", "must be in (0, 1)");
        }
        let c = &self.control;
        let bad = |key: &str, msg: &str| Err(Error::config(format!("scheduler.control.{key}"), msg));
        for (key, v) in [
            ("interval", c.interval),
            ("delta_r", c.delta_r),
            ("tau_pre_min", c.tau_pre_min),
            ("u_kv_margin", c.u_kv_margin),
            ("stall_target", c.stall_target),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(key, "must be > 0");
            }
        }
        if !(c.beta_tau > 0.0 && c.beta_tau < 1.0) {
            return bad("beta_tau", "must be in (0, 1)");
        }
        if !(c.u_kv_target > 0.0 && c.u_kv_target <= 1.0) {
            return bad("u_kv_target", "must be in (0, 1]");
        }
        if c.tau_pre_min > self.tau_pre {
            return bad("tau_pre_min", "must not exceed scheduler.tau_pre");
        }
        Ok(())
    }

    /// `ceil(r * N)` slots guaranteed to prefill.
    pub fn reservation(&self, slots: usize) -> usize {
        (((self.r * slots as f64) - EPS).ceil().max(0.0) as usize).min(slots)
    }
}

/// Signed slack `deadline - (t_now + e_hat * t_ext)`; negative means late.
pub fn slack<P>(entry: &QueueEntry<P>, t_now: f64, t_ext: f64) -> Result<f64> {
    match (entry.stage, entry.deadline) {
        (RequestStage::Prefill, Some(ddl)) => Ok(ddl - (t_now + entry.est_remaining_extends * t_ext)),
        (RequestStage::Prefill, None) => Err(Error::Misuse(format!(
            "prefill entry {} has no deadline",
            entry.request_id
        ))),
        (RequestStage::Decode, _) => Err(Error::Misuse(format!(
            "slack is undefined for decode entry {}",
            entry.request_id
        ))),
    }
}

fn slack_or_inf<P>(entry: &QueueEntry<P>, t_now: f64, t_ext: f64) -> f64 {
    slack(entry, t_now, t_ext).unwrap_or(f64::INFINITY)
}

fn edf_cmp<P>(a: &QueueEntry<P>, b: &QueueEntry<P>, t_now: f64, t_ext: f64) -> Ordering {
    slack_or_inf(a, t_now, t_ext)
        .total_cmp(&slack_or_inf(b, t_now, t_ext))
        .then(a.t_arrival.total_cmp(&b.t_arrival))
        .then(a.request_id.cmp(&b.request_id))
}

/// Prefill queue; ordering is computed at pop time since slack depends on
/// the current clock and extend-latency estimate.
#[derive(Debug, Clone)]
pub struct PrefillQueue<P = ()> {
    entries: Vec<QueueEntry<P>>,
}

impl<P> Default for PrefillQueue<P> {
    fn default() -> Self {
        Self { entries: Vec::new() }
    }
}

impl<P> PrefillQueue<P> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: QueueEntry<P>) -> Result<()> {
        if entry.stage != RequestStage::Prefill || entry.deadline.is_none() {
            return Err(Error::Misuse(format!(
                "entry {} is not a prefill entry with a deadline",
                entry.request_id
            )));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &QueueEntry<P>> {
        self.entries.iter()
    }

    pub fn oldest_arrival(&self) -> Option<f64> {
        self.entries.iter().map(|e| e.t_arrival).min_by(f64::total_cmp)
    }
}

/// FIFO decode queue kept in `(t_arrival, request_id)` order.
#[derive(Debug, Clone)]
pub struct DecodeQueue<P = ()> {
    entries: VecDeque<QueueEntry<P>>,
}

impl<P> Default for DecodeQueue<P> {
    fn default() -> Self {
        Self {
            entries: VecDeque::new(),
        }
    }
}

impl<P> DecodeQueue<P> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: QueueEntry<P>) -> Result<()> {
        if entry.stage != RequestStage::Decode {
            return Err(Error::Misuse(format!(
                "entry {} is not a decode entry",
                entry.request_id
            )));
        }
        let key = (entry.t_arrival, entry.request_id);
        let pos = self.entries.partition_point(|e| {
            e.t_arrival.total_cmp(&key.0).then(e.request_id.cmp(&key.1)) != Ordering::Greater
        });
        self.entries.insert(pos, entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &QueueEntry<P>> {
        self.entries.iter()
    }

    pub fn oldest_arrival(&self) -> Option<f64> {
        self.entries.front().map(|e| e.t_arrival)
    }
}

/// Removes up to `count` entries in ascending slack order (ties: earlier
/// arrival, then smaller request id).
pub fn pop_prefill<P>(queue: &mut PrefillQueue<P>, count: usize, t_now: f64, t_ext: f64) -> Vec<QueueEntry<P>> {
    if count == 0 || queue.entries.is_empty() {
        return Vec::new();
    }
    queue.entries.sort_by(|a, b| edf_cmp(a, b, t_now, t_ext));
    let take = count.min(queue.entries.len());
    queue.entries.drain(..take).collect()
}

/// Removes up to `count` entries in arrival order.
pub fn pop_decode<P>(queue: &mut DecodeQueue<P>, count: usize) -> Vec<QueueEntry<P>> {
    let take = count.min(queue.entries.len());
    queue.entries.drain(..take).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan<P = ()> {
    pub picked_prefill: Vec<QueueEntry<P>>,
    pub picked_decode: Vec<QueueEntry<P>>,
    pub pad_count: usize,
    pub n_pre: usize,
    pub n_dec: usize,
}

impl<P> BatchPlan<P> {
    pub fn slots(&self) -> usize {
        self.n_pre + self.n_dec + self.pad_count
    }
}

/// Slot split `(n_pre, n_dec, pad)` for the given queue depths.
pub fn plan_counts(pre_len: usize, dec_len: usize, slots: usize, reservation: usize) -> (usize, usize, usize) {
    let reserved = pre_len.min(reservation);
    let n_dec = dec_len.min(slots - reserved);
    let n_pre = reserved + (pre_len - reserved).min(slots - reserved - n_dec);
    (n_pre, n_dec, slots - n_pre - n_dec)
}

/// Builds a plan for `config.slots_n` slots.
pub fn build_batch<P>(
    q_pre: &mut PrefillQueue<P>,
    q_dec: &mut DecodeQueue<P>,
    config: &SchedulerConfig,
    t_now: f64,
    t_ext: f64,
) -> BatchPlan<P> {
    build_batch_with_slots(q_pre, q_dec, config, config.slots_n, t_now, t_ext)
}

/// Builds a plan for an explicit slot count, e.g. the free slots of a
/// running engine.
pub fn build_batch_with_slots<P>(
    q_pre: &mut PrefillQueue<P>,
    q_dec: &mut DecodeQueue<P>,
    config: &SchedulerConfig,
    slots: usize,
    t_now: f64,
    t_ext: f64,
) -> BatchPlan<P> {
    let (n_pre, n_dec, pad_count) = plan_counts(q_pre.len(), q_dec.len(), slots, config.reservation(slots));
    BatchPlan {
        picked_prefill: pop_prefill(q_pre, n_pre, t_now, t_ext),
        picked_decode: pop_decode(q_dec, n_dec),
        pad_count,
        n_pre,
        n_dec,
    }
}

/// Launch when `config.slots_n` entries are waiting, the oldest prefill
/// entry has waited `tau_pre`, or any entry has waited `tau_global`.
pub fn should_launch<P>(
    q_pre: &PrefillQueue<P>,
    q_dec: &DecodeQueue<P>,
    config: &SchedulerConfig,
    t_now: f64,
) -> bool {
    should_launch_with_slots(q_pre, q_dec, config, config.slots_n, t_now)
}

pub fn should_launch_with_slots<P>(
    q_pre: &PrefillQueue<P>,
    q_dec: &DecodeQueue<P>,
    config: &SchedulerConfig,
    slots: usize,
    t_now: f64,
) -> bool {
    let waiting = q_pre.len() + q_dec.len();
    if waiting == 0 {
        return false;
    }
    if waiting >= slots {
        return true;
    }
    let pre_oldest = q_pre.oldest_arrival();
    if pre_oldest.is_some_and(|t| t_now - t >= config.tau_pre - EPS) {
        return true;
    }
    let oldest = [pre_oldest, q_dec.oldest_arrival()]
        .into_iter()
        .flatten()
        .min_by(f64::total_cmp);
    oldest.is_some_and(|t| t_now - t >= config.tau_global - EPS)
}

/// Earliest time at which [`should_launch_with_slots`] can become true
/// through a timeout alone.
pub fn next_flush_deadline<P>(q_pre: &PrefillQueue<P>, q_dec: &DecodeQueue<P>, config: &SchedulerConfig) -> Option<f64> {
    let pre = q_pre.oldest_arrival().map(|t| t + config.tau_pre);
    let dec = q_dec.oldest_arrival().map(|t| t + config.tau_global);
    let pre_global = q_pre.oldest_arrival().map(|t| t + config.tau_global);
    [pre, dec, pre_global].into_iter().flatten().min_by(f64::total_cmp)
}

/// Exponential moving average of the observed per-extend latency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExtendLatency {
    pub gamma: f64,
    pub t_ext: Option<f64>,
}

impl ExtendLatency {
    pub fn new(gamma: f64) -> Self {
        Self { gamma, t_ext: None }
    }

    pub fn current(&self) -> f64 {
        self.t_ext.unwrap_or(0.0)
    }
}

/// `t_ext <- gamma * t_ext + (1 - gamma) * observed`; the first sample
/// initializes the estimate.
pub fn record_extend_latency(observed: f64, state: &mut ExtendLatency) -> Result<f64> {
    if !(observed > 0.0 && observed.is_finite()) {
        return Err(Error::ParamDomain {
            name: "observed",
            value: observed,
            expected: "finite and > 0",
        });
    }
    let next = match state.t_ext {
        None => observed,
        Some(prev) => state.gamma * prev + (1.0 - state.gamma) * observed,
    };
    state.t_ext = Some(next);
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FeedbackSample {
    pub window_end: f64,
    pub u_kv: f64,
    pub prefill_wait_p95: f64,
    pub decode_stall_fraction: f64,
}

impl FeedbackSample {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !in_unit(self.u_kv) {
            return Err(Error::input(format!("u_kv {} outside [0, 1]", self.u_kv)));
        }
        if !in_unit(self.decode_stall_fraction) {
            return Err(Error::input(format!(
                "decode_stall_fraction {} outside [0, 1]",
                self.decode_stall_fraction
            )));
        }
        if !(self.prefill_wait_p95 >= 0.0) {
            return Err(Error::input("prefill_wait_p95 must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlAction {
    /// KV link under target: more prefill share, shorter prefill timeout.
    BoostPrefill,
    /// Decode stalled on retrieval: give decode more slots.
    RelieveDecode,
    Hold,
}

/// One control-loop update of `config.r` and `config.tau_pre`. The KV-link
/// branch takes priority over the stall branch.
pub fn control_update(sample: &FeedbackSample, config: &mut SchedulerConfig) -> Result<ControlAction> {
    sample.validate()?;
    let c = config.control.clone();
    let action = if sample.u_kv < c.u_kv_target - c.u_kv_margin {
        let mut r = (config.r + c.delta_r).min(config.r_max);
        if config.r_max - r < EPS {
            r = config.r_max;
        }
        config.r = r;
        config.tau_pre = (c.beta_tau * config.tau_pre).max(c.tau_pre_min);
        ControlAction::BoostPrefill
    } else if sample.decode_stall_fraction > c.stall_target {
        let mut r = (config.r - c.delta_r).max(config.r_min);
        if r - config.r_min < EPS {
            r = config.r_min;
        }
        config.r = r;
        ControlAction::RelieveDecode
    } else {
        ControlAction::Hold
    };
    Ok(action)
}

/// Remaining extends: the prior `e0` for queued requests, `e0 - done`
/// (floored at 0) for requests already in flight.
pub fn estimate_remaining_extends(extends_done: Option<u32>, e0: f64) -> f64 {
    match extends_done {
        None => e0,
        Some(done) => (e0 - f64::from(done)).max(0.0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecisionRecord {
    pub t: f64,
    pub n_pre: usize,
    pub n_dec: usize,
    pub pad: usize,
    pub r: f64,
    pub tau_pre: f64,
}

/// Producer handle for concurrent enqueue; entries become visible to the
/// scheduler owner at its next [`Scheduler::sync_inbox`].
#[derive(Debug)]
pub struct EnqueueHandle<P> {
    inbox: Arc<Mutex<Vec<QueueEntry<P>>>>,
}

impl<P> Clone for EnqueueHandle<P> {
    fn clone(&self) -> Self {
        Self {
            inbox: Arc::clone(&self.inbox),
        }
    }
}

impl<P> EnqueueHandle<P> {
    pub fn push(&self, entry: QueueEntry<P>) -> Result<()> {
        if entry.stage == RequestStage::Prefill && entry.deadline.is_none() {
            return Err(Error::Misuse(format!(
                "prefill entry {} has no deadline",
                entry.request_id
            )));
        }
        self.inbox.lock().expect("scheduler inbox poisoned").push(entry);
        Ok(())
    }
}

/// Owner-side scheduler state: both queues, the live config (`r`,
/// `tau_pre`), the extend-latency estimate and the decision log.
#[derive(Debug)]
pub struct Scheduler<P = ()> {
    pub config: SchedulerConfig,
    pub q_pre: PrefillQueue<P>,
    pub q_dec: DecodeQueue<P>,
    pub t_ext: ExtendLatency,
    pub log: Vec<DecisionRecord>,
    inbox: Arc<Mutex<Vec<QueueEntry<P>>>>,
}

impl<P> Scheduler<P> {
    pub fn new(config: SchedulerConfig) -> Result<Self> {
        config.validate()?;
        let gamma = config.gamma;
        Ok(Self {
            config,
            q_pre: PrefillQueue::new(),
            q_dec: DecodeQueue::new(),
            t_ext: ExtendLatency::new(gamma),
            log: Vec::new(),
            inbox: Arc::new(Mutex::new(Vec::new())),
        })
    }

    pub fn enqueue_handle(&self) -> EnqueueHandle<P> {
        EnqueueHandle {
            inbox: Arc::clone(&self.inbox),
        }
    }

    pub fn enqueue(&mut self, entry: QueueEntry<P>) -> Result<()> {
        match entry.stage {
            RequestStage::Prefill => self.q_pre.push(entry),
            RequestStage::Decode => self.q_dec.push(entry),
        }
    }

    /// Moves entries pushed through [`EnqueueHandle`]s into the queues.
    pub fn sync_inbox(&mut self) -> Result<()> {
        let pending = std::mem::take(&mut *self.inbox.lock().expect("scheduler inbox poisoned"));
        pending.into_iter().try_for_each(|e| self.enqueue(e))
    }

    pub fn waiting(&self) -> usize {
        self.q_pre.len() + self.q_dec.len()
    }

    pub fn should_launch(&self, slots: usize, t_now: f64) -> bool {
        should_launch_with_slots(&self.q_pre, &self.q_dec, &self.config, slots, t_now)
    }

    pub fn next_flush_deadline(&self) -> Option<f64> {
        next_flush_deadline(&self.q_pre, &self.q_dec, &self.config)
    }

    /// Builds and logs a plan for `slots` free slots.
    pub fn launch(&mut self, slots: usize, t_now: f64) -> BatchPlan<P> {
        let t_ext = self.t_ext.current();
        let plan = build_batch_with_slots(&mut self.q_pre, &mut self.q_dec, &self.config, slots, t_now, t_ext);
        self.log.push(DecisionRecord {
            t: t_now,
            n_pre: plan.n_pre,
            n_dec: plan.n_dec,
            pad: plan.pad_count,
            r: self.config.r,
            tau_pre: self.config.tau_pre,
        });
        plan
    }

    pub fn record_extend_latency(&mut self, observed: f64) -> Result<f64> {
        record_extend_latency(observed, &mut self.t_ext)
    }

    pub fn control_update(&mut self, sample: &FeedbackSample) -> Result<ControlAction> {
        control_update(sample, &mut self.config)
    }
}
