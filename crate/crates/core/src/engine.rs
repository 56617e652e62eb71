//! Continuous-batching graph search.
//!
//! Every active request advances one *extend* per engine step: up to `p`
//! unexpanded parents are taken from its `top_m` list, their graph neighbors
//! are filtered through the request's visited set, and the surviving ids
//! become distance tasks in one cross-request task array. The array is cut
//! into fixed-capacity batches (the tail padded with masked dummies),
//! evaluated, and the results are scattered back and merged into each
//! request's `top_m`. Requests stop independently; the freed slots are
//! refilled from the admission queue at the start of the next step.
//!
//! A request's trajectory depends only on its own state, so a batched run
//! returns exactly what [`search_sequential`] returns for the same query.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::fmt;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::ann_graph::{cmp_dist_id, l2sq, Neighbor, NeighborGraph, VectorId, VectorStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub type RequestId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RequestStage {
    Prefill,
    Decode,
}

impl fmt::Display for RequestStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RequestStage::Prefill => "prefill",
            RequestStage::Decode => "decode",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    /// Internal candidate list size M.
    pub m: usize,
    /// Max unexpanded parents per extend.
    pub p: usize,
    /// Number of strided seed entry points E.
    pub entry_count: usize,
    /// Fixed task slots per distance batch C.
    pub batch_capacity: usize,
    /// Consecutive no-change extends before a request stops.
    pub stop_streak: u32,
    pub max_extends: u32,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            m: 64,
            p: 2,
            entry_count: 8,
            batch_capacity: 512,
            stop_streak: 1,
            max_extends: 256,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::config(format!("engine.{key}"), msg));
        if self.m == 0 {
            return bad("m", "must be >= 1");
        }
        if self.p == 0 || self.p > self.m {
            return bad("p", "must satisfy 1 <= p <= m");
        }
        if self.entry_count == 0 || self.entry_count > self.m {
            return bad("entry_count", "must satisfy 1 <= entry_count <= m");
        }
        if self.batch_capacity == 0 {
            return bad("batch_capacity", "must be >= 1");
        }
        if self.stop_streak == 0 {
            return bad("stop_streak", "must be >= 1");
        }
        if self.max_extends == 0 {
            return bad("max_extends", "must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateEntry<T> {
    pub id: VectorId,
    pub dist: T,
    pub expanded: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchStatus {
    Active,
    Converged,
    Finished,
}

#[derive(Debug, Clone)]
pub struct SearchRequestState<T> {
    pub request_id: RequestId,
    pub query: Vec<T>,
    /// Sorted ascending by `(dist, id)`, at most `m` entries.
    pub top_m: Vec<CandidateEntry<T>>,
    pub visited: HashSet<VectorId>,
    pub extends_done: u32,
    pub status: SearchStatus,
    pub stage: RequestStage,
    pub t_arrival: f64,
    pub deadline: Option<f64>,
    pub k: usize,
    pub no_change_streak: u32,
    /// Distances evaluated for this request, seeds included.
    pub distance_evals: u64,
    m: usize,
}

impl<T: Scalar> SearchRequestState<T> {
    pub fn capacity(&self) -> usize {
        self.m
    }

    /// Largest retained distance once the list is full, `None` before.
    pub fn worst_retained(&self) -> Option<T> {
        (self.top_m.len() == self.m).then(|| self.top_m.last().map(|e| e.dist))?
    }

    pub fn has_unexpanded(&self) -> bool {
        self.top_m.iter().any(|e| !e.expanded)
    }
}

/// Seeds a request with the strided entry points `floor(i * N / E)`.
pub fn seed_request<T: Scalar>(
    request_id: RequestId,
    query: Vec<T>,
    stage: RequestStage,
    t_arrival: f64,
    deadline: Option<f64>,
    k: usize,
    config: &EngineConfig,
    store: &VectorStore<T>,
) -> Result<SearchRequestState<T>> {
    if query.len() != store.dim() {
        return Err(Error::input(format!(
            "query dim {} does not match store dim {}",
            query.len(),
            store.dim()
        )));
    }
    if k == 0 || k > config.m {
        return Err(Error::input(format!("k = {k} must be in 1..={}", config.m)));
    }
    let n = store.count();
    let mut visited = HashSet::new();
    let mut top_m: Vec<CandidateEntry<T>> = Vec::with_capacity(config.m);
    for i in 0..config.entry_count {
        let id = (i * n / config.entry_count) as VectorId;
        if visited.insert(id) {
            top_m.push(CandidateEntry {
                id,
                dist: l2sq(&query, store.row(id)),
                expanded: false,
            });
        }
    }
    top_m.sort_by(|a, b| cmp_dist_id((a.dist, a.id), (b.dist, b.id)));
    top_m.truncate(config.m);
    let distance_evals = visited.len() as u64;
    Ok(SearchRequestState {
        request_id,
        query,
        top_m,
        visited,
        extends_done: 0,
        status: SearchStatus::Active,
        stage,
        t_arrival,
        deadline,
        k,
        no_change_streak: 0,
        distance_evals,
        m: config.m,
    })
}

/// The first `p` unexpanded entries of `top_m`, best first.
pub fn select_parents<T: Scalar>(state: &SearchRequestState<T>, p: usize) -> Vec<VectorId> {
    state
        .top_m
        .iter()
        .filter(|e| !e.expanded)
        .take(p)
        .map(|e| e.id)
        .collect()
}

/// Reads each parent's neighbor row, emits ids not yet visited (marking them
/// visited on emission) and marks the parents expanded.
pub fn expand<T: Scalar>(
    state: &mut SearchRequestState<T>,
    graph: &NeighborGraph,
    parents: &[VectorId],
) -> Result<Vec<VectorId>> {
    let mut emitted = Vec::with_capacity(parents.len() * graph.degree());
    for &parent in parents {
        let entry = state
            .top_m
            .iter_mut()
            .find(|e| e.id == parent)
            .ok_or_else(|| {
                Error::internal(format!(
                    "request {}: parent {parent} is not in top_m",
                    state.request_id
                ))
            })?;
        entry.expanded = true;
        let row = graph.neighbors(parent).ok_or_else(|| {
            Error::internal(format!("parent {parent} has no row in the graph"))
        })?;
        for &nb in row {
            if state.visited.insert(nb) {
                emitted.push(nb);
            }
        }
    }
    Ok(emitted)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskOwner {
    Request(RequestId),
    Dummy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DistanceTask {
    pub owner: TaskOwner,
    pub candidate: VectorId,
}

impl DistanceTask {
    pub const DUMMY: DistanceTask = DistanceTask {
        owner: TaskOwner::Dummy,
        candidate: 0,
    };
}

/// A fixed-shape batch: `tasks.len() == capacity`, real tasks first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskBatch {
    capacity: usize,
    tasks: Vec<DistanceTask>,
    real_count: usize,
}

impl TaskBatch {
    pub fn capacity(&self) -> usize {
        self.capacity
    }
    pub fn tasks(&self) -> &[DistanceTask] {
        &self.tasks
    }
    pub fn real_count(&self) -> usize {
        self.real_count
    }
}

/// Concatenates emissions in ascending request id order and cuts them into
/// batches of exactly `capacity` slots, padding only the final batch.
/// No batch is produced when there are no emissions.
pub fn build_task_array(
    emissions: &[(RequestId, Vec<VectorId>)],
    capacity: usize,
) -> Vec<TaskBatch> {
    assert!(capacity > 0, "batch capacity must be positive");
    let mut order: Vec<&(RequestId, Vec<VectorId>)> = emissions.iter().collect();
    order.sort_by_key(|(id, _)| *id);
    let mut flat = order.into_iter().flat_map(|(owner, cands)| {
        cands.iter().map(move |&candidate| DistanceTask {
            owner: TaskOwner::Request(*owner),
            candidate,
        })
    });
    let mut batches = Vec::new();
    loop {
        let mut tasks: Vec<DistanceTask> = flat.by_ref().take(capacity).collect();
        if tasks.is_empty() {
            break;
        }
        let real_count = tasks.len();
        tasks.resize(capacity, DistanceTask::DUMMY);
        batches.push(TaskBatch {
            capacity,
            tasks,
            real_count,
        });
        if real_count < capacity {
            break;
        }
    }
    batches
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceResult<T> {
    pub owner: RequestId,
    pub candidate: VectorId,
    pub dist: T,
}

/// Evaluates every non-dummy task in order. Dummy slots produce nothing.
pub fn execute_distance_batch<'q, T, F>(
    batch: &TaskBatch,
    store: &VectorStore<T>,
    query_of: F,
) -> Result<Vec<DistanceResult<T>>>
where
    T: Scalar,
    F: Fn(RequestId) -> Option<&'q [T]>,
{
    let mut out = Vec::with_capacity(batch.real_count);
    for task in &batch.tasks {
        let TaskOwner::Request(owner) = task.owner else {
            continue;
        };
        let query = query_of(owner)
            .ok_or_else(|| Error::internal(format!("task owner {owner} is not active")))?;
        let row = store.get(task.candidate).ok_or_else(|| {
            Error::internal(format!("candidate id {} out of range", task.candidate))
        })?;
        out.push(DistanceResult {
            owner,
            candidate: task.candidate,
            dist: l2sq(query, row),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MergeReport {
    pub changed: bool,
    pub inserted_count: usize,
}

/// Merges `(candidate, dist)` results into `top_m`, keeping the best `m` by
/// `(dist, id)`. New entries start unexpanded.
pub fn scatter_merge<T: Scalar>(
    state: &mut SearchRequestState<T>,
    results: &[(VectorId, T)],
) -> Result<MergeReport> {
    if results.is_empty() {
        return Ok(MergeReport::default());
    }
    let mut fresh: HashSet<VectorId> = HashSet::with_capacity(results.len());
    for &(id, _) in results {
        if !fresh.insert(id) || state.top_m.iter().any(|e| e.id == id) {
            return Err(Error::internal(format!(
                "request {}: duplicate candidate {id} in merge",
                state.request_id
            )));
        }
    }
    let before: Vec<VectorId> = state.top_m.iter().map(|e| e.id).collect();
    state
        .top_m
        .extend(results.iter().map(|&(id, dist)| CandidateEntry {
            id,
            dist,
            expanded: false,
        }));
    state
        .top_m
        .sort_by(|a, b| cmp_dist_id((a.dist, a.id), (b.dist, b.id)));
    state.top_m.truncate(state.m);
    let inserted_count = state.top_m.iter().filter(|e| fresh.contains(&e.id)).count();
    let changed = state.top_m.len() != before.len()
        || state.top_m.iter().zip(&before).any(|(e, &id)| e.id != id);
    Ok(MergeReport {
        changed,
        inserted_count,
    })
}

/// Updates the no-change streak from this extend's merge and decides whether
/// the request has converged.
pub fn check_early_stop<T: Scalar>(
    state: &mut SearchRequestState<T>,
    merge: MergeReport,
    config: &EngineConfig,
) -> SearchStatus {
    if merge.changed {
        state.no_change_streak = 0;
    } else {
        state.no_change_streak += 1;
    }
    if state.no_change_streak >= config.stop_streak
        || !state.has_unexpanded()
        || state.extends_done >= config.max_extends
    {
        state.status = SearchStatus::Converged;
    }
    state.status
}

/// Extracts the best `k` entries and moves the request to `Finished`.
pub fn finalize<T: Scalar>(state: &mut SearchRequestState<T>, k: usize) -> Result<Vec<Neighbor<T>>> {
    match state.status {
        SearchStatus::Converged => {}
        SearchStatus::Finished => {
            return Err(Error::Misuse(format!(
                "request {} already finalized",
                state.request_id
            )))
        }
        SearchStatus::Active => {
            return Err(Error::Misuse(format!(
                "request {} has not converged",
                state.request_id
            )))
        }
    }
    if k > state.top_m.len() {
        return Err(Error::input(format!(
            "k = {k} exceeds top_m length {}",
            state.top_m.len()
        )));
    }
    state.status = SearchStatus::Finished;
    Ok(state.top_m[..k]
        .iter()
        .map(|e| Neighbor {
            id: e.id,
            dist: e.dist,
        })
        .collect())
}

/// A search waiting to enter the engine.
#[derive(Debug, Clone)]
pub struct Admission<T> {
    pub request_id: RequestId,
    pub query: Vec<T>,
    pub stage: RequestStage,
    pub t_arrival: f64,
    pub deadline: Option<f64>,
    pub k: usize,
}

#[derive(Debug, Default)]
struct AdmissionInner<T> {
    pending: VecDeque<Admission<T>>,
    issued: HashSet<RequestId>,
}

/// Multi-producer admission queue. Payloads are validated on enqueue; the
/// engine drains the whole queue at the start of each step.
#[derive(Debug)]
pub struct AdmissionQueue<T> {
    dim: usize,
    m: usize,
    inner: Arc<Mutex<AdmissionInner<T>>>,
}

impl<T> Clone for AdmissionQueue<T> {
    fn clone(&self) -> Self {
        Self {
            dim: self.dim,
            m: self.m,
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> AdmissionQueue<T> {
    pub fn submit(&self, admission: Admission<T>) -> Result<()> {
        if admission.query.len() != self.dim {
            return Err(Error::input(format!(
                "query dim {} does not match store dim {}",
                admission.query.len(),
                self.dim
            )));
        }
        if admission.k == 0 || admission.k > self.m {
            return Err(Error::input(format!(
                "k = {} must be in 1..={}",
                admission.k, self.m
            )));
        }
        let mut inner = self.inner.lock().expect("admission queue poisoned");
        if !inner.issued.insert(admission.request_id) {
            return Err(Error::input(format!(
                "request id {} already submitted",
                admission.request_id
            )));
        }
        inner.pending.push_back(admission);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("admission queue poisoned").pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn drain(&self) -> Vec<Admission<T>> {
        let mut inner = self.inner.lock().expect("admission queue poisoned");
        inner.pending.drain(..).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompletedSearch<T> {
    pub request_id: RequestId,
    pub stage: RequestStage,
    pub t_arrival: f64,
    pub neighbors: Vec<Neighbor<T>>,
    pub extends: u32,
    pub distance_evals: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct StepReport {
    pub batches_launched: usize,
    pub requests_retired: usize,
    pub requests_admitted: usize,
    /// Distance tasks emitted by all expands this step.
    pub tasks_emitted: usize,
    /// `real_count` of each launched batch, in launch order.
    pub batch_real_counts: Vec<usize>,
    pub retired_ids: Vec<RequestId>,
}

impl StepReport {
    pub fn is_empty(&self) -> bool {
        self.batches_launched == 0 && self.requests_retired == 0 && self.requests_admitted == 0
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct EngineStats {
    pub steps: u64,
    pub batches: u64,
    pub real_tasks: u64,
    pub dummy_tasks: u64,
    pub seed_evals: u64,
}

/// Single-owner stepper over a shared store and graph.
#[derive(Debug)]
pub struct Engine<T> {
    store: Arc<VectorStore<T>>,
    graph: Arc<NeighborGraph>,
    config: EngineConfig,
    active: BTreeMap<RequestId, SearchRequestState<T>>,
    admissions: AdmissionQueue<T>,
    completed: Vec<CompletedSearch<T>>,
    stats: EngineStats,
}

impl<T: Scalar> Engine<T> {
    pub fn new(
        store: Arc<VectorStore<T>>,
        graph: Arc<NeighborGraph>,
        config: EngineConfig,
    ) -> Result<Self> {
        config.validate()?;
        if graph.node_count() != store.count() {
            return Err(Error::input(format!(
                "graph has {} nodes but store has {} vectors",
                graph.node_count(),
                store.count()
            )));
        }
        let admissions = AdmissionQueue {
            dim: store.dim(),
            m: config.m,
            inner: Arc::new(Mutex::new(AdmissionInner {
                pending: VecDeque::new(),
                issued: HashSet::new(),
            })),
        };
        Ok(Self {
            store,
            graph,
            config,
            active: BTreeMap::new(),
            admissions,
            completed: Vec::new(),
            stats: EngineStats::default(),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn store(&self) -> &VectorStore<T> {
        &self.store
    }

    /// Handle for producers; clones share the same queue.
    pub fn admissions(&self) -> AdmissionQueue<T> {
        self.admissions.clone()
    }

    pub fn submit(&self, admission: Admission<T>) -> Result<()> {
        self.admissions.submit(admission)
    }

    pub fn active_count(&self) -> usize {
        self.active.len()
    }

    pub fn active(&self) -> impl Iterator<Item = &SearchRequestState<T>> {
        self.active.values()
    }

    pub fn is_idle(&self) -> bool {
        self.active.is_empty() && self.admissions.is_empty()
    }

    pub fn stats(&self) -> &EngineStats {
        &self.stats
    }

    /// Takes the results of every request retired so far.
    pub fn take_completed(&mut self) -> Vec<CompletedSearch<T>> {
        std::mem::take(&mut self.completed)
    }

    /// Admits pending requests, then runs one extend for every active request.
    pub fn step(&mut self) -> Result<StepReport> {
        let mut report = StepReport::default();

        for adm in self.admissions.drain() {
            let state = seed_request(
                adm.request_id,
                adm.query,
                adm.stage,
                adm.t_arrival,
                adm.deadline,
                adm.k,
                &self.config,
                &self.store,
            )?;
            self.stats.seed_evals += state.distance_evals;
            self.active.insert(adm.request_id, state);
            report.requests_admitted += 1;
        }
        if self.active.is_empty() {
            return Ok(report);
        }
        self.stats.steps += 1;

        let mut emissions = Vec::with_capacity(self.active.len());
        for (&id, state) in self.active.iter_mut() {
            let parents = select_parents(state, self.config.p);
            let emitted = expand(state, &self.graph, &parents)?;
            report.tasks_emitted += emitted.len();
            emissions.push((id, emitted));
        }

        let mut per_request: BTreeMap<RequestId, Vec<(VectorId, T)>> = BTreeMap::new();
        let batches = build_task_array(&emissions, self.config.batch_capacity);
        for batch in &batches {
            let active = &self.active;
            let results = execute_distance_batch(batch, &self.store, |owner| {
                active.get(&owner).map(|s| s.query.as_slice())
            })?;
            for r in results {
                per_request.entry(r.owner).or_default().push((r.candidate, r.dist));
            }
            report.batch_real_counts.push(batch.real_count());
            self.stats.batches += 1;
            self.stats.real_tasks += batch.real_count() as u64;
            self.stats.dummy_tasks += (batch.capacity() - batch.real_count()) as u64;
        }
        report.batches_launched = batches.len();

        let mut retired = Vec::new();
        for (&id, state) in self.active.iter_mut() {
            let results = per_request.remove(&id).unwrap_or_default();
            state.distance_evals += results.len() as u64;
            let merge = scatter_merge(state, &results)?;
            state.extends_done += 1;
            if check_early_stop(state, merge, &self.config) == SearchStatus::Converged {
                retired.push(id);
            }
        }
        for id in retired {
            let mut state = self.active.remove(&id).expect("retired id is active");
            let k = state.k.min(state.top_m.len());
            let neighbors = finalize(&mut state, k)?;
            self.completed.push(CompletedSearch {
                request_id: id,
                stage: state.stage,
                t_arrival: state.t_arrival,
                neighbors,
                extends: state.extends_done,
                distance_evals: state.distance_evals,
            });
            report.retired_ids.push(id);
        }
        report.requests_retired = report.retired_ids.len();
        Ok(report)
    }

    /// Steps until every admitted request has retired.
    pub fn run_to_completion(&mut self) -> Result<Vec<StepReport>> {
        let mut reports = Vec::new();
        while !self.is_idle() {
            reports.push(self.step()?);
        }
        Ok(reports)
    }
}

/// Reference path: the same state machine with exactly one request.
pub fn search_sequential<T: Scalar>(
    query: &[T],
    store: &VectorStore<T>,
    graph: &NeighborGraph,
    config: &EngineConfig,
    k: usize,
) -> Result<CompletedSearch<T>> {
    config.validate()?;
    let mut state = seed_request(
        0,
        query.to_vec(),
        RequestStage::Prefill,
        0.0,
        None,
        k,
        config,
        store,
    )?;
    while state.status == SearchStatus::Active {
        let parents = select_parents(&state, config.p);
        let emitted = expand(&mut state, graph, &parents)?;
        let results: Vec<(VectorId, T)> = emitted
            .iter()
            .map(|&id| {
                store
                    .get(id)
                    .map(|row| (id, l2sq(query, row)))
                    .ok_or_else(|| Error::internal(format!("candidate id {id} out of range")))
            })
            .collect::<Result<_>>()?;
        state.distance_evals += results.len() as u64;
        let merge = scatter_merge(&mut state, &results)?;
        state.extends_done += 1;
        check_early_stop(&mut state, merge, config);
    }
    let k = k.min(state.top_m.len());
    let neighbors = finalize(&mut state, k)?;
    Ok(CompletedSearch {
        request_id: 0,
        stage: state.stage,
        t_arrival: 0.0,
        neighbors,
        extends: state.extends_done,
        distance_evals: state.distance_evals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ann_graph::build_knn_graph;
    use crate::workload::gen_vectors;

    fn cfg() -> EngineConfig {
        EngineConfig::default()
    }

    fn small_world(n: usize, dim: usize, degree: usize) -> (Arc<VectorStore<f32>>, Arc<NeighborGraph>) {
        let s = gen_vectors(n, dim, 7);
        let g = build_knn_graph(&s, degree).unwrap();
        (Arc::new(s), Arc::new(g))
    }

    fn state_with(top: &[(VectorId, f32, bool)], m: usize) -> SearchRequestState<f32> {
        SearchRequestState {
            request_id: 1,
            query: vec![0.0],
            top_m: top
                .iter()
                .map(|&(id, dist, expanded)| CandidateEntry { id, dist, expanded })
                .collect(),
            visited: top.iter().map(|t| t.0).collect(),
            extends_done: 0,
            status: SearchStatus::Active,
            stage: RequestStage::Decode,
            t_arrival: 0.0,
            deadline: None,
            k: 1,
            no_change_streak: 0,
            distance_evals: 0,
            m,
        }
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        let bad = [
            EngineConfig { p: 0, ..cfg() },
            EngineConfig { p: 65, ..cfg() },
            EngineConfig { entry_count: 0, ..cfg() },
            EngineConfig { batch_capacity: 0, ..cfg() },
            EngineConfig { stop_streak: 0, ..cfg() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config { .. })));
        }
    }

    #[test]
    fn seeds_are_strided() {
        let s = gen_vectors(100, 4, 1);
        let c = EngineConfig { entry_count: 4, ..cfg() };
        let st = seed_request(0, s.row(3).to_vec(), RequestStage::Prefill, 0.0, None, 10, &c, &s).unwrap();
        let mut ids: Vec<_> = st.top_m.iter().map(|e| e.id).collect();
        ids.sort_unstable();
        assert_eq!(ids, vec![0, 25, 50, 75]);
        assert!(st.top_m.iter().all(|e| !e.expanded && st.visited.contains(&e.id)));
        assert_eq!(st.status, SearchStatus::Active);

        let one = EngineConfig { entry_count: 1, ..cfg() };
        let st = seed_request(0, s.row(3).to_vec(), RequestStage::Prefill, 0.0, None, 1, &one, &s).unwrap();
        assert_eq!(st.top_m.len(), 1);
        assert_eq!(st.top_m[0].id, 0);

        let st = seed_request(0, s.row(0).to_vec(), RequestStage::Prefill, 0.0, None, 1, &c, &s).unwrap();
        assert_eq!((st.top_m[0].id, st.top_m[0].dist), (0, 0.0));

        assert!(seed_request(0, vec![0.0; 3], RequestStage::Prefill, 0.0, None, 1, &c, &s).is_err());
        assert!(seed_request(0, vec![0.0; 4], RequestStage::Prefill, 0.0, None, 65, &c, &s).is_err());
    }

    #[test]
    fn parent_selection() {
        let st = state_with(&[(5, 0.1, true), (7, 0.2, false)], 4);
        assert_eq!(select_parents(&st, 2), vec![7]);
        let all = state_with(&[(5, 0.1, true), (7, 0.2, true)], 4);
        assert!(select_parents(&all, 2).is_empty());
        let two = state_with(&[(5, 0.1, false), (7, 0.2, false)], 4);
        assert_eq!(select_parents(&two, 1), vec![5]);
    }

    #[test]
    fn expand_filters_visited_once() {
        let g = NeighborGraph::from_rows(&[vec![1, 2], vec![2, 3], vec![0, 3], vec![0, 1]]).unwrap();
        let mut st = state_with(&[(0, 0.1, false), (1, 0.2, false)], 4);
        let out = expand(&mut st, &g, &[0, 1]).unwrap();
        // 1 already visited, 2 shared by both parents
        assert_eq!(out, vec![2, 3]);
        assert!(st.top_m.iter().all(|e| e.expanded));

        let mut done = state_with(&[(0, 0.1, false), (1, 0.2, false), (2, 0.3, false)], 4);
        assert!(expand(&mut done, &g, &[0]).unwrap().is_empty());
        assert!(done.top_m[0].expanded);
        assert!(matches!(expand(&mut done, &g, &[3]), Err(Error::Internal(_))));
    }

    #[test]
    fn fresh_request_emits_full_row() {
        let (s, g) = small_world(500, 8, 16);
        let c = EngineConfig { entry_count: 1, ..cfg() };
        let mut st = seed_request(0, s.row(250).to_vec(), RequestStage::Prefill, 0.0, None, 1, &c, &s).unwrap();
        // reference traversal: seed id 0 is not its own neighbor, so all 16 ids are new
        let want: Vec<u32> = g.neighbors(0).unwrap().to_vec();
        assert_eq!(expand(&mut st, &g, &[0]).unwrap(), want);
    }

    #[test]
    fn task_array_shapes() {
        assert!(build_task_array(&[], 8).is_empty());
        assert!(build_task_array(&[(1, vec![])], 8).is_empty());

        let b = build_task_array(&[(3, vec![1, 2, 3, 4, 5])], 8);
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].real_count(), 5);
        assert_eq!(b[0].tasks().len(), 8);
        assert!(b[0].tasks()[5..].iter().all(|t| *t == DistanceTask::DUMMY));

        let em = vec![(9, (0..9).collect::<Vec<_>>()), (2, (100..108).collect())];
        let b = build_task_array(&em, 8);
        let counts: Vec<_> = b.iter().map(TaskBatch::real_count).collect();
        assert_eq!(counts, vec![8, 8, 1]);
        assert!(b.iter().all(|x| x.tasks().len() == 8));
        // request 2 sorts ahead of request 9
        assert_eq!(b[0].tasks()[0].owner, TaskOwner::Request(2));
        assert_eq!(b[1].tasks()[0].owner, TaskOwner::Request(9));

        let exact = build_task_array(&[(1, (0..16).collect())], 8);
        assert_eq!(exact.len(), 2);
    }

    #[test]
    fn batch_execution_matches_sequential_calls() {
        let s = gen_vectors(64, 5, 3);
        let queries: BTreeMap<RequestId, Vec<f32>> =
            [(1, s.row(4).to_vec()), (2, s.row(9).to_vec()), (3, vec![0.5; 5])].into();
        let em = vec![(1, vec![0, 1, 2]), (2, vec![3, 4]), (3, vec![60, 61, 62])];
        let batch = &build_task_array(&em, 8)[0];
        let res = execute_distance_batch(batch, &s, |o| queries.get(&o).map(Vec::as_slice)).unwrap();
        assert_eq!(res.len(), 8);
        for r in &res {
            let want = crate::ann_graph::distance(&queries[&r.owner], s.row(r.candidate)).unwrap();
            assert_eq!(r.dist, want);
        }
        let tail = &build_task_array(&[(1, vec![0])], 4)[0];
        assert_eq!(execute_distance_batch(tail, &s, |o| queries.get(&o).map(Vec::as_slice)).unwrap().len(), 1);

        let bad = &build_task_array(&[(1, vec![64])], 4)[0];
        assert!(execute_distance_batch(bad, &s, |o| queries.get(&o).map(Vec::as_slice)).is_err());
    }

    #[test]
    fn merge_rules() {
        let mut st = state_with(&[(1, 0.1, true), (2, 0.5, true)], 2);
        assert!(!scatter_merge(&mut st, &[]).unwrap().changed);

        let r = scatter_merge(&mut st, &[(3, 0.3)]).unwrap();
        assert_eq!(r, MergeReport { changed: true, inserted_count: 1 });
        let ids: Vec<_> = st.top_m.iter().map(|e| (e.id, e.dist, e.expanded)).collect();
        assert_eq!(ids, vec![(1, 0.1, true), (3, 0.3, false)]);

        let r = scatter_merge(&mut st, &[(4, 0.9)]).unwrap();
        assert!(!r.changed);
        assert!(scatter_merge(&mut st, &[(1, 0.0)]).is_err());
        assert!(scatter_merge(&mut st, &[(8, 0.0), (8, 0.0)]).is_err());
    }

    #[test]
    fn early_stop_rules() {
        let c = cfg();
        let mut all_exp = state_with(&[(1, 0.1, true)], 4);
        let changed = MergeReport { changed: true, inserted_count: 1 };
        assert_eq!(check_early_stop(&mut all_exp, changed, &c), SearchStatus::Converged);

        let mut st = state_with(&[(1, 0.1, false)], 4);
        assert_eq!(check_early_stop(&mut st, MergeReport::default(), &c), SearchStatus::Converged);

        let c2 = EngineConfig { stop_streak: 3, max_extends: 50, ..cfg() };
        let mut st = state_with(&[(1, 0.1, false)], 4);
        for i in 1..=50 {
            st.extends_done = i;
            let status = check_early_stop(&mut st, changed, &c2);
            assert_eq!(status == SearchStatus::Converged, i == 50);
        }
    }

    #[test]
    fn finalize_lifecycle() {
        let mut st = state_with(&[(1, 0.1, true), (2, 0.2, true)], 4);
        assert!(matches!(finalize(&mut st, 1), Err(Error::Misuse(_))));
        st.status = SearchStatus::Converged;
        assert!(finalize(&mut st, 3).is_err());
        assert_eq!(finalize(&mut st, 1).unwrap(), vec![Neighbor { id: 1, dist: 0.1 }]);
        assert!(matches!(finalize(&mut st, 1), Err(Error::Misuse(_))));

        let mut st = state_with(&[(1, 0.1, true), (2, 0.2, true)], 4);
        st.status = SearchStatus::Converged;
        assert_eq!(finalize(&mut st, 2).unwrap().len(), 2);
    }

    #[test]
    fn empty_engine_step() {
        let (s, g) = small_world(50, 4, 4);
        let mut e = Engine::new(s, g, cfg()).unwrap();
        assert!(e.step().unwrap().is_empty());
    }

    #[test]
    fn request_without_emissions_retires() {
        // every neighbor of the single seed is the seed's only neighbor, already visited
        let s = Arc::new(VectorStore::new(1, vec![0.0f32, 1.0]).unwrap());
        let g = Arc::new(NeighborGraph::from_rows(&[vec![1], vec![0]]).unwrap());
        let c = EngineConfig { entry_count: 2, m: 4, p: 2, ..cfg() };
        let mut e = Engine::new(s, g, c).unwrap();
        e.submit(Admission {
            request_id: 1,
            query: vec![0.2],
            stage: RequestStage::Prefill,
            t_arrival: 0.0,
            deadline: None,
            k: 1,
        })
        .unwrap();
        let r = e.step().unwrap();
        assert_eq!(r.tasks_emitted, 0);
        assert_eq!(r.batches_launched, 0);
        assert_eq!(r.requests_retired, 1);
        let done = e.take_completed();
        assert_eq!(done[0].extends, 1);
        assert_eq!(done[0].neighbors[0].id, 0);
    }

    #[test]
    fn sequential_tiny() {
        let s = VectorStore::new(1, vec![0.0f32, 1.0, 2.0]).unwrap();
        let g = build_knn_graph(&s, 2).unwrap();
        let c = EngineConfig { m: 3, p: 1, entry_count: 1, ..cfg() };
        let r = search_sequential(&[1.0], &s, &g, &c, 1).unwrap();
        assert_eq!((r.neighbors[0].id, r.neighbors[0].dist), (1, 0.0));
        let full = search_sequential(&[1.0], &s, &g, &c, 3).unwrap();
        assert_eq!(full.neighbors.len(), 3);
    }

    #[test]
    fn staggered_admissions_match_solo_runs() {
        let (s, g) = small_world(2000, 8, 16);
        let c = EngineConfig { batch_capacity: 64, ..cfg() };
        let qs = gen_vectors(2, 8, 99);
        let mut e = Engine::new(s.clone(), g.clone(), c.clone()).unwrap();
        let adm = |id: u64| Admission {
            request_id: id,
            query: qs.row(id as u32).to_vec(),
            stage: RequestStage::Decode,
            t_arrival: 0.0,
            deadline: None,
            k: 10,
        };
        e.submit(adm(0)).unwrap();
        e.step().unwrap();
        e.step().unwrap();
        e.submit(adm(1)).unwrap();
        e.run_to_completion().unwrap();
        let mut done = e.take_completed();
        done.sort_by_key(|d| d.request_id);
        for d in &done {
            let solo = search_sequential(qs.row(d.request_id as u32), &s, &g, &c, 10).unwrap();
            assert_eq!(d.neighbors, solo.neighbors);
            assert_eq!(d.extends, solo.extends);
            assert_eq!(d.distance_evals, solo.distance_evals);
        }
    }

    #[test]
    fn admission_queue_rejects_bad_payloads() {
        let (s, g) = small_world(50, 4, 4);
        let e = Engine::new(s, g, cfg()).unwrap();
        let good = Admission {
            request_id: 5,
            query: vec![0.0; 4],
            stage: RequestStage::Prefill,
            t_arrival: 0.0,
            deadline: Some(1.0),
            k: 10,
        };
        assert!(e.submit(Admission { query: vec![0.0; 3], ..good.clone() }).is_err());
        assert!(e.submit(Admission { k: 65, ..good.clone() }).is_err());
        e.submit(good.clone()).unwrap();
        assert!(e.submit(good).is_err());
    }

    #[test]
    fn concurrent_producers() {
        let (s, g) = small_world(300, 4, 8);
        let mut e = Engine::new(s, g, cfg()).unwrap();
        let q = e.admissions();
        std::thread::scope(|scope| {
            for t in 0..4u64 {
                let q = q.clone();
                scope.spawn(move || {
                    for i in 0..25u64 {
                        q.submit(Admission {
                            request_id: t * 100 + i,
                            query: vec![i as f32 * 0.01; 4],
                            stage: RequestStage::Decode,
                            t_arrival: 0.0,
                            deadline: None,
                            k: 5,
                        })
                        .unwrap();
                    }
                });
            }
        });
        let reports = e.run_to_completion().unwrap();
        assert_eq!(reports[0].requests_admitted, 100);
        assert_eq!(e.take_completed().len(), 100);
    }
}
