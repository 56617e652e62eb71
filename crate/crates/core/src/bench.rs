//! Wall-clock comparison of per-request and continuous batching on the
//! same query set.

use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use crate::ann_graph::{NeighborGraph, VectorStore};
use crate::engine::{Admission, Engine, EngineConfig, RequestStage};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::sim::percentile;

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ModeStats {
    pub wall_time_s: f64,
    pub distance_evals: u64,
    pub evals_per_s: f64,
    /// Real batch tasks per second.
    pub tasks_per_s: f64,
    pub batches: u64,
    pub dummy_fraction: f64,
    /// Mean `real_count / C` over launched batches.
    pub mean_fill: f64,
    pub latency_p50_ms: f64,
    pub latency_p95_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BenchSummary {
    pub queries: usize,
    pub batch_capacity: usize,
    pub sequential: ModeStats,
    pub batch: ModeStats,
}

fn admission<T: Scalar>(id: usize, query: &[T], k: usize) -> Admission<T> {
    Admission {
        request_id: id as u64,
        query: query.to_vec(),
        stage: RequestStage::Prefill,
        t_arrival: 0.0,
        deadline: None,
        k,
    }
}

fn finish_stats(
    engine: &Engine<impl Scalar>,
    wall: f64,
    evals: u64,
    latencies_ms: &[f64],
) -> ModeStats {
    let s = engine.stats();
    let slots = (s.real_tasks + s.dummy_tasks) as f64;
    let per_s = |v: f64| if wall > 0.0 { v / wall } else { 0.0 };
    ModeStats {
        wall_time_s: wall,
        distance_evals: evals,
        evals_per_s: per_s(evals as f64),
        tasks_per_s: per_s(s.real_tasks as f64),
        batches: s.batches,
        dummy_fraction: if slots > 0.0 { s.dummy_tasks as f64 / slots } else { 0.0 },
        mean_fill: if slots > 0.0 { s.real_tasks as f64 / slots } else { 0.0 },
        latency_p50_ms: percentile(latencies_ms, 0.5),
        latency_p95_ms: percentile(latencies_ms, 0.95),
    }
}

/// Runs every query alone, then all queries admitted together.
pub fn bench_engine<T: Scalar>(
    store: Arc<VectorStore<T>>,
    graph: Arc<NeighborGraph>,
    queries: &VectorStore<T>,
    config: &EngineConfig,
    k: usize,
) -> Result<BenchSummary> {
    bench_rows(store, graph, queries.rows().collect(), config, k)
}

pub fn bench_rows<T: Scalar>(
    store: Arc<VectorStore<T>>,
    graph: Arc<NeighborGraph>,
    queries: Vec<&[T]>,
    config: &EngineConfig,
    k: usize,
) -> Result<BenchSummary> {
    let mut summary = BenchSummary {
        queries: queries.len(),
        batch_capacity: config.batch_capacity,
        ..BenchSummary::default()
    };
    if queries.is_empty() {
        return Ok(summary);
    }

    let mut engine = Engine::new(Arc::clone(&store), Arc::clone(&graph), config.clone())?;
    let mut latencies = Vec::with_capacity(queries.len());
    let mut evals = 0;
    let start = Instant::now();
    for (i, q) in queries.iter().enumerate() {
        let t0 = Instant::now();
        engine.submit(admission(i, q, k))?;
        engine.run_to_completion()?;
        latencies.push(t0.elapsed().as_secs_f64() * 1e3);
        evals += engine.take_completed().iter().map(|c| c.distance_evals).sum::<u64>();
    }
    summary.sequential = finish_stats(&engine, start.elapsed().as_secs_f64(), evals, &latencies);

    let mut engine = Engine::new(store, graph, config.clone())?;
    let mut latencies = Vec::with_capacity(queries.len());
    let mut evals = 0;
    let start = Instant::now();
    for (i, q) in queries.iter().enumerate() {
        engine.submit(admission(i, q, k))?;
    }
    while !engine.is_idle() {
        engine.step()?;
        let now = start.elapsed().as_secs_f64() * 1e3;
        for c in engine.take_completed() {
            latencies.push(now);
            evals += c.distance_evals;
        }
    }
    summary.batch = finish_stats(&engine, start.elapsed().as_secs_f64(), evals, &latencies);
    Ok(summary)
}
