//! Seeded synthetic vectors and request traces.
//!
//! All randomness comes from ChaCha20 (`rand_chacha`), a counter-based
//! generator with a fixed, documented output stream, so a given seed yields
//! the same data on every platform. Independent streams of one seed are
//! used for the database, the arrival/length process and the query vectors.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Exp, Geometric, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ann_graph::{VectorId, VectorStore};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

/// Name of the random generator behind every seeded artifact.
pub const RNG_ALGORITHM: &str = "ChaCha20 (rand_chacha 0.9)";

pub const STREAM_DATABASE: u64 = 0;
pub const STREAM_TRACE: u64 = 1;
pub const STREAM_QUERIES: u64 = 2;

/// Spacing added to break exact arrival-time ties.
pub const ARRIVAL_EPSILON: f64 = 1e-9;

pub fn rng_for(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `n x dim` i.i.d. standard Gaussian vectors from the database stream.
pub fn gen_vectors(n: usize, dim: usize, seed: u64) -> VectorStore<f32> {
    gen_vectors_stream(n, dim, seed, STREAM_DATABASE)
}

pub fn gen_vectors_stream(n: usize, dim: usize, seed: u64, stream: u64) -> VectorStore<f32> {
    assert!(n >= 1 && dim >= 1, "gen_vectors needs n, dim >= 1");
    let mut rng = rng_for(seed, stream);
    let data: Vec<f32> = (0..n * dim).map(|_| rng.sample(StandardNormal)).collect();
    VectorStore::new(dim, data).expect("gaussian samples are finite")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum LengthDist {
    Fixed(u32),
    /// Inclusive integer range.
    Uniform([u32; 2]),
    /// `1 + Geometric(1/mean)`, so the mean is `mean` and the minimum 1.
    Geometric(f64),
}

impl LengthDist {
    fn validate(&self, key: &str) -> Result<()> {
        let ok = match *self {
            LengthDist::Fixed(k) => k >= 1,
            LengthDist::Uniform([a, b]) => a >= 1 && a <= b,
            LengthDist::Geometric(m) => m >= 1.0 && m.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(key, format!("invalid length distribution {self:?}; lengths must be >= 1")))
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> u32 {
        match *self {
            LengthDist::Fixed(k) => k,
            LengthDist::Uniform([a, b]) => rng.random_range(a..=b),
            LengthDist::Geometric(m) => {
                let g = Geometric::new(1.0 / m).expect("validated mean");
                1 + g.sample(rng).min(u64::from(u32::MAX - 1)) as u32
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadSpec {
    pub n_db: usize,
    pub dim: usize,
    pub n_requests: usize,
    /// Requests per millisecond.
    pub arrival_rate: f64,
    pub prompt_len: LengthDist,
    pub output_len: LengthDist,
    pub delta: u32,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            n_db: 10_000,
            dim: 32,
            n_requests: 200,
            arrival_rate: 0.02,
            prompt_len: LengthDist::Uniform([128, 1024]),
            output_len: LengthDist::Uniform([64, 256]),
            delta: 32,
            seed: 7,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::config(format!("workload.{key}"), msg));
        if self.n_db == 0 {
            return bad("n_db", "must be >= 1");
        }
        if self.dim == 0 {
            return bad("dim", "must be >= 1");
        }
        if self.n_requests == 0 {
            return bad("n_requests", "must be >= 1");
        }
        if !(self.arrival_rate > 0.0 && self.arrival_rate.is_finite()) {
            return bad("arrival_rate", "must be finite and > 0");
        }
        if self.delta == 0 {
            return bad("delta", "must be >= 1");
        }
        self.prompt_len.validate("workload.prompt_len")?;
        self.output_len.validate("workload.output_len")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRequest {
    pub id: u64,
    pub t_arrival: f64,
    pub prompt_len: u32,
    pub output_len: u32,
    pub delta: u32,
    /// Rows of the trace's query store: the prefill query, then one per
    /// decode probe.
    pub query_ids: Vec<VectorId>,
}

impl SimRequest {
    pub fn probe_count(&self) -> u32 {
        self.output_len / self.delta
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub requests: Vec<SimRequest>,
    pub queries: VectorStore<f32>,
}

/// Poisson arrivals with per-request lengths and `1 + floor(output/delta)`
/// query vectors each. Pure function of `spec`.
pub fn gen_trace(spec: &WorkloadSpec) -> Result<Trace> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, STREAM_TRACE);
    let exp = Exp::new(spec.arrival_rate).map_err(|e| Error::config("workload.arrival_rate", e.to_string()))?;
    let mut t = 0.0f64;
    let mut prev = f64::NEG_INFINITY;
    let mut next_query: VectorId = 0;
    let mut requests = Vec::with_capacity(spec.n_requests);
    for id in 0..spec.n_requests as u64 {
        t += exp.sample(&mut rng);
        let t_arrival = t.max(prev + ARRIVAL_EPSILON);
        prev = t_arrival;
        let prompt_len = spec.prompt_len.sample(&mut rng);
        let output_len = spec.output_len.sample(&mut rng);
        let n_queries = 1 + output_len / spec.delta;
        let query_ids = (next_query..next_query + n_queries).collect();
        next_query += n_queries;
        requests.push(SimRequest {
            id,
            t_arrival,
            prompt_len,
            output_len,
            delta: spec.delta,
            query_ids,
        });
    }
    let queries = gen_vectors_stream(next_query as usize, spec.dim, spec.seed, STREAM_QUERIES);
    Ok(Trace { requests, queries })
}

/// One JSON object per line: `{id, t_arrival, prompt_len, output_len, delta, query_ids}`.
pub fn trace_to_jsonl(requests: &[SimRequest]) -> String {
    let mut out = String::new();
    for r in requests {
        out.push_str(&serde_json::to_string(r).expect("request serializes"));
        out.push('\n');
    }
    out
}

pub fn write_trace(path: impl AsRef<Path>, requests: &[SimRequest]) -> Result<()> {
    write_atomic(path, trace_to_jsonl(requests).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vectors_are_reproducible() {
        let a = gen_vectors(100, 8, 42);
        assert_eq!(a, gen_vectors(100, 8, 42));
        assert_ne!(a, gen_vectors(100, 8, 43));
        let one = gen_vectors(1, 1, 0);
        assert_eq!(one.count(), 1);
        assert!(one.as_slice()[0].is_finite());
        assert_ne!(gen_vectors_stream(10, 4, 1, STREAM_QUERIES), gen_vectors(10, 4, 1));
    }

    #[test]
    fn gaussian_moments() {
        let s = gen_vectors(20_000, 4, 9);
        let n = s.as_slice().len() as f64;
        let mean = s.as_slice().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = s.as_slice().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }

    #[test]
    fn mean_interarrival_matches_rate() {
        let spec = WorkloadSpec {
            n_requests: 10_000,
            arrival_rate: 0.5,
            ..WorkloadSpec::default()
        };
        let tr = gen_trace(&spec).unwrap();
        let last = tr.requests.last().unwrap().t_arrival;
        let mean = last / spec.n_requests as f64;
        assert!((mean - 2.0).abs() <= 0.05 * 2.0, "mean inter-arrival {mean}");
        assert!(tr.requests.windows(2).all(|w| w[0].t_arrival < w[1].t_arrival));
    }

    #[test]
    fn fixed_lengths_and_probe_counts() {
        let spec = WorkloadSpec {
            n_requests: 50,
            prompt_len: LengthDist::Fixed(100),
            output_len: LengthDist::Fixed(70),
            delta: 32,
            ..WorkloadSpec::default()
        };
        let tr = gen_trace(&spec).unwrap();
        assert!(tr.requests.iter().all(|r| r.prompt_len == 100 && r.output_len == 70));
        assert!(tr.requests.iter().all(|r| r.query_ids.len() == 3));
        assert_eq!(tr.queries.count(), 150);

        let short = WorkloadSpec {
            output_len: LengthDist::Fixed(31),
            ..spec
        };
        let tr = gen_trace(&short).unwrap();
        assert!(tr.requests.iter().all(|r| r.query_ids.len() == 1 && r.probe_count() == 0));
    }

    #[test]
    fn length_distributions() {
        let mut rng = rng_for(3, 5);
        let u = LengthDist::Uniform([4, 6]);
        let xs: Vec<u32> = (0..1000).map(|_| u.sample(&mut rng)).collect();
        assert!(xs.iter().all(|&x| (4..=6).contains(&x)));
        assert!((4..=6).all(|v| xs.contains(&v)));
        let g = LengthDist::Geometric(20.0);
        let n = 20_000;
        let mean = (0..n).map(|_| g.sample(&mut rng) as f64).sum::<f64>() / n as f64;
        assert!((mean - 20.0).abs() < 0.6, "geometric mean {mean}");
        assert_eq!(LengthDist::Geometric(1.0).sample(&mut rng), 1);
    }

    #[test]
    fn trace_is_pure_and_serializes() {
        let spec = WorkloadSpec {
            n_requests: 20,
            ..WorkloadSpec::default()
        };
        let a = gen_trace(&spec).unwrap();
        assert_eq!(a, gen_trace(&spec).unwrap());
        let text = trace_to_jsonl(&a.requests);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in ["id", "t_arrival", "prompt_len", "output_len", "delta", "query_ids"] {
            assert!(first.get(key).is_some(), "missing {key}");
        }
        let back: SimRequest = serde_json::from_str(text.lines().nth(3).unwrap()).unwrap();
        assert_eq!(back, a.requests[3]);
    }

    #[test]
    fn spec_validation_names_keys() {
        let bad = WorkloadSpec {
            delta: 0,
            ..WorkloadSpec::default()
        };
        match bad.validate() {
            Err(Error::Config { key, .. }) => assert_eq!(key, "workload.delta"),
            other => panic!("{other:?}"),
        }
        let bad = WorkloadSpec {
            output_len: LengthDist::Uniform([5, 2]),
            ..WorkloadSpec::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { key, .. }) if key == "workload.output_len"));
    }
}
