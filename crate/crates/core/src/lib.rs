//! Cost model, graph search engine, retrieval scheduler and discrete-event
//! simulator for serving LLMs with a shared vector-search GPU pool.
//!
//! The numeric core (`roofline`, `ann_graph`, `engine`) is generic over
//! [`Scalar`] (`f32` or `f64`); the aliases below name the common choices.
//! Scheduling and simulation keep time in `f64` milliseconds.

pub mod ann_graph;
pub mod bench;
pub mod config;
pub mod engine;
pub mod error;
pub mod fsutil;
pub mod roofline;
pub mod scalar;
pub mod scheduler;
pub mod sim;
pub mod workload;

pub use ann_graph::{brute_force_knn, build_knn_graph, validate_graph, Neighbor, NeighborGraph, VectorId, VectorStore};
pub use config::RunConfig;
pub use engine::{search_sequential, Engine, EngineConfig};
pub use error::{Error, Result};
pub use roofline::{Stage, StageRooflineParams};
pub use scalar::Scalar;
pub use scheduler::{Scheduler, SchedulerConfig};
pub use sim::{compare_architectures, simulate, Architecture, LatencyModel, SimMetrics, SimSetup, World};

pub type VectorStoreF32 = VectorStore<f32>;
pub type VectorStoreF64 = VectorStore<f64>;
pub type NeighborF32 = Neighbor<f32>;
pub type RooflineF32 = StageRooflineParams<f32>;
pub type RooflineF64 = StageRooflineParams<f64>;
pub type EngineF32 = Engine<f32>;
pub type EngineF64 = Engine<f64>;
