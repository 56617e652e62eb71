//! Vector storage, the exact kNN oracle and the fixed-degree neighbor graph
//! walked by the search engine.

mod graph;
pub mod io;
mod store;

pub use graph::{build_knn_graph, validate_graph, NeighborGraph, Violation};
pub use store::{brute_force_knn, cmp_dist_id, distance, Neighbor, VectorId, VectorStore};
pub(crate) use store::l2sq;

/// Only squared Euclidean is supported.
pub const METRIC_L2SQ: &str = "l2sq";
