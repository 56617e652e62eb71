use std::collections::HashSet;
use std::fmt;

use rayon::prelude::*;

use super::store::{l2sq, top_k, VectorId, VectorStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Fixed out-degree adjacency, stored row-major as `count * degree` ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborGraph {
    degree: usize,
    adjacency: Vec<VectorId>,
}

impl NeighborGraph {
    /// Wraps a flat adjacency array. Only the shape is checked here; use
    /// [`validate_graph`] for the id-level invariants.
    pub fn from_flat(degree: usize, adjacency: Vec<VectorId>) -> Result<Self> {
        if degree == 0 {
            return Err(Error::input("graph degree must be >= 1"));
        }
        if adjacency.len() % degree != 0 {
            return Err(Error::input(format!(
                "adjacency length {} is not a multiple of degree {degree}",
                adjacency.len()
            )));
        }
        Ok(Self { degree, adjacency })
    }

    pub fn from_rows(rows: &[Vec<VectorId>]) -> Result<Self> {
        let degree = rows.first().map(Vec::len).unwrap_or(0);
        if let Some(i) = rows.iter().position(|r| r.len() != degree) {
            return Err(Error::input(format!(
                "row {i} has {} entries, expected {degree}",
                rows[i].len()
            )));
        }
        Self::from_flat(degree, rows.concat())
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.len() / self.degree
    }

    pub fn neighbors(&self, id: VectorId) -> Option<&[VectorId]> {
        let start = id as usize * self.degree;
        self.adjacency.get(start..start + self.degree)
    }

    pub fn as_flat(&self) -> &[VectorId] {
        &self.adjacency
    }

    pub fn rows(&self) -> impl Iterator<Item = &[VectorId]> {
        self.adjacency.chunks_exact(self.degree)
    }
}

/// Exact directed kNN graph: row `i` holds the `degree` nearest other
/// vectors, ties broken by smaller id. Rows are computed in parallel but each
/// row depends only on the store, so the result equals a sequential build.
pub fn build_knn_graph<T: Scalar>(store: &VectorStore<T>, degree: usize) -> Result<NeighborGraph> {
    let n = store.count();
    if degree == 0 || degree >= n {
        return Err(Error::input(format!(
            "degree {degree} must be in 1..{n} for a store of {n} vectors"
        )));
    }
    let rows: Vec<Vec<VectorId>> = (0..n as VectorId)
        .into_par_iter()
        .map(|i| {
            let q = store.row(i);
            let mut cands: Vec<(T, VectorId)> = store
                .rows()
                .enumerate()
                .filter(|&(j, _)| j as VectorId != i)
                .map(|(j, r)| (l2sq(q, r), j as VectorId))
                .collect();
            top_k(&mut cands, degree).into_iter().map(|(_, id)| id).collect()
        })
        .collect();
    NeighborGraph::from_rows(&rows)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    NodeCount { expected: usize, found: usize },
    OutOfRange { row: usize, slot: usize, id: VectorId },
    SelfLoop { row: usize, slot: usize },
    Duplicate { row: usize, id: VectorId },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NodeCount { expected, found } => {
                write!(f, "graph has {found} rows, store has {expected} vectors")
            }
            Violation::OutOfRange { row, slot, id } => {
                write!(f, "row {row} slot {slot}: id {id} out of range")
            }
            Violation::SelfLoop { row, slot } => write!(f, "row {row} slot {slot}: self-loop"),
            Violation::Duplicate { row, id } => write!(f, "row {row}: duplicate id {id}"),
        }
    }
}

/// Lists every invariant violation; an empty list means the graph is valid
/// for a store of `n_db` vectors.
pub fn validate_graph(graph: &NeighborGraph, n_db: usize) -> Vec<Violation> {
    let mut out = Vec::new();
    if graph.node_count() != n_db {
        out.push(Violation::NodeCount {
            expected: n_db,
            found: graph.node_count(),
        });
    }
    let mut seen = HashSet::with_capacity(graph.degree());
    for (row, ids) in graph.rows().enumerate() {
        seen.clear();
        for (slot, &id) in ids.iter().enumerate() {
            if id as usize >= n_db {
                out.push(Violation::OutOfRange { row, slot, id });
            }
            if id as usize == row {
                out.push(Violation::SelfLoop { row, slot });
            }
            if !seen.insert(id) {
                out.push(Violation::Duplicate { row, id });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ann_graph::brute_force_knn;
    use crate::workload::gen_vectors;

    fn line() -> VectorStore<f32> {
        VectorStore::new(1, vec![0.0, 1.0, 2.0]).unwrap()
    }

    #[test]
    fn collinear_degree_one() {
        let g = build_knn_graph(&line(), 1).unwrap();
        assert_eq!(g.as_flat(), &[1, 0, 1]);
        // node 1 is equidistant from 0 and 2: the smaller id wins
        let rows: Vec<_> = g.rows().map(<[u32]>::to_vec).collect();
        assert_eq!(rows, vec![vec![1], vec![0], vec![1]]);
    }

    #[test]
    fn degree_two_on_three_points() {
        let g = build_knn_graph(&line(), 2).unwrap();
        let rows: Vec<_> = g.rows().map(<[u32]>::to_vec).collect();
        assert_eq!(rows, vec![vec![1, 2], vec![0, 2], vec![1, 0]]);
        assert!(validate_graph(&g, 3).is_empty());
        assert!(build_knn_graph(&line(), 3).is_err());
        assert!(build_knn_graph(&line(), 0).is_err());
    }

    #[test]
    fn rows_match_brute_force_oracle() {
        let s = gen_vectors(1000, 8, 3);
        let g = build_knn_graph(&s, 16).unwrap();
        assert!(validate_graph(&g, 1000).is_empty());
        for i in (0..1000u32).step_by(37) {
            // the query point itself is its own nearest neighbor at dist 0
            let oracle = brute_force_knn(&s, s.row(i), 17).unwrap();
            let want: Vec<u32> = oracle.iter().map(|n| n.id).filter(|&id| id != i).take(16).collect();
            assert_eq!(g.neighbors(i).unwrap(), want.as_slice());
        }
        assert_eq!(build_knn_graph(&s, 16).unwrap(), g);
    }

    #[test]
    fn validation_flags_violations() {
        let g = NeighborGraph::from_rows(&[vec![0, 1], vec![0, 3], vec![1, 1]]).unwrap();
        let v = validate_graph(&g, 3);
        assert!(v.contains(&Violation::SelfLoop { row: 0, slot: 0 }));
        assert!(v.contains(&Violation::OutOfRange { row: 1, slot: 1, id: 3 }));
        assert!(!v.contains(&Violation::SelfLoop { row: 1, slot: 0 }));
        assert!(v.contains(&Violation::Duplicate { row: 2, id: 1 }));
        assert!(validate_graph(&g, 4).contains(&Violation::NodeCount { expected: 4, found: 3 }));
        assert!(NeighborGraph::from_rows(&[vec![1], vec![0, 2]]).is_err());
    }
}
