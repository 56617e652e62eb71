use std::cmp::Ordering;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub type VectorId = u32;

/// Row-major `count x dim` matrix of finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorStore<T> {
    dim: usize,
    data: Vec<T>,
}

impl<T: Scalar> VectorStore<T> {
    pub fn new(dim: usize, data: Vec<T>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::input("vector dimension must be >= 1"));
        }
        if data.is_empty() || data.len() % dim != 0 {
            return Err(Error::input(format!(
                "data length {} is not a positive multiple of dim {dim}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::input(format!(
                "non-finite value at row {}, column {}",
                pos / dim,
                pos % dim
            )));
        }
        if data.len() / dim > VectorId::MAX as usize {
            return Err(Error::input("too many vectors for 32-bit ids"));
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::input("rows have differing dimensionality"));
        }
        Self::new(dim, rows.concat())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    /// Panics if `id` is out of range.
    pub fn row(&self, id: VectorId) -> &[T] {
        let start = id as usize * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn get(&self, id: VectorId) -> Option<&[T]> {
        ((id as usize) < self.count()).then(|| self.row(id))
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn cast<U: Scalar>(&self) -> VectorStore<U> {
        VectorStore {
            dim: self.dim,
            data: self.data.iter().map(|v| U::of(v.to_f64_lossy())).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Neighbor<T> {
    pub id: VectorId,
    pub dist: T,
}

/// Lexicographic `(dist, id)` order used for every ranking in the crate.
pub fn cmp_dist_id<T: Scalar>(a: (T, VectorId), b: (T, VectorId)) -> Ordering {
    a.0.partial_cmp(&b.0)
        .unwrap_or(Ordering::Equal)
        .then(a.1.cmp(&b.1))
}

/// Squared Euclidean distance. Dimensions must already agree.
#[inline]
pub(crate) fn l2sq<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        let d = *x - *y;
        acc = acc + d * d;
    }
    acc
}

/// Squared Euclidean distance between two equal-length vectors.
pub fn distance<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::input(format!(
            "dimension mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(l2sq(a, b))
}

/// Exact k nearest neighbors sorted ascending by `(dist, id)`.
pub fn brute_force_knn<T: Scalar>(
    store: &VectorStore<T>,
    query: &[T],
    k: usize,
) -> Result<Vec<Neighbor<T>>> {
    if query.len() != store.dim() {
        return Err(Error::input(format!(
            "query dim {} does not match store dim {}",
            query.len(),
            store.dim()
        )));
    }
    if k == 0 || k > store.count() {
        return Err(Error::input(format!(
            "k = {k} must be in 1..={}",
            store.count()
        )));
    }
    let mut all: Vec<(T, VectorId)> = store
        .rows()
        .enumerate()
        .map(|(i, row)| (l2sq(query, row), i as VectorId))
        .collect();
    Ok(top_k(&mut all, k)
        .into_iter()
        .map(|(dist, id)| Neighbor { id, dist })
        .collect())
}

/// Selects the `k` smallest `(dist, id)` pairs in sorted order.
pub(crate) fn top_k<T: Scalar>(all: &mut [(T, VectorId)], k: usize) -> Vec<(T, VectorId)> {
    let cmp = |a: &(T, VectorId), b: &(T, VectorId)| cmp_dist_id(*a, *b);
    if k < all.len() {
        all.select_nth_unstable_by(k, cmp);
    }
    let mut head = all[..k.min(all.len())].to_vec();
    head.sort_unstable_by(cmp);
    head
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::gen_vectors;

    #[test]
    fn distance_examples() {
        assert_eq!(distance(&[1.0f32, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(distance(&[0.0f64, 0.0], &[3.0, 4.0]).unwrap(), 25.0);
        assert!(distance(&[0.0f32], &[1.0, 2.0]).is_err());

        let s = gen_vectors(2, 24, 5);
        let (a, b) = (s.row(0), s.row(1));
        let mut oracle = 0.0f64;
        for i in 0..24 {
            let d = a[i] as f64 - b[i] as f64;
            oracle += d * d;
        }
        let got = distance(a, b).unwrap() as f64;
        assert!((got - oracle).abs() <= 1e-5 * oracle);
        assert_eq!(distance(a, b).unwrap(), distance(b, a).unwrap());
    }

    #[test]
    fn store_rejects_bad_data() {
        assert!(VectorStore::<f32>::new(0, vec![]).is_err());
        assert!(VectorStore::new(2, vec![1.0f32, 2.0, 3.0]).is_err());
        assert!(VectorStore::new(1, vec![f32::NAN]).is_err());
        assert!(VectorStore::new(1, vec![f32::INFINITY]).is_err());
    }

    #[test]
    fn knn_tiny() {
        let s = VectorStore::new(1, vec![0.0f32, 1.0, 2.0]).unwrap();
        let r = brute_force_knn(&s, &[0.9], 1).unwrap();
        assert_eq!(r[0].id, 1);
        assert!((r[0].dist - 0.01).abs() < 1e-6);
        let r = brute_force_knn(&s, &[2.0], 1).unwrap();
        assert_eq!((r[0].id, r[0].dist), (2, 0.0));
        assert!(brute_force_knn(&s, &[0.0], 4).is_err());
        assert!(brute_force_knn(&s, &[0.0], 0).is_err());
        assert!(brute_force_knn(&s, &[0.0, 1.0], 1).is_err());
    }

    #[test]
    fn knn_ties_prefer_smaller_id() {
        let s = VectorStore::new(1, vec![1.0f64, -1.0, 1.0, -1.0]).unwrap();
        let ids: Vec<_> = brute_force_knn(&s, &[0.0], 4)
            .unwrap()
            .iter()
            .map(|n| n.id)
            .collect();
        assert_eq!(ids, vec![0, 1, 2, 3]);
    }

    #[test]
    fn knn_matches_full_sort_oracle() {
        let s = gen_vectors(1000, 8, 11);
        let queries = gen_vectors(20, 8, 12);
        for q in queries.rows() {
            let mut oracle: Vec<(f32, u32)> = s
                .rows()
                .enumerate()
                .map(|(i, r)| {
                    let d: f32 = r.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
                    (d, i as u32)
                })
                .collect();
            oracle.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let got = brute_force_knn(&s, q, 10).unwrap();
            let got: Vec<u32> = got.iter().map(|n| n.id).collect();
            let want: Vec<u32> = oracle[..10].iter().map(|p| p.1).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn knn_full_k_is_permutation() {
        let s = gen_vectors(50, 3, 2);
        let r = brute_force_knn(&s, s.row(7), 50).unwrap();
        let mut ids: Vec<u32> = r.iter().map(|n| n.id).collect();
        assert!(r.windows(2).all(|w| w[0].dist <= w[1].dist));
        ids.sort_unstable();
        assert_eq!(ids, (0..50).collect::<Vec<_>>());
    }
}
