//! Little-endian binary formats.
//!
//! Vectors: a sequence of records, each a `u32` dimension followed by that
//! many `f32` values. Every record must share the same dimension.
//!
//! Graph: a 16-byte header of two `u64` (node count, degree) followed by
//! `count * degree` `u32` ids in row-major order.

use std::path::Path;

use super::{NeighborGraph, VectorStore};
use crate::error::{Error, Result};
use crate::fsutil;

pub fn encode_vectors(store: &VectorStore<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(store.count() * (4 + 4 * store.dim()));
    for row in store.rows() {
        out.extend_from_slice(&(store.dim() as u32).to_le_bytes());
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_vectors(bytes: &[u8]) -> std::result::Result<VectorStore<f32>, String> {
    let mut dim: Option<usize> = None;
    let mut data = Vec::new();
    let mut pos = 0usize;
    let mut record = 0usize;
    while pos < bytes.len() {
        let header = bytes
            .get(pos..pos + 4)
            .ok_or_else(|| format!("record {record}: truncated dimension header"))?;
        let d = u32::from_le_bytes(header.try_into().unwrap()) as usize;
        pos += 4;
        match dim {
            None if d == 0 => return Err("record 0: dimension is 0".into()),
            None => dim = Some(d),
            Some(prev) if prev != d => {
                return Err(format!("record {record}: dimension {d} differs from {prev}"))
            }
            _ => {}
        }
        let body = bytes
            .get(pos..pos + 4 * d)
            .ok_or_else(|| format!("record {record}: truncated body"))?;
        data.extend(
            body.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap())),
        );
        pos += 4 * d;
        record += 1;
    }
    let dim = dim.ok_or("file contains no records")?;
    VectorStore::new(dim, data).map_err(|e| e.to_string())
}

pub fn encode_graph(graph: &NeighborGraph) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * graph.as_flat().len());
    out.extend_from_slice(&(graph.node_count() as u64).to_le_bytes());
    out.extend_from_slice(&(graph.degree() as u64).to_le_bytes());
    for id in graph.as_flat() {
        out.extend_from_slice(&id.to_le_bytes());
    }
    out
}

pub fn decode_graph(bytes: &[u8]) -> std::result::Result<NeighborGraph, String> {
    if bytes.len() < 16 {
        return Err("truncated header".into());
    }
    let n = u64::from_le_bytes(bytes[0..8].try_into().unwrap());
    let degree = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let expected = n
        .checked_mul(degree)
        .and_then(|c| c.checked_mul(4))
        .ok_or("header overflows")?;
    if (bytes.len() - 16) as u64 != expected {
        return Err(format!(
            "body is {} bytes, header implies {expected}",
            bytes.len() - 16
        ));
    }
    let ids = bytes[16..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    NeighborGraph::from_flat(degree as usize, ids).map_err(|e| e.to_string())
}

pub fn read_vectors(path: impl AsRef<Path>) -> Result<VectorStore<f32>> {
    let path = path.as_ref();
    decode_vectors(&fsutil::read(path)?).map_err(|msg| Error::Format {
        path: path.into(),
        msg,
    })
}

pub fn write_vectors(path: impl AsRef<Path>, store: &VectorStore<f32>) -> Result<()> {
    fsutil::write_atomic(path, &encode_vectors(store))
}

pub fn read_graph(path: impl AsRef<Path>) -> Result<NeighborGraph> {
    let path = path.as_ref();
    decode_graph(&fsutil::read(path)?).map_err(|msg| Error::Format {
        path: path.into(),
        msg,
    })
}

pub fn write_graph(path: impl AsRef<Path>, graph: &NeighborGraph) -> Result<()> {
    fsutil::write_atomic(path, &encode_graph(graph))
}
