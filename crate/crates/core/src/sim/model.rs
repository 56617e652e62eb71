//! Stage cost model. Times are milliseconds, bandwidths bytes per second.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::engine::RequestStage;
use crate::error::{Error, Result};
use crate::roofline::StageRooflineParams;

const MS_PER_S: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// A vector GPU in every LLM server; all retrievals stay intra-node.
    Coupled,
    /// Vector GPUs beside prefill only; decode retrieves over the network.
    PrefillColocated,
    /// Independent vector pool reached over the network by both stages.
    Pooled,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [
        Architecture::Coupled,
        Architecture::PrefillColocated,
        Architecture::Pooled,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::Coupled => "coupled",
            Architecture::PrefillColocated => "prefill_colocated",
            Architecture::Pooled => "pooled",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coupled" => Ok(Architecture::Coupled),
            "prefill-coloc" | "prefill_coloc" | "prefill_colocated" | "prefill-colocated" => {
                Ok(Architecture::PrefillColocated)
            }
            "pooled" => Ok(Architecture::Pooled),
            other => Err(Error::input(format!(
                "unknown architecture `{other}` (expected coupled|prefill-coloc|pooled)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatencyModel {
    pub intra_node_rtt: f64,
    pub network_rtt: f64,
    pub intra_node_bw: f64,
    pub network_bw: f64,
    pub tp_collective_per_layer: f64,
    /// Per decode step.
    pub ep_dispatch_local: f64,
    pub ep_dispatch_remote: f64,
    pub contention_factor: f64,
    pub kv_link_capacity: f64,
    /// Bytes returned per retrieval.
    pub retrieval_payload: f64,
    /// Bytes sent per retrieval.
    pub query_payload: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            intra_node_rtt: 0.002,
            network_rtt: 0.02,
            intra_node_bw: 4.5e11,
            network_bw: 5.0e10,
            tp_collective_per_layer: 0.02,
            ep_dispatch_local: 0.3,
            ep_dispatch_remote: 0.6,
            contention_factor: 1.15,
            kv_link_capacity: 2.5e10,
            retrieval_payload: 4096.0,
            query_payload: 128.0,
        }
    }
}

impl LatencyModel {
    /// Network parameters set to the intra-node ones, no contention and equal
    /// EP costs: the three architectures become indistinguishable.
    pub fn degenerate(&self) -> Self {
        Self {
            network_rtt: self.intra_node_rtt,
            network_bw: self.intra_node_bw,
            contention_factor: 1.0,
            ep_dispatch_remote: self.ep_dispatch_local,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::config(format!("latency.{key}"), msg));
        for (key, v) in [
            ("intra_node_rtt", self.intra_node_rtt),
            ("network_rtt", self.network_rtt),
            ("tp_collective_per_layer", self.tp_collective_per_layer),
            ("ep_dispatch_local", self.ep_dispatch_local),
            ("ep_dispatch_remote", self.ep_dispatch_remote),
            ("retrieval_payload", self.retrieval_payload),
            ("query_payload", self.query_payload),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(key, "must be finite and >= 0");
            }
        }
        for (key, v) in [
            ("intra_node_bw", self.intra_node_bw),
            ("network_bw", self.network_bw),
            ("kv_link_capacity", self.kv_link_capacity),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(key, "must be finite and > 0");
            }
        }
        if !(self.contention_factor >= 1.0 && self.contention_factor.is_finite()) {
            return bad("contention_factor", "must be >= 1");
        }
        if self.intra_node_rtt > self.network_rtt {
            return bad("network_rtt", "must be >= intra_node_rtt");
        }
        Ok(())
    }

    pub fn kv_transfer_time(&self, bytes: f64) -> f64 {
        bytes / self.kv_link_capacity * MS_PER_S
    }
}

/// One-way times of a retrieval: query dispatch and result return.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathLatency {
    pub dispatch: f64,
    pub ret: f64,
}

impl PathLatency {
    pub fn round_trip(&self) -> f64 {
        self.dispatch + self.ret
    }
}

pub fn retrieval_path_latency(arch: Architecture, stage: RequestStage, lm: &LatencyModel) -> PathLatency {
    let intra = match (arch, stage) {
        (Architecture::Coupled, _) => true,
        (Architecture::PrefillColocated, RequestStage::Prefill) => true,
        (Architecture::PrefillColocated, RequestStage::Decode) => false,
        (Architecture::Pooled, _) => false,
    };
    let (rtt, bw) = if intra {
        (lm.intra_node_rtt, lm.intra_node_bw)
    } else {
        (lm.network_rtt, lm.network_bw)
    };
    PathLatency {
        dispatch: rtt / 2.0 + lm.query_payload / bw * MS_PER_S,
        ret: rtt / 2.0 + lm.retrieval_payload / bw * MS_PER_S,
    }
}

/// `prompt * flops_per_token / (peak * u(occupancy)) + layers * tp_collective`.
/// Occupancy 0 is treated as 1.
pub fn prefill_duration(
    prompt_len: u32,
    occupancy: usize,
    roofline: &StageRooflineParams<f64>,
    base_flops_per_token: f64,
    layers: u32,
    tp_collective_per_layer: f64,
) -> Result<f64> {
    if prompt_len == 0 {
        return Err(Error::input("prompt_len must be >= 1"));
    }
    let u = roofline.utilization(occupancy.max(1) as f64)?;
    let compute = f64::from(prompt_len) * base_flops_per_token / (roofline.peak_flops() * u) * MS_PER_S;
    Ok(compute + f64::from(layers) * tp_collective_per_layer)
}

/// Memory-bound token time scaled so the plateau gives `bytes / mem_bw`,
/// plus the EP dispatch term; multiplied by the contention factor when a
/// co-located vector GPU is searching.
pub fn decode_token_duration(
    occupancy: usize,
    roofline: &StageRooflineParams<f64>,
    bytes_per_token: f64,
    arch: Architecture,
    vector_gpu_active: bool,
    lm: &LatencyModel,
) -> f64 {
    let u = roofline
        .utilization(occupancy.max(1) as f64)
        .expect("occupancy is finite and positive");
    let base = bytes_per_token / (roofline.mem_bw() * u / roofline.u_max()) * MS_PER_S;
    let ep = match arch {
        Architecture::Coupled => lm.ep_dispatch_remote,
        _ => lm.ep_dispatch_local,
    };
    let t = base + ep;
    if arch == Architecture::Coupled && vector_gpu_active {
        t * lm.contention_factor
    } else {
        t
    }
}

/// Time for one fixed-shape distance batch at `queries` concurrent searches.
pub fn ann_batch_time(roofline: &StageRooflineParams<f64>, batch_flops: f64, queries: usize) -> f64 {
    let u = roofline
        .utilization(queries.max(1) as f64)
        .expect("query count is finite and positive");
    batch_flops / (roofline.peak_flops() * u) * MS_PER_S
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::roofline::Stage;

    fn pre() -> StageRooflineParams<f64> {
        StageRooflineParams::preset(Stage::Prefill)
    }

    fn dec() -> StageRooflineParams<f64> {
        StageRooflineParams::preset(Stage::Decode)
    }

    #[test]
    fn prefill_examples() {
        let r = pre();
        let sat = r.saturation_point().ceil() as usize;
        let at_sat = prefill_duration(100, sat, &r, 1e9, 0, 0.0).unwrap();
        let oracle = 100.0 * 1e9 / (1.25e14 * (200.0 * 6.0e11 / 1.25e14)) * 1e3;
        assert!((at_sat - oracle).abs() < 1e-12 * oracle);
        assert_eq!(prefill_duration(100, sat * 4, &r, 1e9, 0, 0.0).unwrap(), at_sat);

        let d1 = prefill_duration(100, 3, &r, 1e9, 48, 0.0).unwrap();
        let d2 = prefill_duration(200, 3, &r, 1e9, 48, 0.0).unwrap();
        assert!((d2 - 2.0 * d1).abs() < 1e-12 * d2);

        let with_tp = prefill_duration(100, 3, &r, 1e9, 10, 0.5).unwrap();
        assert!((with_tp - d1 - 5.0).abs() < 1e-9);
        assert_eq!(
            prefill_duration(100, 0, &r, 1e9, 0, 0.0).unwrap(),
            prefill_duration(100, 1, &r, 1e9, 0, 0.0).unwrap()
        );
        assert!(prefill_duration(0, 1, &r, 1e9, 0, 0.0).is_err());
    }

    #[test]
    fn decode_examples() {
        let lm = LatencyModel::default();
        let r = dec();
        let plateau = r.saturation_point().ceil() as usize + 1;
        let pooled = decode_token_duration(plateau, &r, 6e9, Architecture::Pooled, true, &lm);
        assert!((pooled - (6e9 / 6.0e11 * 1e3 + lm.ep_dispatch_local)).abs() < 1e-12);

        let neutral = LatencyModel {
            contention_factor: 1.0,
            ..lm.clone()
        };
        assert_eq!(
            decode_token_duration(4, &r, 6e9, Architecture::Coupled, true, &neutral),
            decode_token_duration(4, &r, 6e9, Architecture::Coupled, false, &neutral)
        );
        let coupled = decode_token_duration(4, &r, 6e9, Architecture::Coupled, false, &lm);
        assert!(coupled > decode_token_duration(4, &r, 6e9, Architecture::Pooled, false, &lm));
        let busy = decode_token_duration(4, &r, 6e9, Architecture::Coupled, true, &lm);
        assert!((busy - coupled * 1.15).abs() < 1e-12);
    }

    #[test]
    fn path_examples() {
        let lm = LatencyModel::default();
        let p = retrieval_path_latency(Architecture::Pooled, RequestStage::Prefill, &lm);
        assert_eq!(p.dispatch, lm.network_rtt / 2.0 + lm.query_payload / lm.network_bw * 1e3);
        let c = retrieval_path_latency(Architecture::Coupled, RequestStage::Decode, &lm);
        assert_eq!(c.dispatch, lm.intra_node_rtt / 2.0 + lm.query_payload / lm.intra_node_bw * 1e3);
        let cp = retrieval_path_latency(Architecture::PrefillColocated, RequestStage::Prefill, &lm);
        let cd = retrieval_path_latency(Architecture::PrefillColocated, RequestStage::Decode, &lm);
        assert!(cp.round_trip() < cd.round_trip());
        assert_eq!(cd, retrieval_path_latency(Architecture::Pooled, RequestStage::Decode, &lm));
    }

    #[test]
    fn degenerate_model_equalizes_paths() {
        let lm = LatencyModel::default().degenerate();
        lm.validate().unwrap();
        for stage in [RequestStage::Prefill, RequestStage::Decode] {
            let c = retrieval_path_latency(Architecture::Coupled, stage, &lm);
            for arch in Architecture::ALL {
                assert_eq!(retrieval_path_latency(arch, stage, &lm), c);
            }
        }
    }

    #[test]
    fn validation() {
        assert!(LatencyModel::default().validate().is_ok());
        let bad = LatencyModel {
            contention_factor: 0.9,
            ..LatencyModel::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { key, .. }) if key == "latency.contention_factor"));
        let bad = LatencyModel {
            network_rtt: 0.001,
            ..LatencyModel::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!("prefill-coloc".parse::<Architecture>().unwrap(), Architecture::PrefillColocated);
        assert!("mesh".parse::<Architecture>().is_err());
    }
}
