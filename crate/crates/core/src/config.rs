//! Run configuration: one TOML file with a section per module.
//!
//! Absent keys take their defaults, unknown keys are rejected, and every
//! module invariant is checked at load. [`RunConfig::resolved`] renders the
//! fully defaulted view that is echoed next to each run's outputs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ann_graph::METRIC_L2SQ;
use crate::engine::EngineConfig;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::roofline::{Stage, StageRooflineParams};
use crate::scheduler::SchedulerConfig;
use crate::sim::{LatencyModel, SimConfig, SimSetup, StageRooflines};
use crate::workload::WorkloadSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IndexConfig {
    pub metric: String,
    pub degree: usize,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            metric: METRIC_L2SQ.to_string(),
            degree: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RooflineSpec {
    pub ai: f64,
    pub mem_bw: f64,
    pub peak_flops: f64,
    pub x_sat: f64,
    pub alpha: f64,
}

impl RooflineSpec {
    pub fn preset(stage: Stage) -> Self {
        let p = StageRooflineParams::<f64>::preset(stage);
        Self {
            ai: p.ai(),
            mem_bw: p.mem_bw(),
            peak_flops: p.peak_flops(),
            x_sat: p.x_sat(),
            alpha: p.alpha(),
        }
    }

    pub fn params(&self, stage: Stage) -> Result<StageRooflineParams<f64>> {
        StageRooflineParams::new(stage, self.ai, self.mem_bw, self.peak_flops, self.x_sat, self.alpha).map_err(|e| match e {
            Error::ParamDomain { name, expected, value } => {
                Error::config(format!("roofline.{stage}.{name}"), format!("{value} out of domain ({expected})"))
            }
            other => other,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RooflineSection {
    pub prefill: RooflineSpec,
    pub decode: RooflineSpec,
    pub ann: RooflineSpec,
}

impl Default for RooflineSection {
    fn default() -> Self {
        Self {
            prefill: RooflineSpec::preset(Stage::Prefill),
            decode: RooflineSpec::preset(Stage::Decode),
            ann: RooflineSpec::preset(Stage::Ann),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub index: IndexConfig,
    pub engine: EngineConfig,
    pub scheduler: SchedulerConfig,
    pub latency: LatencyModel,
    pub sim: SimConfig,
    pub roofline: RooflineSection,
    pub workload: WorkloadSpec,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| toml_error(text, &e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fsutil::read(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Format {
            path: path.to_path_buf(),
            msg: "config is not valid UTF-8".into(),
        })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.index.metric != METRIC_L2SQ {
            return Err(Error::config(
                "index.metric",
                format!("unsupported metric `{}` (only `{METRIC_L2SQ}`)", self.index.metric),
            ));
        }
        if self.index.degree == 0 || self.index.degree >= self.workload.n_db {
            return Err(Error::config("index.degree", "must satisfy 1 <= degree < workload.n_db"));
        }
        self.workload.validate()?;
        self.rooflines()?;
        self.setup().map(|_| ())
    }

    pub fn rooflines(&self) -> Result<StageRooflines> {
        Ok(StageRooflines {
            prefill: self.roofline.prefill.params(Stage::Prefill)?,
            decode: self.roofline.decode.params(Stage::Decode)?,
            ann: self.roofline.ann.params(Stage::Ann)?,
        })
    }

    pub fn setup(&self) -> Result<SimSetup> {
        let setup = SimSetup {
            latency: self.latency.clone(),
            scheduler: self.scheduler.clone(),
            engine: self.engine.clone(),
            sim: self.sim.clone(),
            roofline: self.rooflines()?,
        };
        setup.validate()?;
        Ok(setup)
    }

    /// Fully defaulted TOML; parsing it back yields an equal config.
    pub fn resolved(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }
}

/// Converts a TOML decode error into a config error naming the dotted key.
fn toml_error(text: &str, err: &toml::de::Error) -> Error {
    let msg = err.message().to_string();
    let section = err
        .span()
        .map(|span| enclosing_table(text, span.start))
        .unwrap_or_default();
    let key = if let Some(field) = between(&msg, "unknown field `", "`") {
        field.to_string()
    } else if let Some(field) = between(&msg, "missing field `", "`") {
        field.to_string()
    } else {
        err.span()
            .and_then(|span| key_at(text, span.start))
            .unwrap_or_default()
    };
    let dotted = match (section.is_empty(), key.is_empty()) {
        (true, true) => "<document>".to_string(),
        (true, false) => key,
        (false, true) => section,
        (false, false) => format!("{section}.{key}"),
    };
    Error::config(dotted, msg)
}

fn between<'a>(s: &'a str, open: &str, close: &str) -> Option<&'a str> {
    let start = s.find(open)? + open.len();
    let len = s[start..].find(close)?;
    Some(&s[start..start + len])
}

/// Name of the `[table]` header in force at byte offset `pos`.
fn enclosing_table(text: &str, pos: usize) -> String {
    let mut table = String::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        if offset > pos {
            break;
        }
        let t = line.trim();
        if t.starts_with('[') && !t.starts_with("[[") {
            if let Some(end) = t.find(']') {
                table = t[1..end].trim().to_string();
            }
        }
        offset += line.len();
    }
    table
}

/// The key of the `key = value` line containing byte offset `pos`.
fn key_at(text: &str, pos: usize) -> Option<String> {
    let start = text[..pos.min(text.len())].rfind('\n').map_or(0, |i| i + 1);
    let line = text[start..].lines().next()?;
    let (key, _) = line.split_once('=')?;
    let key = key.trim();
    (!key.is_empty() && !key.starts_with('[')).then(|| key.to_string())
}
