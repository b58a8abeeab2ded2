//! Cold-start orchestration: overlapped layer loading, unpacking and
//! prefill execution, in a virtual-clock simulation or with real worker
//! threads.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pack::PackError;
use crate::pipeline::{CostModel, PolicyKind, SimError, Timeline, DEFAULT_STEAL_THRESHOLD};
use crate::quant::QuantError;
use crate::tensorstore::{ArchiveError, EfpkError};

mod real;
mod sim;
mod synth;

pub use real::run_coldstart_real;
pub use sim::run_coldstart_simulated;
pub use synth::{generate_synthetic_model, SynthSpec};

/// Depth of the hand-off queues between pipeline stages; keeps at most
/// about two layers of loaded or unpacked weights in flight.
pub const HANDOFF_QUEUE_DEPTH: usize = 2;

#[derive(Debug, Error)]
pub enum ColdStartError {
    #[error(transparent)]
    Efpk(#[from] EfpkError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Pack(#[from] PackError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid cold-start config: {0}")]
    BadConfig(String),
    #[error("simulated mode requires a cost model")]
    MissingCostModel,
    #[error("worker thread failed: {0}")]
    WorkerPanic(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecutionMode {
    Simulated,
    Real,
}

/// Per-layer stage cost: one value for all layers or one per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerLayerCost {
    Uniform(f64),
    PerLayer(Vec<f64>),
}

impl PerLayerCost {
    pub fn at(&self, layer: usize) -> Option<f64> {
        match self {
            PerLayerCost::Uniform(v) => Some(*v),
            PerLayerCost::PerLayer(v) => v.get(layer).copied(),
        }
    }

    fn validate(&self, n_layers: usize, what: &str) -> Result<(), ColdStartError> {
        let ok = match self {
            PerLayerCost::Uniform(v) => *v > 0.0,
            PerLayerCost::PerLayer(v) => v.len() == n_layers && v.iter().all(|&x| x > 0.0),
        };
        if ok {
            Ok(())
        } else {
            Err(ColdStartError::BadConfig(format!(
                "{what} costs must be positive and cover all {n_layers} layers"
            )))
        }
    }
}

/// Compute stage model: a scalar per-layer cost on a single executor, or
/// the full two-device task-graph simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComputeCost {
    PerLayer(PerLayerCost),
    TaskGraph(CostModel),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColdStartCostModel {
    pub load_per_layer: PerLayerCost,
    pub unpack_per_layer: PerLayerCost,
    pub compute: ComputeCost,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColdStartConfig {
    pub efpk: PathBuf,
    pub prompt_length: u32,
    pub chunk_length: u32,
    #[serde(default = "default_loader_workers")]
    pub loader_workers: usize,
    #[serde(default = "default_unpack_workers")]
    pub unpack_workers: usize,
    pub mode: ExecutionMode,
    #[serde(default = "default_policy")]
    pub policy: PolicyKind,
    #[serde(default = "default_threshold")]
    pub steal_threshold: usize,
    /// Required in simulated mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost_model: Option<ColdStartCostModel>,
    /// Seed for the synthetic activations driven through real mode.
    #[serde(default)]
    pub seed: u64,
}

fn default_loader_workers() -> usize {
    2
}
fn default_unpack_workers() -> usize {
    1
}
fn default_policy() -> PolicyKind {
    PolicyKind::PlusStealing
}
fn default_threshold() -> usize {
    DEFAULT_STEAL_THRESHOLD
}

impl ColdStartConfig {
    pub fn validate(&self) -> Result<(), ColdStartError> {
        if self.loader_workers == 0 || self.unpack_workers == 0 {
            return Err(ColdStartError::BadConfig(
                "worker counts must be at least 1".into(),
            ));
        }
        if self.prompt_length == 0 || self.chunk_length == 0 {
            return Err(ColdStartError::BadConfig(
                "prompt and chunk lengths must be positive".into(),
            ));
        }
        if self.chunk_length > self.prompt_length {
            return Err(ColdStartError::BadConfig(format!(
                "chunk length {} exceeds prompt length {}",
                self.chunk_length, self.prompt_length
            )));
        }
        if self.mode == ExecutionMode::Simulated && self.cost_model.is_none() {
            return Err(ColdStartError::MissingCostModel);
        }
        Ok(())
    }

    pub fn n_chunks(&self) -> u32 {
        self.prompt_length.div_ceil(self.chunk_length)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageInterval {
    pub start: f64,
    pub end: f64,
}

impl StageInterval {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: u32,
    pub load: StageInterval,
    pub unpack: StageInterval,
    pub compute: StageInterval,
    /// Worker indices, for Gantt rows.
    pub loader: usize,
    pub unpacker: usize,
}

/// Stage breakdown of one cold start. Times are virtual units in
/// simulated mode and seconds in real mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColdStartReport {
    pub mode: ExecutionMode,
    pub policy: PolicyKind,
    pub n_layers: u32,
    pub n_chunks: u32,
    pub layers: Vec<LayerReport>,
    /// End of the first token's final layer compute.
    pub ttft: f64,
    /// Summed busy durations per stage.
    pub load_total: f64,
    pub unpack_total: f64,
    pub compute_total: f64,
    /// `1 - ttft / (load_total + unpack_total + compute_total)`.
    pub overlap_ratio: f64,
    /// Detailed prefill timeline (task-graph compute and real mode).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prefill: Option<Timeline>,
}

impl ColdStartReport {
    /// Gantt CSV covering all three stages, compatible with the
    /// pipeline timeline export.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,device,start,end\n");
        for l in &self.layers {
            out.push_str(&format!(
                "layer{}/load,loader{},{},{}\n",
                l.layer, l.loader, l.load.start, l.load.end
            ));
            out.push_str(&format!(
                "layer{}/unpack,unpacker{},{},{}\n",
                l.layer, l.unpacker, l.unpack.start, l.unpack.end
            ));
        }
        match &self.prefill {
            Some(tl) => {
                for t in &tl.tasks {
                    let device = match t.device {
                        crate::pipeline::Device::Cpu => "cpu",
                        crate::pipeline::Device::Npu => "npu",
                    };
                    out.push_str(&format!("{},{},{},{}\n", t.label, device, t.start, t.end));
                }
            }
            None => {
                for l in &self.layers {
                    out.push_str(&format!(
                        "layer{}/compute,executor,{},{}\n",
                        l.layer, l.compute.start, l.compute.end
                    ));
                }
            }
        }
        out
    }
}

/// Runs a cold start in the mode selected by the config.
pub fn run_coldstart(config: &ColdStartConfig) -> Result<ColdStartReport, ColdStartError> {
    config.validate()?;
    match config.mode {
        ExecutionMode::Simulated => run_coldstart_simulated(config),
        ExecutionMode::Real => run_coldstart_real(config),
    }
}
