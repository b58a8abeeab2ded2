//! Chunked-prefill task graphs, CPU/NPU operator placement and the
//! deterministic two-device pipeline simulator.

use serde::{Deserialize, Serialize};
use thiserror::Error;

mod cost;
mod sim;

pub use cost::{bundled_scenario, CostEntry, CostModel, Scenario};
pub(crate) use sim::queue_key;
pub use sim::{
    assemble_timeline,
    bubble_rate, simulate, simulate_gated, DeviceSummary, DispatchRecord, ScheduledTask,
    StealEvent, Timeline,
};

/// Operators of one transformer layer chunk, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OpKind {
    RmsNormAttn,
    Quantize,
    QProj,
    KProj,
    VProj,
    Dequantize,
    Attention,
    OProj,
    ResidualAdd1,
    RmsNormFfn,
    GateProj,
    UpProj,
    SwiGLU,
    DownProj,
    ResidualAdd2,
}

/// The per-(layer, chunk) operator chain.
pub const OP_CHAIN: [OpKind; 15] = [
    OpKind::RmsNormAttn,
    OpKind::Quantize,
    OpKind::QProj,
    OpKind::KProj,
    OpKind::VProj,
    OpKind::Dequantize,
    OpKind::Attention,
    OpKind::OProj,
    OpKind::ResidualAdd1,
    OpKind::RmsNormFfn,
    OpKind::GateProj,
    OpKind::UpProj,
    OpKind::SwiGLU,
    OpKind::DownProj,
    OpKind::ResidualAdd2,
];

pub const OPS_PER_CHUNK: usize = OP_CHAIN.len();

impl OpKind {
    /// INT8 matmul operators; the only NPU-placed kinds under fine
    /// placement.
    pub fn is_projection(self) -> bool {
        matches!(
            self,
            OpKind::QProj
                | OpKind::KProj
                | OpKind::VProj
                | OpKind::OProj
                | OpKind::GateProj
                | OpKind::UpProj
                | OpKind::DownProj
        )
    }

    pub fn chain_position(self) -> usize {
        OP_CHAIN.iter().position(|&k| k == self).unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Device {
    Cpu,
    Npu,
}

pub type TaskId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: TaskId,
    pub layer: u32,
    pub chunk: u32,
    pub kind: OpKind,
    pub device: Option<Device>,
    pub deps: Vec<TaskId>,
    /// Rank in the level-major topological order (depth, then id); the
    /// static dispatch key.
    pub topo_rank: usize,
}

impl Task {
    pub fn label(&self) -> String {
        format!("L{}.C{}.{:?}", self.layer, self.chunk, self.kind)
    }
}

/// Scheduling policy ladder. Each step keeps the previous ones: fine
/// placement, then position-guided priority, then CPU task stealing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolicyKind {
    BaselineCoarse,
    FinePlacement,
    PlusPriority,
    PlusStealing,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] = [
        PolicyKind::BaselineCoarse,
        PolicyKind::FinePlacement,
        PolicyKind::PlusPriority,
        PolicyKind::PlusStealing,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::BaselineCoarse => "baseline-coarse",
            PolicyKind::FinePlacement => "fine-placement",
            PolicyKind::PlusPriority => "plus-priority",
            PolicyKind::PlusStealing => "plus-stealing",
        }
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, SimError> {
        match s.to_ascii_lowercase().as_str() {
            "baseline-coarse" | "baseline" | "coarse" => Ok(PolicyKind::BaselineCoarse),
            "fine-placement" | "place" | "fine" => Ok(PolicyKind::FinePlacement),
            "plus-priority" | "priority" => Ok(PolicyKind::PlusPriority),
            "plus-stealing" | "steal" | "stealing" => Ok(PolicyKind::PlusStealing),
            other => Err(SimError::BadPolicyName(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedPolicy {
    pub kind: PolicyKind,
    /// NPU queue length above which an idle CPU steals (`PlusStealing`).
    pub steal_threshold: usize,
}

pub const DEFAULT_STEAL_THRESHOLD: usize = 5;

impl SchedPolicy {
    pub fn new(kind: PolicyKind) -> Self {
        Self {
            kind,
            steal_threshold: DEFAULT_STEAL_THRESHOLD,
        }
    }

    pub fn with_threshold(kind: PolicyKind, steal_threshold: usize) -> Self {
        Self {
            kind,
            steal_threshold,
        }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("graph must have at least one layer and one chunk (got {n_layers}x{n_chunks})")]
    EmptyGraph { n_layers: u32, n_chunks: u32 },
    #[error("task {0} has no device; run place_operators first")]
    Unplaced(TaskId),
    #[error("cost model has no entry for ({kind:?}, {device:?})")]
    MissingCost { kind: OpKind, device: Device },
    #[error("cost for ({kind:?}, {device:?}) at chunk {chunk} is not positive")]
    NonPositiveCost {
        kind: OpKind,
        device: Device,
        chunk: u32,
    },
    #[error("steal threshold must be >= 1 (got {0})")]
    BadThreshold(usize),
    #[error("deadlock: {pending} tasks can never become ready (e.g. task {example})")]
    Deadlock { pending: usize, example: TaskId },
    #[error("unknown policy {0:?}")]
    BadPolicyName(String),
    #[error("release vector has {got} entries for {expected} layers")]
    BadReleases { got: usize, expected: usize },
}

/// Dependency DAG of per-chunk, per-layer operators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskGraph {
    pub n_layers: u32,
    pub n_chunks: u32,
    pub tasks: Vec<Task>,
}

impl TaskGraph {
    pub fn task_id(&self, layer: u32, chunk: u32, kind: OpKind) -> TaskId {
        ((layer * self.n_chunks + chunk) as usize) * OPS_PER_CHUNK + kind.chain_position()
    }

    pub fn task(&self, layer: u32, chunk: u32, kind: OpKind) -> &Task {
        &self.tasks[self.task_id(layer, chunk, kind)]
    }
}

/// Builds the chunked-prefill graph: the 15-operator chain per
/// (layer, chunk), causal K/V edges into each attention, and
/// layer-to-layer edges through the final residual add.
pub fn build_prefill_graph(n_layers: u32, n_chunks: u32) -> Result<TaskGraph, SimError> {
    if n_layers == 0 || n_chunks == 0 {
        return Err(SimError::EmptyGraph { n_layers, n_chunks });
    }
    let total = n_layers as usize * n_chunks as usize * OPS_PER_CHUNK;
    let mut tasks = Vec::with_capacity(total);
    let id_of = |l: u32, c: u32, pos: usize| {
        ((l * n_chunks + c) as usize) * OPS_PER_CHUNK + pos
    };

    for layer in 0..n_layers {
        for chunk in 0..n_chunks {
            for (pos, &kind) in OP_CHAIN.iter().enumerate() {
                let mut deps = Vec::new();
                if pos > 0 {
                    deps.push(id_of(layer, chunk, pos - 1));
                } else if layer > 0 {
                    deps.push(id_of(layer - 1, chunk, OPS_PER_CHUNK - 1));
                }
                if kind == OpKind::Attention {
                    // causal: attention over chunk c consumes K/V of all
                    // chunks up to and including c
                    for prev in 0..=chunk {
                        deps.push(id_of(layer, prev, OpKind::KProj.chain_position()));
                        deps.push(id_of(layer, prev, OpKind::VProj.chain_position()));
                    }
                }
                tasks.push(Task {
                    id: id_of(layer, chunk, pos),
                    layer,
                    chunk,
                    kind,
                    device: None,
                    deps,
                    topo_rank: 0,
                });
            }
        }
    }

    // Longest-path depth; construction order is topological (every dep
    // has a smaller id), so one forward pass suffices.
    let mut depth = vec![0usize; total];
    for t in &tasks {
        let d = t
            .deps
            .iter()
            .map(|&d| {
                debug_assert!(d < t.id);
                depth[d] + 1
            })
            .max()
            .unwrap_or(0);
        depth[t.id] = d;
    }
    let mut order: Vec<TaskId> = (0..total).collect();
    order.sort_by_key(|&id| (depth[id], id));
    for (rank, &id) in order.iter().enumerate() {
        tasks[id].topo_rank = rank;
    }

    Ok(TaskGraph {
        n_layers,
        n_chunks,
        tasks,
    })
}

/// Assigns devices by kind. Fine placement and its refinements put the
/// projection matmuls on the NPU and everything else on the CPU; the
/// coarse baseline keeps everything on the NPU except attention.
pub fn place_operators(graph: &mut TaskGraph, policy: PolicyKind) {
    for t in &mut graph.tasks {
        let device = match policy {
            PolicyKind::BaselineCoarse => {
                if t.kind == OpKind::Attention {
                    Device::Cpu
                } else {
                    Device::Npu
                }
            }
            _ => {
                if t.kind.is_projection() {
                    Device::Npu
                } else {
                    Device::Cpu
                }
            }
        };
        t.device = Some(device);
    }
}
