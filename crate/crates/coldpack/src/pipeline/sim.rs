//! Deterministic two-device discrete-event simulation.
//!
//! One task in flight per device. Ready tasks wait in their device's
//! queue, ordered by the static topological rank (baseline and fine
//! placement) or by the position-guided key `(chunk, topo_rank)`
//! (priority and stealing). Under `PlusStealing`, an idle CPU whose own
//! queue is empty takes the head of the NPU queue whenever that queue is
//! longer than the steal threshold, paying the CPU cost of the task.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use super::{
    CostModel, Device, OpKind, PolicyKind, SchedPolicy, SimError, TaskGraph, TaskId,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduledTask {
    pub task: TaskId,
    pub label: String,
    pub layer: u32,
    pub chunk: u32,
    pub kind: OpKind,
    pub device: Device,
    pub stolen: bool,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSummary {
    pub device: Device,
    pub task_count: usize,
    pub busy: f64,
    pub span_start: f64,
    pub span_end: f64,
    pub idle_within_span: f64,
    pub bubble_rate: f64,
    /// Set when the device executed nothing; the zero bubble rate is then
    /// a convention, not a measurement.
    pub no_tasks: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StealEvent {
    pub time: f64,
    pub task: TaskId,
    /// NPU queue length at the instant of the steal, before removal.
    pub npu_queue_len: usize,
}

/// One dispatch decision with the same-device queue left behind;
/// retained for scheduling-invariant checks, not serialized.
#[derive(Debug, Clone, PartialEq)]
pub struct DispatchRecord {
    pub time: f64,
    pub task: TaskId,
    pub device: Device,
    pub stolen: bool,
    pub queued_after: Vec<TaskId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub policy: PolicyKind,
    pub steal_threshold: usize,
    pub makespan: f64,
    /// All executions in dispatch order.
    pub tasks: Vec<ScheduledTask>,
    pub devices: Vec<DeviceSummary>,
    pub steals: Vec<StealEvent>,
    #[serde(skip)]
    pub dispatches: Vec<DispatchRecord>,
}

impl Timeline {
    pub fn device_summary(&self, device: Device) -> Option<&DeviceSummary> {
        self.devices.iter().find(|d| d.device == device)
    }

    /// CSV export: `task,device,start,end`, one row per execution.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,device,start,end\n");
        for t in &self.tasks {
            let device = match t.device {
                Device::Cpu => "cpu",
                Device::Npu => "npu",
            };
            out.push_str(&format!("{},{},{},{}\n", t.label, device, t.start, t.end));
        }
        out
    }
}

/// Idle time within a device's busy span divided by that span. Devices
/// that executed nothing report 0.
pub fn bubble_rate(timeline: &Timeline, device: Device) -> f64 {
    timeline
        .device_summary(device)
        .map_or(0.0, |d| d.bubble_rate)
}

pub(crate) fn queue_key(policy: PolicyKind, chunk: u32, topo_rank: usize) -> (u32, usize) {
    match policy {
        PolicyKind::BaselineCoarse | PolicyKind::FinePlacement => (0, topo_rank),
        PolicyKind::PlusPriority | PolicyKind::PlusStealing => (chunk, topo_rank),
    }
}

pub(crate) const DEVICES: [Device; 2] = [Device::Cpu, Device::Npu];

pub(crate) fn device_index(d: Device) -> usize {
    match d {
        Device::Cpu => 0,
        Device::Npu => 1,
    }
}

/// Assembles a timeline from externally measured executions (real mode).
pub fn assemble_timeline(
    policy: PolicyKind,
    steal_threshold: usize,
    mut tasks: Vec<ScheduledTask>,
    steals: Vec<StealEvent>,
) -> Timeline {
    tasks.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.task.cmp(&b.task)));
    let makespan = tasks.iter().fold(0.0f64, |m, t| m.max(t.end));
    let devices = DEVICES
        .iter()
        .map(|&dev| summarize_device(dev, &tasks))
        .collect();
    Timeline {
        policy,
        steal_threshold,
        makespan,
        tasks,
        devices,
        steals,
        dispatches: Vec::new(),
    }
}

/// Simulates a placed graph with all layers available from time zero.
pub fn simulate(
    graph: &TaskGraph,
    cost_model: &CostModel,
    policy: SchedPolicy,
) -> Result<Timeline, SimError> {
    simulate_gated(graph, cost_model, policy, &vec![0.0; graph.n_layers as usize])
}

/// Simulates a placed graph where no task of layer `l` may start before
/// `releases[l]` (the cold-start unpack gate).
pub fn simulate_gated(
    graph: &TaskGraph,
    cost_model: &CostModel,
    policy: SchedPolicy,
    releases: &[f64],
) -> Result<Timeline, SimError> {
    if policy.steal_threshold == 0 {
        return Err(SimError::BadThreshold(0));
    }
    if releases.len() != graph.n_layers as usize {
        return Err(SimError::BadReleases {
            got: releases.len(),
            expected: graph.n_layers as usize,
        });
    }
    let n = graph.tasks.len();

    // Pre-validate placement and every cost the run can need.
    let mut cost_on_device = vec![0.0f64; n];
    let mut cpu_cost = vec![0.0f64; n];
    for t in &graph.tasks {
        let device = t.device.ok_or(SimError::Unplaced(t.id))?;
        cost_on_device[t.id] = cost_model.cost(t.kind, device, t.chunk)?;
        cpu_cost[t.id] = if policy.kind == PolicyKind::PlusStealing {
            cost_model.cost(t.kind, Device::Cpu, t.chunk)?
        } else if device == Device::Cpu {
            cost_on_device[t.id]
        } else {
            0.0
        };
    }

    let mut indeg = vec![0usize; n];
    let mut children: Vec<Vec<TaskId>> = vec![Vec::new(); n];
    for t in &graph.tasks {
        indeg[t.id] = t.deps.len();
        for &d in &t.deps {
            children[d].push(t.id);
        }
    }

    // queues[device] ordered by the policy key
    let mut queues: [BTreeSet<(u32, usize, TaskId)>; 2] = [BTreeSet::new(), BTreeSet::new()];
    // dependency-free tasks of layers whose release time is still ahead
    let mut gated: Vec<Vec<TaskId>> = vec![Vec::new(); graph.n_layers as usize];
    let mut released = vec![false; graph.n_layers as usize];
    let mut in_flight: [Option<(f64, TaskId)>; 2] = [None, None];

    let mut clock = 0.0f64;
    let mut done = 0usize;
    let mut tasks_out: Vec<ScheduledTask> = Vec::with_capacity(n);
    let mut ends = vec![0.0f64; n];
    let mut steals = Vec::new();
    let mut dispatches = Vec::new();

    let enqueue = |queues: &mut [BTreeSet<(u32, usize, TaskId)>; 2],
                   gated: &mut Vec<Vec<TaskId>>,
                   released: &[bool],
                   graph: &TaskGraph,
                   id: TaskId| {
        let t = &graph.tasks[id];
        if released[t.layer as usize] {
            let key = queue_key(policy.kind, t.chunk, t.topo_rank);
            queues[device_index(t.device.unwrap())].insert((key.0, key.1, id));
        } else {
            gated[t.layer as usize].push(id);
        }
    };

    // release layers whose gate time has passed
    let release_up_to = |clock: f64,
                         queues: &mut [BTreeSet<(u32, usize, TaskId)>; 2],
                         gated: &mut Vec<Vec<TaskId>>,
                         released: &mut Vec<bool>| {
        for l in 0..releases.len() {
            if !released[l] && releases[l] <= clock {
                released[l] = true;
                let mut pending = std::mem::take(&mut gated[l]);
                pending.sort_unstable();
                for id in pending {
                    let t = &graph.tasks[id];
                    let key = queue_key(policy.kind, t.chunk, t.topo_rank);
                    queues[device_index(t.device.unwrap())].insert((key.0, key.1, id));
                }
            }
        }
    };

    release_up_to(clock, &mut queues, &mut gated, &mut released);
    for id in 0..n {
        if indeg[id] == 0 {
            enqueue(&mut queues, &mut gated, &released, graph, id);
        }
    }

    loop {
        // dispatch own queues first: no device idles while its queue is
        // non-empty
        for dev in DEVICES {
            let di = device_index(dev);
            if in_flight[di].is_none() {
                if let Some(&entry) = queues[di].iter().next() {
                    queues[di].remove(&entry);
                    let id = entry.2;
                    let cost = cost_on_device[id];
                    start_task(
                        graph, id, dev, false, clock, cost, &mut in_flight, &mut tasks_out,
                        &mut dispatches, &queues[di],
                    );
                }
            }
        }

        // steal: idle CPU, empty CPU queue, NPU queue beyond the threshold
        if policy.kind == PolicyKind::PlusStealing
            && in_flight[device_index(Device::Cpu)].is_none()
            && queues[device_index(Device::Cpu)].is_empty()
        {
            let npu_len = queues[device_index(Device::Npu)].len();
            if npu_len > policy.steal_threshold {
                let entry = *queues[device_index(Device::Npu)].iter().next().unwrap();
                queues[device_index(Device::Npu)].remove(&entry);
                let id = entry.2;
                steals.push(StealEvent {
                    time: clock,
                    task: id,
                    npu_queue_len: npu_len,
                });
                let cost = cpu_cost[id];
                start_task(
                    graph, id, Device::Cpu, true, clock, cost, &mut in_flight, &mut tasks_out,
                    &mut dispatches, &queues[device_index(Device::Cpu)],
                );
            }
        }

        if done == n {
            break;
        }

        // advance the clock to the next completion or layer release
        let mut next = f64::INFINITY;
        for slot in in_flight.iter().flatten() {
            next = next.min(slot.0);
        }
        for l in 0..releases.len() {
            if !released[l] && !gated[l].is_empty() {
                next = next.min(releases[l]);
            }
        }
        if next.is_infinite() {
            let example = (0..n).find(|&i| ends[i] == 0.0 && indeg[i] > 0).unwrap_or(0);
            return Err(SimError::Deadlock {
                pending: n - done,
                example,
            });
        }
        clock = next;

        for dev in DEVICES {
            let di = device_index(dev);
            if let Some((end, id)) = in_flight[di] {
                if end == clock {
                    in_flight[di] = None;
                    ends[id] = end;
                    done += 1;
                    let mut newly_ready: Vec<TaskId> = Vec::new();
                    for &c in &children[id] {
                        indeg[c] -= 1;
                        if indeg[c] == 0 {
                            newly_ready.push(c);
                        }
                    }
                    newly_ready.sort_unstable();
                    for c in newly_ready {
                        enqueue(&mut queues, &mut gated, &released, graph, c);
                    }
                }
            }
        }
        release_up_to(clock, &mut queues, &mut gated, &mut released);
    }

    let makespan = tasks_out.iter().fold(0.0f64, |m, t| m.max(t.end));
    let devices = DEVICES
        .iter()
        .map(|&dev| summarize_device(dev, &tasks_out))
        .collect();

    Ok(Timeline {
        policy: policy.kind,
        steal_threshold: policy.steal_threshold,
        makespan,
        tasks: tasks_out,
        devices,
        steals,
        dispatches,
    })
}

#[allow(clippy::too_many_arguments)]
fn start_task(
    graph: &TaskGraph,
    id: TaskId,
    device: Device,
    stolen: bool,
    clock: f64,
    cost: f64,
    in_flight: &mut [Option<(f64, TaskId)>; 2],
    tasks_out: &mut Vec<ScheduledTask>,
    dispatches: &mut Vec<DispatchRecord>,
    remaining_queue: &BTreeSet<(u32, usize, TaskId)>,
) {
    let t = &graph.tasks[id];
    let end = clock + cost;
    in_flight[device_index(device)] = Some((end, id));
    tasks_out.push(ScheduledTask {
        task: id,
        label: t.label(),
        layer: t.layer,
        chunk: t.chunk,
        kind: t.kind,
        device,
        stolen,
        start: clock,
        end,
    });
    dispatches.push(DispatchRecord {
        time: clock,
        task: id,
        device,
        stolen,
        queued_after: remaining_queue.iter().map(|e| e.2).collect(),
    });
}

fn summarize_device(device: Device, tasks: &[ScheduledTask]) -> DeviceSummary {
    let mine: Vec<&ScheduledTask> = tasks.iter().filter(|t| t.device == device).collect();
    if mine.is_empty() {
        return DeviceSummary {
            device,
            task_count: 0,
            busy: 0.0,
            span_start: 0.0,
            span_end: 0.0,
            idle_within_span: 0.0,
            bubble_rate: 0.0,
            no_tasks: true,
        };
    }
    let span_start = mine.iter().map(|t| t.start).fold(f64::INFINITY, f64::min);
    let span_end = mine.iter().map(|t| t.end).fold(0.0f64, f64::max);
    let busy: f64 = mine.iter().map(|t| t.end - t.start).sum();
    let span = span_end - span_start;
    let idle = (span - busy).max(0.0);
    DeviceSummary {
        device,
        task_count: mine.len(),
        busy,
        span_start,
        span_end,
        idle_within_span: idle,
        bubble_rate: if span > 0.0 { idle / span } else { 0.0 },
        no_tasks: false,
    }
}

#[cfg(test)]
mod tests {
    use super::super::{build_prefill_graph, place_operators, CostEntry, OP_CHAIN};
    use super::*;

    fn chain_cost_model() -> CostModel {
        let mut m = CostModel::uniform(1.0);
        m.set(OpKind::Attention, Device::Cpu, CostEntry::affine(1.0, 1.0));
        m
    }

    #[test]
    fn single_chain_makespan_is_cost_sum() {
        let mut g = build_prefill_graph(1, 1).unwrap();
        place_operators(&mut g, PolicyKind::FinePlacement);
        let m = CostModel::uniform(1.0);
        let tl = simulate(&g, &m, SchedPolicy::new(PolicyKind::FinePlacement)).unwrap();
        assert_eq!(tl.makespan, 15.0);
        // a chain leaves no two tasks overlapping anywhere
        let mut intervals: Vec<(f64, f64)> = tl.tasks.iter().map(|t| (t.start, t.end)).collect();
        intervals.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in intervals.windows(2) {
            assert!(w[0].1 <= w[1].0);
        }
    }

    #[test]
    fn hand_traced_two_chunk_fixture() {
        // 1 layer, 2 chunks, fine placement, unit costs except
        // attention(c) = 1 + (c+1). Event-by-event trace:
        //   chunk 0 chain runs t=0..6 (15 ops alternating devices);
        //   chunk 1 starts on the CPU in parallel.
        let mut g = build_prefill_graph(1, 2).unwrap();
        place_operators(&mut g, PolicyKind::PlusPriority);
        let m = chain_cost_model();
        let tl = simulate(&g, &m, SchedPolicy::new(PolicyKind::PlusPriority)).unwrap();

        let find = |c: u32, k: OpKind| {
            tl.tasks
                .iter()
                .find(|t| t.chunk == c && t.kind == k)
                .unwrap()
        };
        // hand trace: chunk 0 chain RmsNormAttn [0,1] cpu, Quantize [1,2]
        // cpu, QProj [2,3] npu, KProj [3,4], VProj [4,5], Dequantize [5,6]
        // cpu, Attention [6,8] cpu (1 + 1*1), OProj [8,9] npu; chunk 1's
        // head waits for the CPU and the priority order until t=2, and
        // its attention [11,14] costs 1 + 2 after K/V of both chunks
        assert_eq!((find(0, OpKind::RmsNormAttn).start, find(0, OpKind::RmsNormAttn).end), (0.0, 1.0));
        assert_eq!((find(0, OpKind::QProj).start, find(0, OpKind::QProj).end), (2.0, 3.0));
        assert_eq!((find(0, OpKind::Attention).start, find(0, OpKind::Attention).end), (6.0, 8.0));
        assert_eq!((find(0, OpKind::OProj).start, find(0, OpKind::OProj).end), (8.0, 9.0));
        assert_eq!(find(1, OpKind::RmsNormAttn).start, 2.0);
        let att1 = find(1, OpKind::Attention);
        assert_eq!((att1.start, att1.end), (11.0, 14.0));
        let kv_end = find(1, OpKind::VProj).end.max(find(0, OpKind::VProj).end);
        assert!(att1.start >= kv_end);
        assert_eq!(tl.makespan, 23.0);
        // every task starts at or after all of its deps
        for t in &tl.tasks {
            for &d in &g.tasks[t.task].deps {
                let dep_end = tl.tasks.iter().find(|x| x.task == d).unwrap().end;
                assert!(t.start >= dep_end);
            }
        }
    }

    #[test]
    fn bubble_rate_fixture() {
        // busy 1, idle 1, busy 1 -> 1/3
        let tasks = vec![
            ScheduledTask {
                task: 0, label: "a".into(), layer: 0, chunk: 0,
                kind: OpKind::RmsNormAttn, device: Device::Cpu, stolen: false,
                start: 0.0, end: 1.0,
            },
            ScheduledTask {
                task: 1, label: "b".into(), layer: 0, chunk: 0,
                kind: OpKind::Quantize, device: Device::Cpu, stolen: false,
                start: 2.0, end: 3.0,
            },
        ];
        let summary = summarize_device(Device::Cpu, &tasks);
        assert_eq!(summary.bubble_rate, 1.0 / 3.0);
        assert_eq!(summary.idle_within_span, 1.0);
        // a device with no tasks reports 0 with the warning flag set
        let empty = summarize_device(Device::Npu, &tasks);
        assert_eq!(empty.bubble_rate, 0.0);
        assert!(empty.no_tasks);
    }

    #[test]
    fn determinism_byte_for_byte() {
        let mut g = build_prefill_graph(2, 4).unwrap();
        place_operators(&mut g, PolicyKind::PlusStealing);
        let m = chain_cost_model();
        let p = SchedPolicy::with_threshold(PolicyKind::PlusStealing, 2);
        let a = serde_json::to_vec(&simulate(&g, &m, p).unwrap()).unwrap();
        let b = serde_json::to_vec(&simulate(&g, &m, p).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn deadlock_is_reported() {
        let mut g = build_prefill_graph(1, 1).unwrap();
        place_operators(&mut g, PolicyKind::FinePlacement);
        // introduce an unsatisfiable dependency cycle
        g.tasks[0].deps = vec![14];
        let m = CostModel::uniform(1.0);
        assert!(matches!(
            simulate(&g, &m, SchedPolicy::new(PolicyKind::FinePlacement)),
            Err(SimError::Deadlock { .. })
        ));
    }

    #[test]
    fn missing_cost_is_reported() {
        let mut g = build_prefill_graph(1, 1).unwrap();
        place_operators(&mut g, PolicyKind::FinePlacement);
        let mut m = CostModel::default();
        for kind in OP_CHAIN {
            m.set(kind, Device::Cpu, CostEntry::constant(1.0));
        }
        // NPU entries absent
        assert!(matches!(
            simulate(&g, &m, SchedPolicy::new(PolicyKind::FinePlacement)),
            Err(SimError::MissingCost { .. })
        ));
    }

    #[test]
    fn gated_layers_delay_their_tasks() {
        let mut g = build_prefill_graph(2, 1).unwrap();
        place_operators(&mut g, PolicyKind::FinePlacement);
        let m = CostModel::uniform(1.0);
        let releases = vec![3.0, 40.0];
        let tl = simulate_gated(&g, &m, SchedPolicy::new(PolicyKind::FinePlacement), &releases)
            .unwrap();
        for t in &tl.tasks {
            assert!(t.start >= releases[t.layer as usize]);
        }
        // layer 1 work cannot start before its release even though the
        // dependency chain finished earlier
        let first_l1 = tl
            .tasks
            .iter()
            .filter(|t| t.layer == 1)
            .map(|t| t.start)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(first_l1, 40.0);
        assert_eq!(tl.makespan, 55.0);
    }

    #[test]
    fn unplaced_graph_rejected() {
        let g = build_prefill_graph(1, 1).unwrap();
        let m = CostModel::uniform(1.0);
        assert!(matches!(
            simulate(&g, &m, SchedPolicy::new(PolicyKind::FinePlacement)),
            Err(SimError::Unplaced(_))
        ));
    }
}
