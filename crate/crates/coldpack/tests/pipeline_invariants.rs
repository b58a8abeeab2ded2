//! Scheduling invariants checked on fuzzed graphs and the bundled
//! scenario: dependency safety, priority correctness, the stealing
//! guard, work conservation and the makespan lower bound.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use coldpack::pipeline::{
    build_prefill_graph, bundled_scenario, place_operators, simulate, CostEntry, CostModel,
    Device, OpKind, PolicyKind, SchedPolicy, TaskGraph, Timeline, OP_CHAIN,
};

fn random_cost_model(rng: &mut ChaCha8Rng) -> CostModel {
    let mut m = CostModel::default();
    for kind in OP_CHAIN {
        let cpu = rng.gen_range(0.5..4.0);
        let npu = rng.gen_range(0.5..4.0);
        m.set(kind, Device::Cpu, CostEntry::constant(cpu));
        m.set(kind, Device::Npu, CostEntry::constant(npu));
    }
    m.set(
        OpKind::Attention,
        Device::Cpu,
        CostEntry::affine(rng.gen_range(0.5..2.0), rng.gen_range(0.1..1.5)),
    );
    m
}

fn assert_dependency_safety(graph: &TaskGraph, tl: &Timeline) {
    let mut end = vec![0.0f64; graph.tasks.len()];
    for t in &tl.tasks {
        end[t.task] = t.end;
    }
    for t in &tl.tasks {
        for &d in &graph.tasks[t.task].deps {
            assert!(
                t.start >= end[d],
                "task {} started at {} before dep {} ended at {}",
                t.task,
                t.start,
                d,
                end[d]
            );
        }
    }
}

fn assert_no_overlap_per_device(tl: &Timeline) {
    for device in [Device::Cpu, Device::Npu] {
        let mut intervals: Vec<(f64, f64)> = tl
            .tasks
            .iter()
            .filter(|t| t.device == device)
            .map(|t| (t.start, t.end))
            .collect();
        intervals.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in intervals.windows(2) {
            assert!(w[0].1 <= w[1].0, "overlapping intervals on {device:?}");
        }
    }
}

fn assert_priority_correctness(graph: &TaskGraph, tl: &Timeline) {
    // whenever a task is dispatched, nothing left in the same queue has
    // a smaller (chunk, topo_rank) key
    for d in &tl.dispatches {
        let picked = &graph.tasks[d.task];
        let picked_key = (picked.chunk, picked.topo_rank);
        for &other in &d.queued_after {
            let o = &graph.tasks[other];
            assert!(
                picked_key <= (o.chunk, o.topo_rank),
                "dispatched {:?} after {:?}",
                picked_key,
                (o.chunk, o.topo_rank)
            );
        }
    }
}

fn assert_bubble_rates_match_sweep(tl: &Timeline) {
    // independent interval sweep recomputing each device's idle share
    for summary in &tl.devices {
        let mut intervals: Vec<(f64, f64)> = tl
            .tasks
            .iter()
            .filter(|t| t.device == summary.device)
            .map(|t| (t.start, t.end))
            .collect();
        if intervals.is_empty() {
            assert_eq!(summary.bubble_rate, 0.0);
            assert!(summary.no_tasks);
            continue;
        }
        intervals.sort_by(|a, b| a.0.total_cmp(&b.0));
        let span = intervals.last().unwrap().1 - intervals[0].0;
        let mut idle = 0.0;
        for w in intervals.windows(2) {
            idle += (w[1].0 - w[0].1).max(0.0);
        }
        assert!((summary.bubble_rate - idle / span).abs() < 1e-12);
        assert!((summary.idle_within_span - idle).abs() < 1e-9);
    }
}

fn critical_path(graph: &TaskGraph, m: &CostModel) -> f64 {
    let mut cp = vec![0.0f64; graph.tasks.len()];
    let mut best = 0.0f64;
    for t in &graph.tasks {
        let own = m
            .cost(t.kind, t.device.unwrap(), t.chunk)
            .expect("cost present");
        let dep_max = t.deps.iter().map(|&d| cp[d]).fold(0.0f64, f64::max);
        cp[t.id] = dep_max + own;
        best = best.max(cp[t.id]);
    }
    best
}

#[test]
fn fuzzed_graphs_hold_all_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xF422);
    for round in 0..40 {
        let layers = rng.gen_range(1..4);
        let chunks = rng.gen_range(1..6);
        let m = random_cost_model(&mut rng);
        let kind = PolicyKind::ALL[rng.gen_range(0..4)];
        let theta = rng.gen_range(1..6);

        let mut graph = build_prefill_graph(layers, chunks).unwrap();
        place_operators(&mut graph, kind);
        let tl = simulate(&graph, &m, SchedPolicy::with_threshold(kind, theta)).unwrap();

        assert_eq!(tl.tasks.len(), graph.tasks.len(), "round {round}");
        assert_dependency_safety(&graph, &tl);
        assert_no_overlap_per_device(&tl);
        assert_bubble_rates_match_sweep(&tl);
        if matches!(kind, PolicyKind::PlusPriority | PolicyKind::PlusStealing) {
            assert_priority_correctness(&graph, &tl);
        }
        for s in &tl.steals {
            assert!(s.npu_queue_len > theta);
        }
        if kind != PolicyKind::PlusStealing {
            assert!(tl.steals.is_empty());
            // makespan lower bounds for non-stealing policies
            let cp = critical_path(&graph, &m);
            assert!(tl.makespan >= cp - 1e-9, "makespan {} < cp {cp}", tl.makespan);
            for device in [Device::Cpu, Device::Npu] {
                let work: f64 = graph
                    .tasks
                    .iter()
                    .filter(|t| t.device == Some(device))
                    .map(|t| m.cost(t.kind, device, t.chunk).unwrap())
                    .sum();
                assert!(tl.makespan >= work - 1e-9);
            }
        }
    }
}

#[test]
fn work_conservation_on_bundled_scenario() {
    // no device idles while its own queue is non-empty: rebuild queue
    // occupancy from the dispatch log and check every idle gap
    let scenario = bundled_scenario();
    for kind in PolicyKind::ALL {
        let mut graph = build_prefill_graph(scenario.n_layers, scenario.n_chunks).unwrap();
        place_operators(&mut graph, kind);
        let tl = simulate(
            &graph,
            &scenario.cost_model,
            SchedPolicy::with_threshold(kind, scenario.steal_threshold),
        )
        .unwrap();
        for device in [Device::Cpu, Device::Npu] {
            let mut intervals: Vec<(f64, f64)> = tl
                .tasks
                .iter()
                .filter(|t| t.device == device)
                .map(|t| (t.start, t.end))
                .collect();
            intervals.sort_by(|a, b| a.0.total_cmp(&b.0));
            for w in intervals.windows(2) {
                let (gap_start, gap_end) = (w[0].1, w[1].0);
                if gap_end <= gap_start {
                    continue;
                }
                // during the gap the device's queue must have been empty:
                // no task of this device that was ready before the gap
                // ended may start after it
                for t in tl.tasks.iter().filter(|t| t.device == device) {
                    if t.start >= gap_end {
                        let ready: f64 = graph.tasks[t.task]
                            .deps
                            .iter()
                            .map(|&d| tl.tasks.iter().find(|x| x.task == d).unwrap().end)
                            .fold(0.0f64, f64::max);
                        assert!(
                            ready > gap_start + 1e-12 || t.stolen,
                            "{kind:?}: task {} ready at {ready} but {device:?} idled {gap_start}..{gap_end}",
                            t.task
                        );
                    }
                }
            }
        }
    }
}
