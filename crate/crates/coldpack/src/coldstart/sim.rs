//! Virtual-clock cold-start simulation.
//!
//! Load and unpack run on small worker pools; hand-off queues of depth
//! [`HANDOFF_QUEUE_DEPTH`] apply backpressure, so a stage may not run
//! ahead of its consumer by more than the queue depth. Compute is either
//! one aggregate cost per layer on a single executor or the gated
//! two-device task-graph simulation; in the latter case the schedule is
//! solved by fixed-point iteration because the unpack backpressure
//! depends on when each layer's first compute task starts.

use crate::pipeline::{
    build_prefill_graph, place_operators, simulate_gated, SchedPolicy, Timeline,
};
use crate::tensorstore::EfpkReader;

use super::{
    ColdStartConfig, ColdStartCostModel, ColdStartError, ColdStartReport, ComputeCost,
    LayerReport, StageInterval, HANDOFF_QUEUE_DEPTH,
};

/// Earliest-free worker with lowest index winning ties.
fn take_worker(free: &mut [f64], not_before: f64) -> (usize, f64) {
    let mut best = 0;
    for (i, &t) in free.iter().enumerate() {
        if t < free[best] {
            best = i;
        }
    }
    (best, free[best].max(not_before))
}

struct StageSchedule {
    load: Vec<StageInterval>,
    unpack: Vec<StageInterval>,
    loader: Vec<usize>,
    unpacker: Vec<usize>,
}

/// Schedules load and unpack for all layers given the time each layer's
/// compute starts (for the unpack-to-compute backpressure).
fn schedule_stages(
    n_layers: usize,
    cost: &ColdStartCostModel,
    loader_workers: usize,
    unpack_workers: usize,
    compute_start: &[f64],
) -> Result<StageSchedule, ColdStartError> {
    let mut loader_free = vec![0.0f64; loader_workers];
    let mut unpack_free = vec![0.0f64; unpack_workers];
    let mut load = Vec::with_capacity(n_layers);
    let mut unpack: Vec<StageInterval> = Vec::with_capacity(n_layers);
    let mut loader = Vec::with_capacity(n_layers);
    let mut unpacker = Vec::with_capacity(n_layers);

    for l in 0..n_layers {
        // a loader may not start layer l before layer l-depth left the
        // loaded-layer buffer (its unpack started)
        let gate = if l >= HANDOFF_QUEUE_DEPTH {
            unpack[l - HANDOFF_QUEUE_DEPTH].start
        } else {
            0.0
        };
        let (k, start) = take_worker(&mut loader_free, gate);
        let end = start
            + cost
                .load_per_layer
                .at(l)
                .ok_or_else(|| ColdStartError::BadConfig(format!("no load cost for layer {l}")))?;
        loader_free[k] = end;
        load.push(StageInterval { start, end });
        loader.push(k);

        let gate = if l >= HANDOFF_QUEUE_DEPTH {
            compute_start[l - HANDOFF_QUEUE_DEPTH]
        } else {
            0.0
        };
        let (k, start) = take_worker(&mut unpack_free, load[l].end.max(gate));
        let end = start
            + cost.unpack_per_layer.at(l).ok_or_else(|| {
                ColdStartError::BadConfig(format!("no unpack cost for layer {l}"))
            })?;
        unpack_free[k] = end;
        unpack.push(StageInterval { start, end });
        unpacker.push(k);
    }
    Ok(StageSchedule {
        load,
        unpack,
        loader,
        unpacker,
    })
}

pub fn run_coldstart_simulated(
    config: &ColdStartConfig,
) -> Result<ColdStartReport, ColdStartError> {
    let cost = config
        .cost_model
        .as_ref()
        .ok_or(ColdStartError::MissingCostModel)?;

    // stream the file once to validate it and enumerate layers
    let reader = EfpkReader::open(&config.efpk)?;
    let mut stream = reader.stream()?;
    let mut layer_ids = Vec::new();
    for layer in &mut stream {
        layer_ids.push(layer?.layer);
    }
    let n_layers = layer_ids.len();
    if n_layers == 0 {
        return Err(ColdStartError::BadConfig("model has no layers".into()));
    }
    cost.load_per_layer.validate(n_layers, "load")?;
    cost.unpack_per_layer.validate(n_layers, "unpack")?;

    match &cost.compute {
        ComputeCost::PerLayer(per_layer) => {
            per_layer.validate(n_layers, "compute")?;
            // single interleaved pass: all gates refer to earlier layers
            let mut load = Vec::new();
            let mut unpack: Vec<StageInterval> = Vec::new();
            let mut compute: Vec<StageInterval> = Vec::new();
            let mut loader_free = vec![0.0f64; config.loader_workers];
            let mut unpack_free = vec![0.0f64; config.unpack_workers];
            let mut loader = Vec::new();
            let mut unpacker = Vec::new();
            for l in 0..n_layers {
                let gate = if l >= HANDOFF_QUEUE_DEPTH {
                    unpack[l - HANDOFF_QUEUE_DEPTH].start
                } else {
                    0.0
                };
                let (k, start) = take_worker(&mut loader_free, gate);
                let end = start + cost.load_per_layer.at(l).unwrap();
                loader_free[k] = end;
                load.push(StageInterval { start, end });
                loader.push(k);

                let gate = if l >= HANDOFF_QUEUE_DEPTH {
                    compute[l - HANDOFF_QUEUE_DEPTH].start
                } else {
                    0.0
                };
                let (k, start) = take_worker(&mut unpack_free, load[l].end.max(gate));
                let end = start + cost.unpack_per_layer.at(l).unwrap();
                unpack_free[k] = end;
                unpack.push(StageInterval { start, end });
                unpacker.push(k);

                let prev_end = compute.last().map_or(0.0, |c: &StageInterval| c.end);
                let start = unpack[l].end.max(prev_end);
                compute.push(StageInterval {
                    start,
                    end: start + per_layer.at(l).unwrap(),
                });
            }
            let layers: Vec<LayerReport> = (0..n_layers)
                .map(|l| LayerReport {
                    layer: layer_ids[l],
                    load: load[l],
                    unpack: unpack[l],
                    compute: compute[l],
                    loader: loader[l],
                    unpacker: unpacker[l],
                })
                .collect();
            Ok(build_report(config, layers, None))
        }
        ComputeCost::TaskGraph(pipeline_costs) => {
            let mut graph = build_prefill_graph(n_layers as u32, config.n_chunks())?;
            place_operators(&mut graph, config.policy);
            let policy = SchedPolicy::with_threshold(config.policy, config.steal_threshold);

            // fixed point: unpack backpressure needs compute starts,
            // compute gating needs unpack ends
            let mut compute_start = vec![0.0f64; n_layers];
            let mut result: Option<(StageSchedule, Timeline)> = None;
            for _ in 0..32 {
                let stages = schedule_stages(
                    n_layers,
                    cost,
                    config.loader_workers,
                    config.unpack_workers,
                    &compute_start,
                )?;
                let releases: Vec<f64> = stages.unpack.iter().map(|u| u.end).collect();
                let timeline = simulate_gated(&graph, pipeline_costs, policy, &releases)?;
                let mut first_start = vec![f64::INFINITY; n_layers];
                for t in &timeline.tasks {
                    let l = t.layer as usize;
                    first_start[l] = first_start[l].min(t.start);
                }
                let stable = first_start == compute_start;
                compute_start = first_start;
                result = Some((stages, timeline));
                if stable {
                    break;
                }
            }
            let (stages, timeline) = result.expect("at least one iteration ran");

            let mut layers = Vec::with_capacity(n_layers);
            for l in 0..n_layers {
                let mut first = f64::INFINITY;
                let mut last = 0.0f64;
                for t in timeline.tasks.iter().filter(|t| t.layer as usize == l) {
                    first = first.min(t.start);
                    last = last.max(t.end);
                }
                layers.push(LayerReport {
                    layer: layer_ids[l],
                    load: stages.load[l],
                    unpack: stages.unpack[l],
                    compute: StageInterval {
                        start: first,
                        end: last,
                    },
                    loader: stages.loader[l],
                    unpacker: stages.unpacker[l],
                });
            }
            Ok(build_report(config, layers, Some(timeline)))
        }
    }
}

fn build_report(
    config: &ColdStartConfig,
    layers: Vec<LayerReport>,
    prefill: Option<Timeline>,
) -> ColdStartReport {
    let load_total: f64 = layers.iter().map(|l| l.load.duration()).sum();
    let unpack_total: f64 = layers.iter().map(|l| l.unpack.duration()).sum();
    let compute_total: f64 = match &prefill {
        Some(tl) => tl.tasks.iter().map(|t| t.end - t.start).sum(),
        None => layers.iter().map(|l| l.compute.duration()).sum(),
    };
    let ttft = layers
        .iter()
        .flat_map(|l| [l.load.end, l.unpack.end, l.compute.end])
        .fold(0.0f64, f64::max);
    ColdStartReport {
        mode: config.mode,
        policy: config.policy,
        n_layers: layers.len() as u32,
        n_chunks: config.n_chunks(),
        ttft,
        load_total,
        unpack_total,
        compute_total,
        overlap_ratio: 1.0 - ttft / (load_total + unpack_total + compute_total),
        layers,
        prefill,
    }
}
