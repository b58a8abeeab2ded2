//! Wall-clock cold start: loader and unpack worker pools feed two
//! executor threads playing the CPU and NPU roles.
//!
//! Loaders stream layers from the EFPK file, a sequencer keeps the
//! hand-off in layer order through a bounded queue, unpack workers turn
//! block bytes into INT8 buffers, and the executors run the prefill
//! task graph under the configured scheduling policy. Projection tasks
//! execute real INT8 matmuls against the unpacked weights; other
//! operators run small representative element-wise loops.

use std::collections::{BTreeMap, BTreeSet};
use std::hint::black_box;
use std::sync::mpsc::{Receiver, SyncSender};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::pack::unpack_channel_simd;
use crate::pipeline::{
    assemble_timeline, build_prefill_graph, place_operators, queue_key, Device, OpKind,
    PolicyKind, SchedPolicy, ScheduledTask, StealEvent, TaskGraph, TaskId,
};
use crate::tensorstore::{EfpkReader, LayerTensors};

use super::{
    ColdStartConfig, ColdStartError, ColdStartReport, LayerReport, StageInterval,
    HANDOFF_QUEUE_DEPTH,
};

/// Env var capping the loader and unpack pools.
pub const THREADS_ENV: &str = "COLDPACK_THREADS";

struct UnpackedTensor {
    rows: usize,
    cols: usize,
    padded_rows: usize,
    /// Channel-major INT8 codes, `padded_rows` per channel.
    codes: Vec<i8>,
    scales: Vec<f32>,
    activation_scale: f32,
}

struct UnpackedLayer {
    tensors: Vec<UnpackedTensor>,
}

#[derive(Clone, Copy)]
struct WallInterval {
    start: f64,
    end: f64,
    worker: usize,
}

/// Shared scheduler state for the two executor threads.
struct ExecState {
    queues: [BTreeSet<(u32, usize, TaskId)>; 2],
    indeg: Vec<usize>,
    released: Vec<bool>,
    gated: Vec<Vec<TaskId>>,
    /// First compute task of each layer has been dispatched; the unpack
    /// backpressure gate.
    first_started: Vec<bool>,
    remaining_per_layer: Vec<usize>,
    remaining: usize,
    weights: BTreeMap<usize, Arc<UnpackedLayer>>,
    records: Vec<ScheduledTask>,
    steals: Vec<StealEvent>,
    abort: Option<String>,
}

struct Shared {
    state: Mutex<ExecState>,
    cond: Condvar,
    graph: TaskGraph,
    children: Vec<Vec<TaskId>>,
    policy: SchedPolicy,
    t0: Instant,
    chunk_length: usize,
    seed: u64,
}

fn now_secs(t0: Instant) -> f64 {
    t0.elapsed().as_secs_f64()
}

fn pool_cap(configured: usize) -> usize {
    match std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        Some(cap) if cap >= 1 => configured.min(cap),
        _ => configured,
    }
}

fn device_slot(d: Device) -> usize {
    match d {
        Device::Cpu => 0,
        Device::Npu => 1,
    }
}

fn enqueue(state: &mut ExecState, shared: &Shared, id: TaskId) {
    let t = &shared.graph.tasks[id];
    if state.released[t.layer as usize] {
        let key = queue_key(shared.policy.kind, t.chunk, t.topo_rank);
        state.queues[device_slot(t.device.unwrap())].insert((key.0, key.1, id));
    } else {
        state.gated[t.layer as usize].push(id);
    }
}

pub fn run_coldstart_real(config: &ColdStartConfig) -> Result<ColdStartReport, ColdStartError> {
    let reader = Arc::new(EfpkReader::open(&config.efpk)?);
    let layer_ids = reader.layer_ids();
    let n_layers = layer_ids.len();
    if n_layers == 0 {
        return Err(ColdStartError::BadConfig("model has no layers".into()));
    }
    let loader_workers = pool_cap(config.loader_workers);
    let unpack_workers = pool_cap(config.unpack_workers);
    if config.steal_threshold == 0 {
        return Err(ColdStartError::BadConfig(
            "steal threshold must be >= 1".into(),
        ));
    }

    let mut graph = build_prefill_graph(n_layers as u32, config.n_chunks())?;
    place_operators(&mut graph, config.policy);
    let policy = SchedPolicy::with_threshold(config.policy, config.steal_threshold);

    let n_tasks = graph.tasks.len();
    let mut indeg = vec![0usize; n_tasks];
    let mut children: Vec<Vec<TaskId>> = vec![Vec::new(); n_tasks];
    let mut remaining_per_layer = vec![0usize; n_layers];
    let mut gated: Vec<Vec<TaskId>> = vec![Vec::new(); n_layers];
    for t in &graph.tasks {
        indeg[t.id] = t.deps.len();
        for &d in &t.deps {
            children[d].push(t.id);
        }
        remaining_per_layer[t.layer as usize] += 1;
        if t.deps.is_empty() {
            gated[t.layer as usize].push(t.id);
        }
    }

    let shared = Arc::new(Shared {
        state: Mutex::new(ExecState {
            queues: [BTreeSet::new(), BTreeSet::new()],
            indeg,
            released: vec![false; n_layers],
            gated,
            first_started: vec![false; n_layers],
            remaining_per_layer,
            remaining: n_tasks,
            weights: BTreeMap::new(),
            records: Vec::with_capacity(n_tasks),
            steals: Vec::new(),
            abort: None,
        }),
        cond: Condvar::new(),
        graph,
        children,
        policy,
        t0: Instant::now(),
        chunk_length: config.chunk_length as usize,
        seed: config.seed,
    });

    // loader pool -> sequencer -> bounded channel -> unpack pool
    let (tx, rx) = std::sync::mpsc::sync_channel::<(usize, LayerTensors)>(HANDOFF_QUEUE_DEPTH);
    let rx = Arc::new(Mutex::new(rx));
    let next_layer = Arc::new(Mutex::new(0usize));
    let sequencer = Arc::new(Mutex::new((0usize, BTreeMap::<usize, LayerTensors>::new())));
    let zero = WallInterval {
        start: 0.0,
        end: 0.0,
        worker: 0,
    };
    let load_times = Arc::new(Mutex::new(vec![zero; n_layers]));
    let unpack_times = Arc::new(Mutex::new(vec![zero; n_layers]));

    let mut loader_handles = Vec::new();
    for worker in 0..loader_workers {
        let reader = Arc::clone(&reader);
        let layer_ids = layer_ids.clone();
        let next_layer = Arc::clone(&next_layer);
        let sequencer = Arc::clone(&sequencer);
        let tx: SyncSender<(usize, LayerTensors)> = tx.clone();
        let load_times = Arc::clone(&load_times);
        let shared = Arc::clone(&shared);
        loader_handles.push(std::thread::spawn(move || -> Result<(), ColdStartError> {
            loop {
                let l = {
                    let mut next = next_layer.lock().unwrap();
                    if *next >= layer_ids.len() {
                        return Ok(());
                    }
                    let l = *next;
                    *next += 1;
                    l
                };
                let start = now_secs(shared.t0);
                let tensors = reader.read_layer(layer_ids[l])?;
                let end = now_secs(shared.t0);
                load_times.lock().unwrap()[l] = WallInterval { start, end, worker };
                // order-preserving hand-off: send layers strictly in
                // order; blocking inside the sequencer lock is safe
                // because the consumer never takes it
                let mut seq = sequencer.lock().unwrap();
                seq.1.insert(l, tensors);
                while let Some(entry) = { let key = seq.0; seq.1.remove(&key) } {
                    let idx = seq.0;
                    tx.send((idx, entry))
                        .map_err(|_| ColdStartError::WorkerPanic("unpack pool gone".into()))?;
                    seq.0 += 1;
                }
            }
        }));
    }
    drop(tx);

    let mut unpack_handles = Vec::new();
    for worker in 0..unpack_workers {
        let rx: Arc<Mutex<Receiver<(usize, LayerTensors)>>> = Arc::clone(&rx);
        let shared = Arc::clone(&shared);
        let unpack_times = Arc::clone(&unpack_times);
        let register_width = reader.register_width;
        unpack_handles.push(std::thread::spawn(move || -> Result<(), ColdStartError> {
            loop {
                let (l, layer) = {
                    let guard = rx.lock().unwrap();
                    match guard.recv() {
                        Ok(item) => item,
                        Err(_) => return Ok(()), // channel drained
                    }
                };
                // backpressure: stay at most the queue depth ahead of
                // the compute stage
                if l >= HANDOFF_QUEUE_DEPTH {
                    let mut state = shared.state.lock().unwrap();
                    while !state.first_started[l - HANDOFF_QUEUE_DEPTH] && state.abort.is_none() {
                        state = shared.cond.wait(state).unwrap();
                    }
                    if let Some(msg) = &state.abort {
                        return Err(ColdStartError::WorkerPanic(msg.clone()));
                    }
                }
                let start = now_secs(shared.t0);
                let unpacked = unpack_layer(&layer, register_width)?;
                let end = now_secs(shared.t0);
                unpack_times.lock().unwrap()[l] = WallInterval { start, end, worker };

                let mut state = shared.state.lock().unwrap();
                state.weights.insert(l, Arc::new(unpacked));
                state.released[l] = true;
                let pending = std::mem::take(&mut state.gated[l]);
                for id in pending {
                    enqueue(&mut state, &shared, id);
                }
                shared.cond.notify_all();
            }
        }));
    }

    let mut exec_handles = Vec::new();
    for device in [Device::Cpu, Device::Npu] {
        let shared = Arc::clone(&shared);
        exec_handles.push(std::thread::spawn(move || executor_loop(&shared, device)));
    }

    let mut first_error: Option<ColdStartError> = None;
    for h in loader_handles.into_iter().chain(unpack_handles) {
        match h.join() {
            Ok(Ok(())) => {}
            Ok(Err(e)) => first_error = first_error.or(Some(e)),
            Err(_) => {
                first_error = first_error
                    .or(Some(ColdStartError::WorkerPanic("stage worker panicked".into())))
            }
        }
    }
    if let Some(e) = &first_error {
        let mut state = shared.state.lock().unwrap();
        state.abort = Some(e.to_string());
        shared.cond.notify_all();
    }
    for h in exec_handles {
        if h.join().is_err() {
            first_error =
                first_error.or(Some(ColdStartError::WorkerPanic("executor panicked".into())));
        }
    }
    if let Some(e) = first_error {
        return Err(e);
    }

    let state = shared.state.lock().unwrap();
    if let Some(msg) = &state.abort {
        return Err(ColdStartError::WorkerPanic(msg.clone()));
    }
    let load_times = load_times.lock().unwrap();
    let unpack_times = unpack_times.lock().unwrap();

    let mut layers = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let mut first = f64::INFINITY;
        let mut last = 0.0f64;
        for t in state.records.iter().filter(|t| t.layer as usize == l) {
            first = first.min(t.start);
            last = last.max(t.end);
        }
        layers.push(LayerReport {
            layer: layer_ids[l],
            load: StageInterval {
                start: load_times[l].start,
                end: load_times[l].end,
            },
            unpack: StageInterval {
                start: unpack_times[l].start,
                end: unpack_times[l].end,
            },
            compute: StageInterval {
                start: first,
                end: last,
            },
            loader: load_times[l].worker,
            unpacker: unpack_times[l].worker,
        });
    }

    let timeline = assemble_timeline(
        config.policy,
        config.steal_threshold,
        state.records.clone(),
        state.steals.clone(),
    );
    let load_total: f64 = layers.iter().map(|l| l.load.duration()).sum();
    let unpack_total: f64 = layers.iter().map(|l| l.unpack.duration()).sum();
    let compute_total: f64 = timeline.tasks.iter().map(|t| t.end - t.start).sum();
    let ttft = layers
        .iter()
        .flat_map(|l| [l.load.end, l.unpack.end, l.compute.end])
        .fold(0.0f64, f64::max);

    Ok(ColdStartReport {
        mode: config.mode,
        policy: config.policy,
        n_layers: n_layers as u32,
        n_chunks: config.n_chunks(),
        layers,
        ttft,
        load_total,
        unpack_total,
        compute_total,
        overlap_ratio: 1.0 - ttft / (load_total + unpack_total + compute_total),
        prefill: Some(timeline),
    })
}

fn unpack_layer(
    layer: &LayerTensors,
    register_width: u32,
) -> Result<UnpackedLayer, ColdStartError> {
    let mut tensors = Vec::with_capacity(layer.tensors.len());
    for t in &layer.tensors {
        let cols = t.cols as usize;
        let padded = t.padded_rows as usize;
        let mut codes = Vec::with_capacity(cols * padded);
        for i in 0..cols {
            let ch = unpack_channel_simd(t.channel_blocks(i), t.channel_bits[i], register_width)?;
            codes.extend_from_slice(&ch);
        }
        tensors.push(UnpackedTensor {
            rows: t.rows as usize,
            cols,
            padded_rows: padded,
            codes,
            scales: t.scales.clone(),
            activation_scale: t.activation_scale.unwrap_or(1.0 / 127.0),
        });
    }
    Ok(UnpackedLayer { tensors })
}

fn executor_loop(shared: &Shared, device: Device) {
    let slot = device_slot(device);
    loop {
        let picked = {
            let mut state = shared.state.lock().unwrap();
            loop {
                if state.remaining == 0 || state.abort.is_some() {
                    break None;
                }
                let pick = if let Some(&entry) = state.queues[slot].iter().next() {
                    state.queues[slot].remove(&entry);
                    Some((entry.2, false))
                } else if device == Device::Cpu
                    && shared.policy.kind == PolicyKind::PlusStealing
                    && state.queues[device_slot(Device::Npu)].len() > shared.policy.steal_threshold
                {
                    let entry = *state.queues[device_slot(Device::Npu)].iter().next().unwrap();
                    state.queues[device_slot(Device::Npu)].remove(&entry);
                    let npu_len = state.queues[device_slot(Device::Npu)].len() + 1;
                    state.steals.push(StealEvent {
                        time: now_secs(shared.t0),
                        task: entry.2,
                        npu_queue_len: npu_len,
                    });
                    Some((entry.2, true))
                } else {
                    None
                };
                match pick {
                    Some((id, stolen)) => {
                        let layer = shared.graph.tasks[id].layer as usize;
                        state.first_started[layer] = true;
                        let weights = state.weights.get(&layer).cloned();
                        // the unpack backpressure gate may now open
                        shared.cond.notify_all();
                        break Some((id, stolen, weights));
                    }
                    None => state = shared.cond.wait(state).unwrap(),
                }
            }
        };
        let Some((id, stolen, weights)) = picked else {
            return;
        };

        let task = &shared.graph.tasks[id];
        let start = now_secs(shared.t0);
        run_kernel(shared, task.kind, task.layer, task.chunk, weights.as_deref());
        let end = now_secs(shared.t0);

        let mut state = shared.state.lock().unwrap();
        state.records.push(ScheduledTask {
            task: id,
            label: task.label(),
            layer: task.layer,
            chunk: task.chunk,
            kind: task.kind,
            device,
            stolen,
            start,
            end,
        });
        state.remaining -= 1;
        let layer = task.layer as usize;
        state.remaining_per_layer[layer] -= 1;
        if state.remaining_per_layer[layer] == 0 {
            state.weights.remove(&layer); // cap resident unpacked layers
        }
        for &c in &shared.children[id] {
            state.indeg[c] -= 1;
            if state.indeg[c] == 0 {
                enqueue(&mut state, shared, c);
            }
        }
        shared.cond.notify_all();
    }
}

/// Representative work per operator kind.
fn run_kernel(
    shared: &Shared,
    kind: OpKind,
    layer: u32,
    chunk: u32,
    weights: Option<&UnpackedLayer>,
) {
    let m = shared.chunk_length;
    if kind.is_projection() {
        let role = [
            OpKind::QProj,
            OpKind::KProj,
            OpKind::VProj,
            OpKind::OProj,
            OpKind::GateProj,
            OpKind::UpProj,
            OpKind::DownProj,
        ]
        .iter()
        .position(|&k| k == kind)
        .unwrap();
        if let Some(w) = weights {
            let t = &w.tensors[role % w.tensors.len()];
            black_box(int8_matmul(shared, layer, chunk, kind, m, t));
            return;
        }
    }
    // element-wise and attention stand-ins
    let iters = match kind {
        OpKind::Attention => (chunk as usize + 1) * m * 2048,
        _ => m * 4096,
    };
    let mut acc = 0.0f32;
    let mut x = (layer as f32 + 1.0) * 0.37 + chunk as f32 * 0.11;
    for _ in 0..iters {
        x = x * 0.999_93 + 0.013;
        acc += x;
    }
    black_box(acc);
}

/// INT8 activation x INT8 weight matmul with per-channel dequantization.
fn int8_matmul(
    shared: &Shared,
    layer: u32,
    chunk: u32,
    kind: OpKind,
    m: usize,
    t: &UnpackedTensor,
) -> f32 {
    let mut rng = ChaCha8Rng::seed_from_u64(
        shared.seed
            ^ ((layer as u64) << 40)
            ^ ((chunk as u64) << 20)
            ^ kind.chain_position() as u64,
    );
    let acts: Vec<i8> = (0..m * t.rows).map(|_| rng.gen_range(-127..=127)).collect();
    let mut checksum = 0.0f32;
    for row in 0..m {
        let a = &acts[row * t.rows..(row + 1) * t.rows];
        for col in 0..t.cols {
            let w = &t.codes[col * t.padded_rows..col * t.padded_rows + t.rows];
            let mut acc = 0i32;
            for (x, y) in a.iter().zip(w) {
                acc += (*x as i32) * (*y as i32);
            }
            checksum += acc as f32 * t.scales[col] * t.activation_scale;
        }
    }
    checksum
}
