//! Command-line front end: quantize, inspect, unpack-verify, simulate,
//! coldstart and gen-model, all emitting JSON reports.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use coldpack::coldstart::{
    generate_synthetic_model, run_coldstart, ColdStartConfig, ColdStartError, SynthSpec,
};
use coldpack::pack::{
    decode_bitwidth_metadata, unpack_channel_reference, unpack_channel_simd,
    unpack_instruction_estimate_for_mix,
};
use coldpack::pipeline::{
    build_prefill_graph, bundled_scenario, bubble_rate, place_operators, simulate, Device,
    PolicyKind, Scenario, SchedPolicy,
};
use coldpack::quant::{quantize_model, synthesize_calibration, QuantConfig};
use coldpack::tensorstore::{read_tensor_archive, write_efpk, EfpkReader};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Parser, Debug)]
#[command(name = "coldpack", version, about = "Adaptive quantization, packing and cold-start tooling")]
struct Cli {
    /// Seed for every randomized step.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Write the JSON report here instead of stdout.
    #[arg(long, global = true)]
    report: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Quantize a tensor archive into an EFPK file.
    Quantize(QuantizeArgs),
    /// Summarize an EFPK file: shapes, bit histograms, sizes.
    Inspect(InspectArgs),
    /// Re-unpack every channel with both unpackers and compare.
    UnpackVerify(UnpackVerifyArgs),
    /// Run the prefill pipeline simulator on a scenario.
    Simulate(SimulateArgs),
    /// Run a cold start (simulated or real) from a config file.
    Coldstart(ColdstartArgs),
    /// Generate a synthetic model archive and its packed form.
    GenModel(GenModelArgs),
}

#[derive(Args, Debug)]
struct QuantizeArgs {
    /// Input tensor archive.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output EFPK path.
    #[arg(long = "out")]
    output: PathBuf,
    /// Average bit-width budget per tensor.
    #[arg(long)]
    avg_bits: Option<f64>,
    /// Quantization config JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Enable activation-to-weight smoothing.
    #[arg(long)]
    smoothing: bool,
    #[arg(long)]
    register_width: Option<u32>,
    /// Synthetic calibration samples per tensor (smoothing).
    #[arg(long, default_value_t = 8)]
    calib_samples: usize,
}

#[derive(Args, Debug)]
struct InspectArgs {
    efpk: PathBuf,
}

#[derive(Args, Debug)]
struct UnpackVerifyArgs {
    efpk: PathBuf,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Scenario JSON path, or "bundled" for the built-in 16-chunk one.
    #[arg(long)]
    scenario: String,
    /// Policy name (baseline-coarse, fine-placement, plus-priority,
    /// plus-stealing) or "all".
    #[arg(long, default_value = "all")]
    policy: String,
    /// Also write the timeline as CSV (single policy only).
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Embed full timelines in the JSON report.
    #[arg(long)]
    detail: bool,
}

#[derive(Args, Debug)]
struct ColdstartArgs {
    /// Cold-start config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Also write the stage timeline as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenModelArgs {
    #[arg(long)]
    layers: u32,
    #[arg(long)]
    rows: u32,
    #[arg(long)]
    cols: u32,
    #[arg(long, default_value_t = 5.0)]
    avg_bits: f64,
    #[arg(long, default_value_t = 7)]
    tensors_per_layer: usize,
    #[arg(long, default_value_t = 128)]
    register_width: u32,
    #[arg(long)]
    smoothing: bool,
    #[arg(long)]
    out_archive: PathBuf,
    #[arg(long)]
    out_efpk: Option<PathBuf>,
}

/// Stable exit codes: 2 usage (from clap), 3 i/o, 4 parse/format,
/// 5 validation/config, 6 runtime.
fn error_code(kind: &str) -> u8 {
    match kind {
        "io" => 3,
        "format" => 4,
        "config" => 5,
        _ => 6,
    }
}

struct CliError {
    kind: &'static str,
    message: String,
}

impl CliError {
    fn new(kind: &'static str, message: impl ToString) -> Self {
        Self {
            kind,
            message: message.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new("io", e)
    }
}

impl From<coldpack::tensorstore::ArchiveError> for CliError {
    fn from(e: coldpack::tensorstore::ArchiveError) -> Self {
        match e {
            coldpack::tensorstore::ArchiveError::Io(e) => CliError::new("io", e),
            other => CliError::new("format", other),
        }
    }
}

impl From<coldpack::tensorstore::EfpkError> for CliError {
    fn from(e: coldpack::tensorstore::EfpkError) -> Self {
        match e {
            coldpack::tensorstore::EfpkError::Io(e) => CliError::new("io", e),
            other => CliError::new("format", other),
        }
    }
}

impl From<coldpack::quant::QuantError> for CliError {
    fn from(e: coldpack::quant::QuantError) -> Self {
        CliError::new("config", e)
    }
}

impl From<coldpack::pack::PackError> for CliError {
    fn from(e: coldpack::pack::PackError) -> Self {
        CliError::new("format", e)
    }
}

impl From<coldpack::pipeline::SimError> for CliError {
    fn from(e: coldpack::pipeline::SimError) -> Self {
        CliError::new("runtime", e)
    }
}

impl From<ColdStartError> for CliError {
    fn from(e: ColdStartError) -> Self {
        match e {
            ColdStartError::Io(e) => CliError::new("io", e),
            ColdStartError::Efpk(e) => e.into(),
            ColdStartError::Archive(e) => e.into(),
            ColdStartError::BadConfig(_) | ColdStartError::MissingCostModel => {
                CliError::new("config", e)
            }
            other => CliError::new("runtime", other),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::new("format", e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = cli.report.clone();
    match run(cli) {
        Ok(report) => {
            let text = serde_json::to_string_pretty(&report).expect("report serializes");
            match &out {
                Some(path) => {
                    if let Err(e) = std::fs::write(path, text + "\n") {
                        eprintln!("failed to write report: {e}");
                        return ExitCode::from(3);
                    }
                }
                None => println!("{text}"),
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = error_code(e.kind);
            let doc = json!({
                "schema_version": SCHEMA_VERSION,
                "error": {"code": code, "kind": e.kind, "message": e.message},
            });
            println!("{}", serde_json::to_string_pretty(&doc).unwrap());
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> Result<Value, CliError> {
    match cli.command {
        Command::Quantize(args) => cmd_quantize(args, cli.seed),
        Command::Inspect(args) => cmd_inspect(args),
        Command::UnpackVerify(args) => cmd_unpack_verify(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Coldstart(args) => cmd_coldstart(args, cli.seed),
        Command::GenModel(args) => cmd_gen_model(args, cli.seed),
    }
}

fn histogram_json(h: &[u64; 9]) -> Value {
    let mut map = serde_json::Map::new();
    for bits in 1..=8usize {
        if h[bits] > 0 {
            map.insert(bits.to_string(), json!(h[bits]));
        }
    }
    Value::Object(map)
}

fn mix_from_histogram(h: &[u64; 9]) -> Vec<(u8, u64)> {
    (1..=8u8).map(|b| (b, h[b as usize])).collect()
}

fn cmd_quantize(args: QuantizeArgs, seed: u64) -> Result<Value, CliError> {
    let mut config: QuantConfig = match &args.config {
        Some(path) => serde_json::from_slice(&std::fs::read(path)?)?,
        None => QuantConfig::default(),
    };
    if let Some(b) = args.avg_bits {
        config.avg_bits = b;
    }
    if let Some(r) = args.register_width {
        config.register_width = r;
    }
    if args.smoothing {
        config.smoothing = true;
    }

    let archive = read_tensor_archive(&args.input)?;
    let calib = config
        .smoothing
        .then(|| synthesize_calibration(&archive, args.calib_samples, seed));
    let model = quantize_model(&archive, &config, calib.as_ref())?;
    let bytes = write_efpk(&model, &args.output)?;

    let tensors: Vec<Value> = model
        .tensors
        .iter()
        .map(|t| {
            json!({
                "name": t.name,
                "layer": t.layer,
                "rows": t.rows,
                "cols": t.cols,
                "padded_rows": t.padded_rows,
                "bits_used": t.bits_used(),
                "mean_bits": t.mean_bits(),
                "bit_histogram": histogram_json(&t.bit_histogram()),
                "block_bytes": t.blocks.len(),
                "smoothing_alpha": t.smoothing.as_ref().map(|s| s.alpha),
            })
        })
        .collect();
    let hist = model.bit_histogram();
    Ok(json!({
        "schema_version": SCHEMA_VERSION,
        "input": args.input,
        "output": args.output,
        "register_width": model.register_width,
        "avg_bits": config.avg_bits,
        "smoothing": config.smoothing,
        "tensors": tensors,
        "bit_histogram": histogram_json(&hist),
        "unpack_ops_per_weight": unpack_instruction_estimate_for_mix(&mix_from_histogram(&hist))?,
        "bytes_written": bytes,
    }))
}

fn cmd_inspect(args: InspectArgs) -> Result<Value, CliError> {
    let reader = EfpkReader::open(&args.efpk)?;
    let model = reader.read_all()?;
    let tensors: Vec<Value> = model
        .tensors
        .iter()
        .map(|t| {
            json!({
                "name": t.name,
                "layer": t.layer,
                "rows": t.rows,
                "cols": t.cols,
                "padded_rows": t.padded_rows,
                "mean_bits": t.mean_bits(),
                "bit_histogram": histogram_json(&t.bit_histogram()),
                "block_bytes": t.blocks.len(),
                "smoothing": t.smoothing.is_some(),
                "activation_scale": t.activation_scale,
            })
        })
        .collect();
    let hist = model.bit_histogram();
    let total_channels: u64 = hist.iter().sum();
    let mean_bits = (1..=8usize)
        .map(|b| b as f64 * hist[b] as f64)
        .sum::<f64>()
        / total_channels as f64;
    Ok(json!({
        "schema_version": SCHEMA_VERSION,
        "path": args.efpk,
        "register_width": reader.register_width,
        "tensor_count": model.tensors.len(),
        "layers": model.layer_ids(),
        "tensors": tensors,
        "bit_histogram": histogram_json(&hist),
        "mean_bits": mean_bits,
        "unpack_ops_per_weight": unpack_instruction_estimate_for_mix(&mix_from_histogram(&hist))?,
        "file_bytes": reader.file_len,
    }))
}

fn cmd_unpack_verify(args: UnpackVerifyArgs) -> Result<Value, CliError> {
    let reader = EfpkReader::open(&args.efpk)?;
    let model = reader.read_all()?; // validates sizes and checksums
    let mut channels = 0u64;
    let mut mismatches: Vec<String> = Vec::new();
    for t in &model.tensors {
        let decoded = decode_bitwidth_metadata(&t.metadata, t.cols as usize)?;
        if decoded != t.channel_bits {
            mismatches.push(format!("{}: metadata mismatch", t.name));
        }
        for i in 0..t.cols as usize {
            let blocks = t.channel_blocks(i);
            let reference =
                unpack_channel_reference(blocks, t.channel_bits[i], model.register_width)?;
            let wide = unpack_channel_simd(blocks, t.channel_bits[i], model.register_width)?;
            if reference != wide {
                mismatches.push(format!("{} channel {i}: unpacker disagreement", t.name));
            }
            channels += 1;
        }
    }
    Ok(json!({
        "schema_version": SCHEMA_VERSION,
        "path": args.efpk,
        "tensors_checked": model.tensors.len(),
        "channels_checked": channels,
        "roundtrip": if mismatches.is_empty() { "ok" } else { "mismatch" },
        "mismatches": mismatches,
    }))
}

fn cmd_simulate(args: SimulateArgs) -> Result<Value, CliError> {
    let scenario: Scenario = if args.scenario == "bundled" {
        bundled_scenario()
    } else {
        serde_json::from_slice(&std::fs::read(&args.scenario)?)?
    };
    let policies: Vec<PolicyKind> = if args.policy == "all" {
        PolicyKind::ALL.to_vec()
    } else {
        vec![args
            .policy
            .parse()
            .map_err(|e: coldpack::pipeline::SimError| CliError::new("config", e))?]
    };
    if args.csv.is_some() && policies.len() != 1 {
        return Err(CliError::new(
            "config",
            "--csv needs a single --policy, not \"all\"",
        ));
    }

    let mut results = Vec::new();
    for kind in policies {
        let mut graph = build_prefill_graph(scenario.n_layers, scenario.n_chunks)?;
        place_operators(&mut graph, kind);
        let timeline = simulate(
            &graph,
            &scenario.cost_model,
            SchedPolicy::with_threshold(kind, scenario.steal_threshold),
        )?;
        if let Some(path) = &args.csv {
            std::fs::write(path, timeline.to_csv())?;
        }
        let mut entry = json!({
            "policy": kind.name(),
            "makespan": timeline.makespan,
            "cpu_bubble_rate": bubble_rate(&timeline, Device::Cpu),
            "npu_bubble_rate": bubble_rate(&timeline, Device::Npu),
            "steal_count": timeline.steals.len(),
        });
        if args.detail {
            entry["timeline"] = serde_json::to_value(&timeline)?;
        }
        results.push(entry);
    }
    Ok(json!({
        "schema_version": SCHEMA_VERSION,
        "n_layers": scenario.n_layers,
        "n_chunks": scenario.n_chunks,
        "steal_threshold": scenario.steal_threshold,
        "results": results,
    }))
}

fn cmd_coldstart(args: ColdstartArgs, seed: u64) -> Result<Value, CliError> {
    let mut config: ColdStartConfig = serde_json::from_slice(&std::fs::read(&args.config)?)?;
    if config.seed == 0 {
        config.seed = seed;
    }
    let report = run_coldstart(&config)?;
    if let Some(path) = &args.csv {
        std::fs::write(path, report.to_csv())?;
    }
    Ok(json!({
        "schema_version": SCHEMA_VERSION,
        "report": serde_json::to_value(&report)?,
    }))
}

fn cmd_gen_model(args: GenModelArgs, seed: u64) -> Result<Value, CliError> {
    let spec = SynthSpec {
        n_layers: args.layers,
        rows: args.rows,
        cols: args.cols,
        avg_bits: args.avg_bits,
        tensors_per_layer: args.tensors_per_layer,
        seed,
        register_width: args.register_width,
        smoothing: args.smoothing,
    };
    let (archive, model) = generate_synthetic_model(&spec)?;
    let archive_bytes = archive.write(&args.out_archive)?;
    let efpk_bytes = match &args.out_efpk {
        Some(path) => Some(write_efpk(&model, path)?),
        None => None,
    };
    let hist = model.bit_histogram();
    Ok(json!({
        "schema_version": SCHEMA_VERSION,
        "archive": args.out_archive,
        "archive_bytes": archive_bytes,
        "efpk": args.out_efpk,
        "efpk_bytes": efpk_bytes,
        "n_layers": args.layers,
        "tensors": model.tensors.len(),
        "bit_histogram": histogram_json(&hist),
    }))
}
