//! End-to-end runs of the `coldpack` binary.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn coldpack(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coldpack"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}): {}",
            String::from_utf8_lossy(&out.stdout)
        )
    })
}

#[test]
fn gen_quantize_inspect_flow() {
    let dir = tempfile::tempdir().unwrap();
    let out = coldpack(
        &[
            "gen-model", "--layers", "2", "--rows", "64", "--cols", "8",
            "--avg-bits", "5", "--tensors-per-layer", "3",
            "--out-archive", "m.tar", "--seed", "7",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = stdout_json(&out);
    assert_eq!(report["schema_version"], 1);

    let out = coldpack(
        &["quantize", "--in", "m.tar", "--out", "m.efpk", "--avg-bits", "5"],
        dir.path(),
    );
    assert!(out.status.success());
    let quantize_report = stdout_json(&out);
    let histogram = quantize_report["bit_histogram"].clone();

    let out = coldpack(&["inspect", "m.efpk"], dir.path());
    assert!(out.status.success());
    let inspect_report = stdout_json(&out);
    // the file's histogram matches what the quantizer reported
    assert_eq!(inspect_report["bit_histogram"], histogram);
    assert_eq!(inspect_report["mean_bits"], 5.0);
    assert_eq!(inspect_report["tensor_count"], 6);

    let out = coldpack(&["unpack-verify", "m.efpk"], dir.path());
    assert!(out.status.success());
    let verify_report = stdout_json(&out);
    assert_eq!(verify_report["roundtrip"], "ok");
    assert_eq!(verify_report["channels_checked"], 6 * 8);
}

#[test]
fn same_seed_produces_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a.tar", "b.tar"] {
        let out = coldpack(
            &[
                "gen-model", "--layers", "1", "--rows", "32", "--cols", "4",
                "--out-archive", name, "--seed", "3",
            ],
            dir.path(),
        );
        assert!(out.status.success());
    }
    let a = std::fs::read(dir.path().join("a.tar")).unwrap();
    let b = std::fs::read(dir.path().join("b.tar")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn simulate_bundled_policy_ladder() {
    let dir = tempfile::tempdir().unwrap();
    let out = coldpack(&["simulate", "--scenario", "bundled"], dir.path());
    assert!(out.status.success());
    let report = stdout_json(&out);
    let results = report["results"].as_array().unwrap();
    assert_eq!(results.len(), 4);
    let by_name = |name: &str| {
        results
            .iter()
            .find(|r| r["policy"] == name)
            .unwrap_or_else(|| panic!("policy {name} in report"))
    };
    let fine = by_name("fine-placement");
    let priority = by_name("plus-priority");
    let steal = by_name("plus-stealing");
    // stealing strictly lowers the CPU bubble rate versus the
    // non-stealing fine-grained policies
    let cpu = |v: &Value| v["cpu_bubble_rate"].as_f64().unwrap();
    assert!(cpu(steal) < cpu(priority));
    assert!(cpu(steal) < cpu(fine));
    assert!(steal["steal_count"].as_u64().unwrap() > 0);
    assert_eq!(fine["steal_count"], 0);
}

#[test]
fn simulate_single_policy_with_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = coldpack(
        &["simulate", "--scenario", "bundled", "--policy", "steal", "--csv", "t.csv"],
        dir.path(),
    );
    assert!(out.status.success());
    let csv = std::fs::read_to_string(dir.path().join("t.csv")).unwrap();
    assert!(csv.starts_with("task,device,start,end\n"));
    assert!(csv.lines().count() > 16 * 15 / 2);
}

#[test]
fn coldstart_simulated_from_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = coldpack(
        &[
            "gen-model", "--layers", "4", "--rows", "32", "--cols", "4",
            "--tensors-per-layer", "2", "--register-width", "8",
            "--out-archive", "m.tar", "--out-efpk", "m.efpk",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    std::fs::write(
        dir.path().join("cs.json"),
        serde_json::json!({
            "efpk": "m.efpk",
            "prompt_length": 32,
            "chunk_length": 16,
            "mode": "simulated",
            "cost_model": {
                "load_per_layer": 2.0,
                "unpack_per_layer": 1.0,
                "compute": {"per_layer": 3.0}
            }
        })
        .to_string(),
    )
    .unwrap();
    let out = coldpack(
        &["coldstart", "--config", "cs.json", "--csv", "cs.csv"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = stdout_json(&out);
    assert_eq!(report["report"]["ttft"], 15.0);
    let csv = std::fs::read_to_string(dir.path().join("cs.csv")).unwrap();
    assert!(csv.contains("layer0/load,loader0,"));
}

#[test]
fn errors_are_machine_readable_with_stable_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = coldpack(&["inspect", "missing.efpk"], dir.path());
    assert_eq!(out.status.code(), Some(3)); // i/o
    let report = stdout_json(&out);
    assert_eq!(report["error"]["code"], 3);
    assert_eq!(report["error"]["kind"], "io");

    std::fs::write(dir.path().join("junk.efpk"), b"NOPE").unwrap();
    let out = coldpack(&["inspect", "junk.efpk"], dir.path());
    assert_eq!(out.status.code(), Some(4)); // format
    assert_eq!(stdout_json(&out)["error"]["kind"], "format");

    // usage errors come from the parser with exit code 2
    let out = coldpack(&["simulate", "--policy", "steal"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}
