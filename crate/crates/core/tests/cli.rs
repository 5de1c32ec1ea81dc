use std::fs;
use std::path::Path;

use clap::Parser;
use nvsim::cli::{run, Cli, RunManifest};

fn nvsim(args: &[&str]) -> i32 {
    let mut argv = vec!["nvsim"];
    argv.extend_from_slice(args);
    run(Cli::parse_from(argv))
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

const SMALL_DARKMAP: &str = r#"{
    "zeeman_hz": 18e6,
    "delta": {"start_hz": -30e6, "stop_hz": 30e6, "points": 11},
    "modulation_offset": {"start_hz": -30e6, "stop_hz": 30e6, "points": 21}
}"#;

#[test]
fn darkmap_writes_self_describing_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "dm.json", SMALL_DARKMAP);
    let out = tmp.path().join("out");
    assert_eq!(nvsim(&["darkmap", "--config", &cfg, "--out", out.to_str().unwrap()]), 0);
    for f in ["result.csv", "fits.json", "meta.json", "config.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let csv = fs::read_to_string(out.join("result.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "delta_hz,modulation_hz,excited_population");
    assert_eq!(lines.count(), 11 * 21);
    let meta: RunManifest = serde_json::from_str(&fs::read_to_string(out.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta.experiment, "darkmap");
    assert_eq!(meta.config_hash.len(), 64);
    assert_eq!(meta.constants_version, nvsim::constants::Constants::default().version);

    // The written config reproduces the run bit for bit.
    let again = tmp.path().join("again");
    let cfg2 = out.join("config.json");
    assert_eq!(nvsim(&["darkmap", "--config", cfg2.to_str().unwrap(), "--out", again.to_str().unwrap()]), 0);
    assert_eq!(fs::read(out.join("result.csv")).unwrap(), fs::read(again.join("result.csv")).unwrap());
    let meta2: RunManifest = serde_json::from_str(&fs::read_to_string(again.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta.config_hash, meta2.config_hash);
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "tp.json",
        r#"{"powers_w": [2e-5, 4.6e-5], "samples": 8, "time_points": 41, "seed": 7}"#,
    );
    let mut outputs = Vec::new();
    for threads in ["1", "3"] {
        let out = tmp.path().join(format!("t{threads}"));
        assert_eq!(nvsim(&["--threads", threads, "rabi-2photon", "--config", &cfg, "--out", out.to_str().unwrap()]), 0);
        outputs.push((fs::read(out.join("result.csv")).unwrap(), fs::read(out.join("fits.json")).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn dry_run_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    for (cmd, text) in [("pump", "{}"), ("rabi-mw", "{}"), ("ple", r#"{"points": 3}"#), ("darkmap", SMALL_DARKMAP)] {
        let cfg = write(tmp.path(), "c.json", text);
        assert_eq!(nvsim(&[cmd, "--config", &cfg, "--out", out.to_str().unwrap(), "--dry-run"]), 0, "{cmd}");
    }
    assert!(!out.exists());
}

#[test]
fn failure_cleans_previous_outputs_and_reports_json() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let good = write(tmp.path(), "good.json", SMALL_DARKMAP);
    assert_eq!(nvsim(&["darkmap", "--config", &good, "--out", out.to_str().unwrap()]), 0);

    let bad = write(tmp.path(), "bad.json", r#"{"zeeman_hz": 18e6, "delta": {"start_hz": 0, "stop_hz": 1, "points": 1}}"#);
    let code = nvsim(&["darkmap", "--config", &bad, "--out", out.to_str().unwrap()]);
    assert_ne!(code, 0);
    let names: Vec<String> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert_eq!(names, vec!["error.json".to_string()]);
    let err: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("error.json")).unwrap()).unwrap();
    assert_eq!(err["kind"], "config");
    assert!(err["message"].as_str().unwrap().contains("points"));
}

#[test]
fn unknown_nested_key_is_reported_with_its_path() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write(tmp.path(), "c.json", r#"{"model": {"zeeman": 1e6}}"#);
    assert_eq!(nvsim(&["rabi-mw", "--config", &cfg, "--out", out.to_str().unwrap()]), 2);
    let err: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("error.json")).unwrap()).unwrap();
    assert_eq!(err["kind"], "parse");
    let msg = err["message"].as_str().unwrap();
    assert!(msg.contains("model.zeeman"), "{msg}");
}

#[test]
fn missing_config_file_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let missing = tmp.path().join("nope.json");
    assert_ne!(nvsim(&["pump", "--config", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]), 0);
    assert!(out.join("error.json").exists());
}

#[test]
fn simulate_sequence_trajectory() {
    let tmp = tempfile::tempdir().unwrap();
    // Resonant π pulse on |0⟩→|Ex⟩ without dissipation, then free decay.
    let cfg = write(
        tmp.path(),
        "seq.json",
        r#"{
            "initial": {"kind": "state", "label": "0"},
            "segments": [
                {"duration_s": 2.5e-8, "dissipation": false,
                 "drives": [{"transition": ["0", "Ex"], "polarization": {"kind": "linear_x"}, "rabi_hz": 1e7}]},
                {"duration_s": 1e-7}
            ],
            "samples_per_segment": 11,
            "coherences": [["0", "Ex"]]
        }"#,
    );
    let out = tmp.path().join("out");
    assert_eq!(nvsim(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap()]), 0);
    let csv = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    assert_eq!(header[0], "time_s");
    assert_eq!(header.len(), 1 + 9 + 1);
    let rows: Vec<Vec<f64>> =
        csv.lines().skip(1).map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 21);
    let ex = header.iter().position(|h| *h == "pop_Ex").unwrap();
    // The linear-x projection onto 0→Ex is not exactly 1, so the transfer is near-complete rather than perfect.
    assert!(rows[10][ex] > 0.95, "{}", rows[10][ex]);
    assert!(rows[20][ex] < rows[10][ex]);
    for r in &rows {
        let total: f64 = r[1..10].iter().sum();
        assert!((total - 1.0).abs() < 1e-8);
    }
}

#[test]
fn version_and_constants_commands() {
    assert_eq!(nvsim(&["version"]), 0);
    assert_eq!(nvsim(&["constants", "show"]), 0);
    let tmp = tempfile::tempdir().unwrap();
    let bad = write(tmp.path(), "k.json", "{}");
    assert_ne!(nvsim(&["--constants", &bad, "version"]), 0);
}
