use std::path::{Path, PathBuf};
use std::process::Command;

use htsfem::config::parse_config;
use htsfem::run::{run, RunSettings};
use htsfem::scenario::build_scenario;

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn htsfem(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_htsfem")).args(args).output().unwrap()
}

const QUIET: &str = r#"{
    "name": "quiet", "dim": 2,
    "geometry": {"domain": {"lo": [0, 0], "hi": [10, 10]}, "hts": {"lo": [4, 4.5], "hi": [6, 5.5]}},
    "mesh": {"hts_roots": [4, 2], "hts_level": 1},
    "material": {"n": 25, "jc": 1e8, "rho_air": 1},
    "excitation": {"none": {}},
    "stepper": {"dt_min": 1e-6, "dt_max": 1e-3, "t_end": 5e-3},
    "output": {"loss_window": [0, 5e-3]}
}"#;

#[test]
fn shipped_scenarios_build() {
    let mut n = 0;
    for entry in std::fs::read_dir(scenarios()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            let cfg = parse_config(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            let sc = build_scenario(&cfg).unwrap();
            assert!(sc.problem.space().num_free() > 0);
            n += 1;
        }
    }
    assert!(n >= 5);
}

#[test]
fn dry_run_reports_mesh_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config(&scenarios().join("norris_transport.json")).unwrap();
    let settings = RunSettings { output: Some(dir.path().to_path_buf()), dry_run: true, threads: None };
    let summary = run(&cfg, &settings).unwrap();
    assert!(summary.simulation.is_none());
    assert!(summary.stats.hts_cells > 0);
    let stats: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("mesh_stats.json")).unwrap()).unwrap();
    assert_eq!(stats["free_dofs"], summary.stats.free_dofs);
    assert!(!dir.path().join("timeseries.csv").exists());
}

#[test]
fn empty_scenario_fails_with_missing_keys() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.json");
    std::fs::write(&path, "").unwrap();
    let out = htsfem(&["run", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for key in ["name", "geometry", "excitation", "stepper"] {
        assert!(err.contains(key), "{err}");
    }
}

#[test]
fn missing_file_is_a_config_error() {
    let out = htsfem(&["run", "/nonexistent/scenario.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unloaded_run_stays_at_rest() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("quiet.json");
    std::fs::write(&path, QUIET).unwrap();
    let out_dir = dir.path().join("out");
    let out = htsfem(&["run", path.to_str().unwrap(), "-o", out_dir.to_str().unwrap(), "--log-level", "warn"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let csv = std::fs::read_to_string(out_dir.join("timeseries.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert!(!rows.is_empty());
    for row in rows {
        let cols: Vec<f64> = row.split(',').take(11).map(|c| c.parse().unwrap()).collect();
        // power, magnetization, field and current all vanish
        assert!(cols[5..11].iter().all(|&v| v == 0.0), "{row}");
    }
    let losses: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("losses.json")).unwrap()).unwrap();
    assert_eq!(losses["q_je"], 0.0);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["rejected_steps"], 0);
}
