use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::sync::OnceLock;

use lockit::cli::{EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME};
use lockit::dataset::{read_csv, PoseRow};

fn lockit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lockit")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = lockit(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small simulated dataset shared by the tests.
fn data() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let d = tempfile::tempdir().unwrap();
        ok(&["simulate", "--out", s(d.path()), "--map-scans", "60", "--query-steps", "50", "--sessions", "2"]);
        d
    })
    .path()
}

/// Greedy spacing count over the pose file, quadratic and grid-free.
fn greedy_count(poses: &[PoseRow], spacing: f64) -> usize {
    let mut kept: Vec<(f64, f64)> = Vec::new();
    for p in poses {
        if kept.iter().all(|k| (k.0 - p.x).hypot(k.1 - p.y) >= spacing) {
            kept.push((p.x, p.y));
        }
    }
    kept.len()
}

#[test]
fn build_map_counts_nodes_and_is_reproducible() {
    let d = data();
    let tmp = tempfile::tempdir().unwrap();
    let poses: Vec<PoseRow> = read_csv(&d.join("mapping/poses.csv")).unwrap();
    for spacing in ["1", "2.5"] {
        let expected = greedy_count(&poses, spacing.parse().unwrap());
        let mut manifests = Vec::new();
        for k in 0..2 {
            let out = tmp.path().join(format!("map_{spacing}_{k}"));
            let stdout = ok(&["build-map", "--trajectory", s(&d.join("mapping")), "--spacing", spacing, "--out", s(&out)]);
            assert!(stdout.starts_with(&format!("{expected} nodes")), "{stdout}");
            manifests.push(fs::read(out.join("map.json")).unwrap());
        }
        assert_eq!(manifests[0], manifests[1]);
    }
}

#[test]
fn localize_evaluate_and_plot_are_deterministic() {
    let d = data();
    let tmp = tempfile::tempdir().unwrap();
    let map = tmp.path().join("map");
    ok(&["build-map", "--trajectory", s(&d.join("mapping")), "--out", s(&map)]);
    for k in 0..2 {
        let run = tmp.path().join(format!("run{k}"));
        ok(&["localize", "--map", s(&map), "--queries", s(&d.join("session_00")), "--fine", "none", "--seed", "3", "--burn-in", "5", "--out", s(&run)]);
        ok(&["plot", "--trace", s(&run.join("trace.csv")), "--out", s(&run.join("plots"))]);
    }
    for f in ["trace.csv", "poses.csv", "errors.csv", "plots/trajectory.png", "plots/particles_iter_0000.png"] {
        assert_eq!(fs::read(tmp.path().join("run0").join(f)).unwrap(), fs::read(tmp.path().join("run1").join(f)).unwrap(), "{f}");
    }
    let errors = fs::read_to_string(tmp.path().join("run0/errors.csv")).unwrap();
    assert!(errors.lines().skip(1).all(|l| l.contains(",coarse,")));
    assert!(errors.contains("session_00"));

    let eval = tmp.path().join("eval");
    let table = ok(&["evaluate", "--runs", s(&tmp.path().join("run0")), s(&tmp.path().join("run1")), "--out", s(&eval)]);
    assert!(table.contains("median error [m]"));
    assert!(eval.join("table.csv").is_file());
}

#[test]
fn config_file_is_overridden_by_flags() {
    let d = data();
    let tmp = tempfile::tempdir().unwrap();
    let map = tmp.path().join("map");
    ok(&["build-map", "--trajectory", s(&d.join("mapping")), "--out", s(&map)]);
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"mcl": {"sigma_l": 4.0, "seed": 1, "burn_in_iters": 3}, "method": "icp"}"#).unwrap();
    let run = tmp.path().join("run");
    ok(&["localize", "--map", s(&map), "--queries", s(&d.join("session_01")), "--config", s(&cfg), "--fine", "none", "--seed", "9", "--out", s(&run)]);
    let used: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(used["mcl"]["sigma_l"], 4.0);
    assert_eq!(used["mcl"]["seed"], 9);
    assert_eq!(used["mcl"]["burn_in_iters"], 3);
    assert_eq!(used["method"], "none");
}

#[test]
fn exit_codes_separate_config_data_and_runtime_failures() {
    let d = data();
    let tmp = tempfile::tempdir().unwrap();

    let missing = tmp.path().join("no_such_dir");
    let out = lockit(&["build-map", "--trajectory", s(&missing), "--out", s(&tmp.path().join("m"))]);
    assert_eq!(out.status.code(), Some(EXIT_DATA));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_dir"));

    let map = tmp.path().join("map");
    ok(&["build-map", "--trajectory", s(&d.join("mapping")), "--out", s(&map)]);
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"mcl": {"sigma_l": -1.0}}"#).unwrap();
    let out = lockit(&["localize", "--map", s(&map), "--queries", s(&d.join("session_00")), "--config", s(&bad), "--out", s(&tmp.path().join("r"))]);
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    let out = lockit(&["localize", "--map", s(&map), "--queries", s(&d.join("session_00")), "--fine", "gps", "--out", s(&tmp.path().join("r"))]);
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));

    // a scan that disappears mid-run stops the run but keeps what was computed
    let queries = tmp.path().join("queries");
    fs::create_dir_all(queries.join("clouds")).unwrap();
    for e in fs::read_dir(d.join("session_00/clouds")).unwrap() {
        let e = e.unwrap();
        fs::copy(e.path(), queries.join("clouds").join(e.file_name())).unwrap();
    }
    for f in ["odometry.csv", "groundtruth.csv"] {
        fs::copy(d.join("session_00").join(f), queries.join(f)).unwrap();
    }
    // three consecutive 0.5 m scans, more than the 1 m cadence can skip
    for id in ["q00030", "q00031", "q00032"] {
        fs::remove_file(queries.join(format!("clouds/{id}.lpcd"))).unwrap();
    }
    let run = tmp.path().join("partial");
    let out = lockit(&["localize", "--map", s(&map), "--queries", s(&queries), "--fine", "none", "--out", s(&run)]);
    assert_eq!(out.status.code(), Some(EXIT_RUNTIME));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(["q00030", "q00031", "q00032"].iter().any(|id| stderr.contains(id)), "{stderr}");
    let trace = fs::read_to_string(run.join("trace.csv")).unwrap();
    assert!(trace.lines().count() > 2);
    assert!(run.join("summary.json").is_file());
}

#[test]
fn plotting_an_empty_trace_fails_without_images() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("trace.csv"), "iter,est_x,est_y,est_theta,effective_sample_size,top1_node_id,top1_desc_dist\n").unwrap();
    let out = lockit(&["plot", "--trace", s(tmp.path()), "--out", s(&tmp.path().join("plots"))]);
    assert_eq!(out.status.code(), Some(EXIT_DATA));
    assert!(!tmp.path().join("plots").exists());
}
