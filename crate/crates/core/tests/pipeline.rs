use std::sync::{Arc, OnceLock};

use lockit::cloud::PreprocessConfig;
use lockit::dataset::QueryScan;
use lockit::features::{FeatureBackend, SyntheticBackend};
use lockit::pipeline::{run_localization, LocalizationConfig, COARSE, TRACE_FILE};
use lockit::registration::FineMethod;
use lockit::sim::{ScenarioConfig, World};
use lockit::topo_map::{build_map, CloudSource, TopoMap};

struct Fixture {
    scenario: ScenarioConfig,
    world: World,
    map: Arc<TopoMap>,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let scenario = ScenarioConfig::default();
        let world = scenario.world().unwrap();
        let map = Arc::new(build_map(&scenario.mapping(&world), 1.0, &SyntheticBackend::new(), &PreprocessConfig::default()).unwrap());
        Fixture { scenario, world, map }
    })
}

fn backend() -> Arc<dyn FeatureBackend> {
    Arc::new(SyntheticBackend::new())
}

fn session(k: u64, steps: usize) -> Vec<QueryScan> {
    let f = fixture();
    let mut s = f.scenario.clone();
    s.query.steps = steps;
    s.session(&f.world, k).unwrap()
}

fn coarse_only(seed: u64) -> LocalizationConfig {
    let mut cfg = LocalizationConfig { method: FineMethod::None, ..Default::default() };
    cfg.mcl.seed = seed;
    cfg
}

#[test]
fn identical_config_gives_identical_trace_files() {
    let q = session(3, 120);
    let cfg = coarse_only(11);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        run_localization(fixture().map.clone(), backend(), &q, &cfg)
            .unwrap()
            .write(d.path(), &cfg)
            .unwrap();
    }
    for name in [TRACE_FILE, "poses.csv", "particles.csv", "errors.csv", "summary.json"] {
        let a = std::fs::read(dirs[0].path().join(name)).unwrap();
        let b = std::fs::read(dirs[1].path().join(name)).unwrap();
        assert_eq!(a, b, "{name} differs");
    }
}

#[test]
fn coarse_only_runs_report_only_coarse_errors() {
    let q = session(4, 120);
    let cfg = coarse_only(2);
    let out = run_localization(fixture().map.clone(), backend(), &q, &cfg).unwrap();
    assert!(!out.errors.is_empty());
    assert!(out.errors.iter().all(|e| e.method == COARSE));
    assert!(out.fine.is_empty());
    assert!(out.errors.iter().all(|e| e.iter >= cfg.mcl.burn_in_iters));
    let s = out.summary(&cfg);
    assert!(s.fine.is_none());
    assert_eq!(s.scored_queries, out.errors.len());
}

#[test]
fn fine_methods_report_both_estimates() {
    let q = session(5, 70);
    let mut cfg = coarse_only(5);
    cfg.method = FineMethod::Icp;
    let out = run_localization(fixture().map.clone(), backend(), &q, &cfg).unwrap();
    let coarse = out.errors_for(COARSE);
    let icp = out.errors_for("icp");
    assert_eq!(coarse.len(), icp.len());
    assert_eq!(out.fine.len(), out.trace.len());
    let median = |v: &[f64]| lockit::eval::median(v).unwrap();
    assert!(median(&icp) < median(&coarse));
}

#[test]
fn kidnapped_filter_reconverges_within_thirty_steps() {
    let q = session(6, 300);
    let kidnap_at = 60;
    let mut cfg = coarse_only(8);
    cfg.reinit_at = vec![kidnap_at];
    let out = run_localization(fixture().map.clone(), backend(), &q, &cfg).unwrap();
    assert!(out.poses.iter().find(|p| p.iter == kidnap_at).unwrap().reinitialized);
    let spacing = fixture().map.spacing_m();
    let err = |iter: usize| {
        let p = out.poses.iter().find(|p| p.iter == iter).unwrap();
        (p.coarse_x - p.truth_x.unwrap()).hypot(p.coarse_y - p.truth_y.unwrap())
    };
    let recovered = (kidnap_at + 1..=kidnap_at + 30).find(|&i| err(i) < 1.5 * spacing);
    assert!(recovered.is_some(), "no recovery within 30 steps of the kidnap");
    let settled: Vec<f64> = (kidnap_at + 30..out.trace.len()).map(err).collect();
    assert!(lockit::eval::median(&settled).unwrap() < 1.5 * spacing);
}

#[test]
fn failure_mid_run_keeps_earlier_iterations() {
    let mut q = session(7, 80);
    q[50].cloud = CloudSource::File("/nonexistent/scan.lpcd".into());
    let cfg = coarse_only(1);
    let out = run_localization(fixture().map.clone(), backend(), &q, &cfg).unwrap();
    let failure = out.failure.clone().expect("run should stop");
    assert!(failure.contains("q00050"), "{failure}");
    assert!(!out.trace.is_empty());
    assert!(out.poses.iter().all(|p| p.scan_id.as_str() < "q00050"));
    let dir = tempfile::tempdir().unwrap();
    out.write(dir.path(), &cfg).unwrap();
    let summary = std::fs::read_to_string(dir.path().join("summary.json")).unwrap();
    assert!(summary.contains("nonexistent"));
}

#[test]
fn invalid_inputs_are_rejected_up_front() {
    let f = fixture();
    let mut cfg = coarse_only(0);
    assert!(run_localization(f.map.clone(), backend(), &[], &cfg).is_err());
    cfg.mcl.sigma_l = 0.0;
    assert!(matches!(
        run_localization(f.map.clone(), backend(), &session(0, 5), &cfg),
        Err(lockit::LockitError::InvalidConfig(_))
    ));
}
