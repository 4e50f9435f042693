use ifmm::cli::{run_direct, run_iterative, to_csv, Distribution, DScaling, Mode, Precond, RunConfig, RunReport, CSV_HEADER};

fn schema_validator() -> jsonschema::Validator {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../schemas/run_report.schema.json");
    let schema: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    jsonschema::validator_for(&schema).unwrap()
}

fn assert_valid(report: &RunReport) {
    let v = schema_validator();
    let inst = serde_json::to_value(report).unwrap();
    let errors: Vec<String> = v.iter_errors(&inst).map(|e| format!("{e} at {}", e.instance_path)).collect();
    assert!(errors.is_empty(), "schema violations: {errors:?}");
}

fn sphere_1000_n4() -> RunConfig {
    RunConfig {
        n_points: 1000,
        distribution: Distribution::Sphere,
        cheb_nodes: 4,
        epsilon: 1e-3,
        d_scaling: DScaling::Sphere,
        ..Default::default()
    }
}

#[test]
fn direct_sphere_report_has_small_error_and_positive_timings() {
    let r = run_direct(&sphere_1000_n4()).unwrap();
    assert!(r.relative_error.unwrap() < 1e-2, "{:?}", r.relative_error);
    let t = &r.timings;
    for v in [t.initialization, t.sigma0_estimation, t.elimination, t.substitution, t.total] {
        assert!(v > 0.0, "{t:?}");
    }
    let parts = t.initialization + t.sigma0_estimation + t.elimination + t.substitution;
    assert!(parts <= t.total * 1.05);
    assert!(r.elimination_breakdown.sum() <= t.elimination * 1.05);
    assert_eq!(r.reference_operator, "dense");
    assert_valid(&r);
}

#[test]
fn single_leaf_override_is_exact() {
    let cfg = RunConfig { n_points: 100, depth: Some(0), ..Default::default() };
    let r = run_direct(&cfg).unwrap();
    assert!(r.relative_error.unwrap() <= 1e-10);
    assert_valid(&r);
}

fn strip_timings(mut r: RunReport) -> RunReport {
    r.timings = Default::default();
    r.elimination_breakdown = Default::default();
    for l in &mut r.ranks.levels {
        l.compress_seconds = 0.0;
    }
    r
}

#[test]
fn reruns_are_identical_apart_from_timings() {
    let cfg = RunConfig { n_points: 1500, cheb_nodes: 3, ..Default::default() };
    let a = strip_timings(run_direct(&cfg).unwrap());
    let b = strip_timings(run_direct(&cfg).unwrap());
    assert_eq!(a, b);
    let g = RunConfig { mode: Mode::Gmres, ..cfg };
    let a = strip_timings(run_iterative(&g).unwrap());
    let b = strip_timings(run_iterative(&g).unwrap());
    assert_eq!(a, b);
}

#[test]
fn iterative_reports_validate_for_every_preconditioner() {
    for p in [Precond::None, Precond::Blockdiag, Precond::Ifmm] {
        let cfg = RunConfig { n_points: 800, mode: Mode::Gmres, precond: p, block_size: 50, ..Default::default() };
        let r = run_iterative(&cfg).unwrap();
        let t = r.iterations.as_ref().unwrap();
        assert!(t.converged, "{p:?}");
        assert!(r.relative_residual.unwrap() < 1e-8);
        assert_valid(&r);
    }
}

#[test]
fn near_exact_preconditioner_needs_one_or_two_iterations() {
    let cfg = RunConfig { n_points: 500, mode: Mode::Gmres, epsilon: 0.0, cheb_nodes: 6, leaf_target: 40, ..Default::default() };
    let r = run_iterative(&cfg).unwrap();
    let it = r.iterations.unwrap().iterations;
    assert!((1..=2).contains(&it), "{it} iterations");
}

#[test]
fn csv_has_header_and_one_row_per_run() {
    let r = run_direct(&RunConfig { n_points: 300, ..Default::default() }).unwrap();
    let csv = to_csv(&[r.clone(), r]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(lines.len(), 3);
    let cols = CSV_HEADER.split(',').count();
    assert!(lines[1..].iter().all(|l| l.split(',').count() == cols));
}
