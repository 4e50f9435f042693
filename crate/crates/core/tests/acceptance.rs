//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Pass criterion ids (e.g. `C2 C7`) as
//! arguments to run a subset.

use faer::Mat;
use ifmm::cli::{
    build_solver, run_comparison, run_direct, run_iterative_on, run_scaling, DScaling, Distribution, KernelKind, Precond,
    Problem, RunConfig, ScalingReport, Side,
};
use ifmm::dense::{frob, lu_solve, mul, orthonormality_defect, to_vec};
use ifmm::factor::{factorize, FactorOptions, EDGES_PER_CLUSTER_BOUND};
use ifmm::h2build::{assemble_extended_graph, build_operators, TreeDepth, WeightMode};
use ifmm::kernel::{benchmark_kernel, generate_scene, SceneSpec};
use ifmm::krylov::{gmres, DenseOperator, GmresOptions, PrecondSide};
use ifmm::lowrank::{full_svd, reconstruction_error, truncated_svd, weighted_basis_union};
use ifmm::refcheck::{clustered_fraction, dense_eigs, relative_error};
use ifmm::tree::{build_octree_with_depth, cells_adjacent, compute_topology, points_from_coords};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::cell::OnceCell;
use std::process::ExitCode;
use std::time::Instant;

type Outcome = Result<String, String>;

/// (id, description, time limit in seconds, check)
type Criterion<'a> = (&'static str, &'static str, f64, Box<dyn Fn() -> Outcome + 'a>);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn cube_cfg(n: usize, d: f64) -> RunConfig {
    RunConfig { distribution: Distribution::Cube, n_points: n, d, ..Default::default() }
}

fn iterations(r: &ifmm::cli::RunReport) -> (usize, bool) {
    let t = r.iterations.as_ref().expect("iterative run has a trace");
    (t.iterations, t.converged)
}

fn c1() -> Outcome {
    let n = 500;
    let coords = generate_scene(&SceneSpec::CubeUniform { n, seed: 11 }).map_err(err)?.coords();
    let k = benchmark_kernel(1e-3).map_err(err)?;
    let ops = build_operators(&coords, &k, TreeDepth::Fixed(3), 3, Some((WeightMode::Rigorous, 0.0))).map_err(err)?;
    let a = ops.to_dense(1000).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let graph = assemble_extended_graph(ops, &b).map_err(err)?;
    let f = factorize(&graph, &FactorOptions { epsilon: 0.0, ..Default::default() }).map_err(err)?;
    let x = f.solve(&b).map_err(err)?;
    let xd = to_vec(lu_solve(a.as_ref(), Mat::from_fn(n, 1, |i, _| b[i]).as_ref()).as_ref());
    let e = relative_error(&x, &xd);
    check(e <= 1e-9, format!("N={n} depth 3, epsilon 0: relative error vs dense LU of the H2 matrix {e:.2e} (limit 1e-9)"))
}

fn c2() -> Outcome {
    let mut errs = Vec::new();
    for n in 1..=4 {
        let cfg = RunConfig { cheb_nodes: n, d_scaling: DScaling::Cube, ..cube_cfg(2000, 1e-3) };
        errs.push(run_direct(&cfg).map_err(err)?.relative_error.unwrap_or(f64::NAN));
    }
    let monotone = errs.windows(2).all(|w| w[1] <= w[0]);
    let text: Vec<String> = errs.iter().map(|e| format!("{e:.2e}")).collect();
    check(monotone && errs[3] <= 1e-2, format!("N=2000 cube, errors for n=1..4: [{}]", text.join(", ")))
}

/// The sphere sweep, run twice; per size the faster run is kept.
fn sweep() -> Result<ScalingReport, String> {
    let cfg = RunConfig {
        distribution: Distribution::Sphere,
        d_scaling: DScaling::Sphere,
        cheb_nodes: 2,
        ..Default::default()
    };
    let sizes = [10_000, 20_000, 40_000, 80_000];
    let first = run_scaling(&cfg, &sizes).map_err(err)?;
    let second = run_scaling(&cfg, &sizes).map_err(err)?;
    let time = |r: &ifmm::cli::RunReport| r.timings.sigma0_estimation + r.timings.elimination + r.timings.substitution;
    let xs: Vec<f64> = sizes.iter().map(|&n| n as f64).collect();
    let ts: Vec<f64> = first.runs.iter().zip(&second.runs).map(|(a, b)| time(a).min(time(b))).collect();
    Ok(ScalingReport { slope: ifmm::cli::loglog_slope(&xs, &ts), ..first })
}

fn c3(s: &ScalingReport) -> Outcome {
    let ts: Vec<String> = s
        .runs
        .iter()
        .map(|r| format!("{}:{:.2}s", r.problem.n_points, r.timings.sigma0_estimation + r.timings.elimination + r.timings.substitution))
        .collect();
    check((0.8..=1.3).contains(&s.slope), format!("log-log slope {:.3} (range 0.8..1.3); first pass {}", s.slope, ts.join(" ")))
}

fn c4(s: &ScalingReport) -> Outcome {
    let ranks: Vec<String> = s.runs.iter().map(|r| r.ranks.max_rank.to_string()).collect();
    check(s.max_rank_ratio <= 2.0, format!("max far-field ranks [{}], ratio {:.2} (limit 2)", ranks.join(", "), s.max_rank_ratio))
}

fn c5() -> Outcome {
    let cfg = RunConfig { cheb_nodes: 2, ..cube_cfg(20_000, 1e-3) };
    let problem = Problem::new(&cfg).map_err(err)?;
    let (none, _) = iterations(&run_iterative_on(&cfg, &problem, Precond::None).map_err(err)?);
    let (i2, c2) = iterations(&run_iterative_on(&cfg, &problem, Precond::Ifmm).map_err(err)?);
    let cfg3 = RunConfig { cheb_nodes: 3, ..cfg };
    let (i3, c3) = iterations(&run_iterative_on(&cfg3, &problem, Precond::Ifmm).map_err(err)?);
    check(
        none >= 3 * i2 && i3 <= 10 && c2 && c3,
        format!("N=2e4 cube d=1e-3: none {none}, ifmm n=2 {i2}, ifmm n=3 {i3} (need none >= 3 x n=2, n=3 <= 10)"),
    )
}

fn c6() -> Outcome {
    let cfg = RunConfig { cheb_nodes: 3, ..cube_cfg(20_000, 1e-2) };
    let problem = Problem::new(&cfg).map_err(err)?;
    let (none, none_conv) = iterations(&run_iterative_on(&cfg, &problem, Precond::None).map_err(err)?);
    let (i3, c3) = iterations(&run_iterative_on(&cfg, &problem, Precond::Ifmm).map_err(err)?);
    check(
        c3 && (!none_conv || none >= 5 * i3),
        format!("N=2e4 cube d=1e-2: none {none} (converged {none_conv}), ifmm n=3 {i3} (converged {c3})"),
    )
}

fn spread(eigs: &[(f64, f64)]) -> f64 {
    eigs.iter().map(|(re, im)| (re - 1.0).hypot(*im)).fold(0.0, f64::max)
}

fn c7() -> Outcome {
    let base = cube_cfg(2000, 1e-3);
    let problem = Problem::new(&base).map_err(err)?;
    let a = problem.dense.as_ref().ok_or("dense matrix expected at N=2000")?;
    let dim = a.nrows();
    let unpre = dense_eigs(a.as_ref()).map_err(err)?;
    let mut fractions = Vec::new();
    let mut spreads = Vec::new();
    for n in 1..=3 {
        let cfg = RunConfig { cheb_nodes: n, ..base.clone() };
        let solver = build_solver(&cfg, &problem).map_err(err)?;
        let mut pa = Mat::<f64>::zeros(dim, dim);
        for j in 0..dim {
            let colj: Vec<f64> = (0..dim).map(|i| a[(i, j)]).collect();
            let y = solver.factorization.solve(&colj).map_err(err)?;
            for i in 0..dim {
                pa[(i, j)] = y[i];
            }
        }
        let eigs = dense_eigs(pa.as_ref()).map_err(err)?;
        fractions.push(clustered_fraction(&eigs, 0.5));
        spreads.push(spread(&eigs));
    }
    // the fraction saturates at 1 once every eigenvalue is inside the disk, so
    // strict improvement is checked on the largest distance from 1
    let ok = fractions[2] >= 0.9 && fractions.windows(2).all(|w| w[1] >= w[0]) && spreads.windows(2).all(|w| w[1] < w[0]);
    let f: Vec<String> = fractions.iter().map(|v| format!("{v:.4}")).collect();
    let r: Vec<String> = spreads.iter().map(|v| format!("{v:.2e}")).collect();
    check(
        ok,
        format!(
            "N=2000 d=1e-3: fraction with |l-1| < 0.5 for n=1..3 [{}], max |l-1| [{}]; unpreconditioned fraction {:.4}, max |l-1| {:.2}",
            f.join(", "),
            r.join(", "),
            clustered_fraction(&unpre, 0.5),
            spread(&unpre)
        ),
    )
}

fn c8() -> Outcome {
    let mut rows = Vec::new();
    let mut ok = true;
    let base = cube_cfg(10_000, 1e-3);
    let problem = Problem::new(&base).map_err(err)?;
    for n in [2, 3] {
        let mut its = [0usize; 2];
        for (k, side) in [Side::Left, Side::Right].into_iter().enumerate() {
            let cfg = RunConfig { cheb_nodes: n, precond_side: side, ..base.clone() };
            let (it, conv) = iterations(&run_iterative_on(&cfg, &problem, Precond::Ifmm).map_err(err)?);
            ok &= conv;
            its[k] = it;
        }
        let (lo, hi) = (its[0].min(its[1]) as f64, its[0].max(its[1]) as f64);
        ok &= hi <= 1.2 * lo;
        rows.push(format!("n={n}: left {} right {}", its[0], its[1]));
    }
    check(ok, format!("N=1e4 d=1e-3, {}", rows.join("; ")))
}

fn c9() -> Outcome {
    let lattice = RunConfig {
        kernel: KernelKind::Rpy,
        distribution: Distribution::Lattice,
        cheb_nodes: 2,
        gmres_tol: 1e-8,
        ..Default::default()
    };
    let rep = run_comparison(&lattice, &[Precond::None, Precond::Blockdiag, Precond::Ifmm]).map_err(err)?;
    let unknowns = rep.runs[0].problem.unknowns;
    let get = |p| rep.iterations(p).unwrap_or(usize::MAX);
    let (none, bd, ifmm) = (get(Precond::None), get(Precond::Blockdiag), get(Precond::Ifmm));
    let shells = RunConfig { distribution: Distribution::Shells, cheb_nodes: 3, block_size: 108, ..lattice };
    let rep = run_comparison(&shells, &[Precond::None, Precond::Ifmm]).map_err(err)?;
    let (snone, sifmm) = (rep.iterations(Precond::None).unwrap_or(usize::MAX), rep.iterations(Precond::Ifmm).unwrap_or(usize::MAX));
    let converged = rep.runs.iter().all(|r| iterations(r).1);
    check(
        unknowns == 8064 && ifmm <= bd && bd <= none && sifmm < snone && converged,
        format!(
            "lattice ({unknowns} unknowns): ifmm n=2 {ifmm}, blockdiag {bd}, none {none}; shells: ifmm n=3 {sifmm}, none {snone}"
        ),
    )
}

fn c10(s: &ScalingReport) -> Outcome {
    let per: Vec<String> = s.runs.iter().map(|r| format!("{:.1}", r.edges.peak_edges_per_cluster)).collect();
    check(
        s.max_edges_per_cluster <= EDGES_PER_CLUSTER_BOUND as f64,
        format!("peak edges per cluster over the sweep [{}], bound C={EDGES_PER_CLUSTER_BOUND}", per.join(", ")),
    )
}

/// Fixed-seed spot checks of the module invariants; the randomized suites
/// live in the other test targets.
fn c11() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut failures = Vec::new();
    for case in 0..20 {
        let (m, n) = (rng.random_range(1..25), rng.random_range(1..25));
        let a = Mat::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        let f = full_svd(a.as_ref()).map_err(err)?;
        if orthonormality_defect(f.u.as_ref()) > 1e-12 || orthonormality_defect(f.v.as_ref()) > 1e-12 {
            failures.push(format!("orthonormality case {case}"));
        }
        let thr = 0.3 * f.sigma[0];
        let t = truncated_svd(a.as_ref(), thr).map_err(err)?;
        let next = f.sigma.get(t.rank()).copied().unwrap_or(0.0);
        if (reconstruction_error(a.as_ref(), &t) - next).abs() > 1e-10 * f.sigma[0] {
            failures.push(format!("truncation error case {case}"));
        }
        let q = full_svd(Mat::from_fn(m, m.min(3), |_, _| rng.random_range(-1.0..1.0)).as_ref()).map_err(err)?.u;
        let fill = Mat::from_fn(m, 2, |_, _| rng.random_range(-1.0..1.0));
        let up = weighted_basis_union(q.as_ref(), &vec![1.0; q.ncols()], fill.as_ref(), &[2.0, 0.5], 0.0).map_err(err)?;
        let mut d = mul(up.new_basis.as_ref(), up.fill_map.as_ref());
        d -= &fill;
        if frob(d.as_ref()) > 1e-10 {
            failures.push(format!("basis union case {case}"));
        }
    }
    let op = DenseOperator { a: Mat::identity(5, 5) };
    let (x, t) = gmres(&op, &[1.0, 2.0, 3.0, 4.0, 5.0], GmresOptions::default(), None, PrecondSide::None).map_err(err)?;
    if t.iterations != 1 || x != vec![1.0, 2.0, 3.0, 4.0, 5.0] {
        failures.push("gmres identity".into());
    }
    let d2 = DenseOperator { a: Mat::from_fn(2, 2, |i, j| if i == j { (i + 1) as f64 } else { 0.0 }) };
    let (x, t) = gmres(&d2, &[1.0, 1.0], GmresOptions::default(), None, PrecondSide::None).map_err(err)?;
    if t.iterations > 2 || relative_error(&x, &[1.0, 0.5]) > 1e-12 {
        failures.push("gmres diag(1,2)".into());
    }
    for case in 0..10 {
        let coords: Vec<[f64; 3]> = (0..80).map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect();
        let depth = 1 + case % 3;
        let (tree, _) = build_octree_with_depth(&points_from_coords(&coords), depth).map_err(err)?;
        let topo = compute_topology(&tree);
        for (l, cl) in tree.levels.iter().enumerate() {
            for i in 0..cl.len() {
                for j in 0..cl.len() {
                    let adj = cells_adjacent(cl[i].cell, cl[j].cell);
                    let padj = l > 0
                        && cells_adjacent(tree.levels[l - 1][cl[i].parent.unwrap()].cell, tree.levels[l - 1][cl[j].parent.unwrap()].cell);
                    if topo.is_neighbor(l, i, j) != adj || topo.interactions[l][i].binary_search(&j).is_ok() != (!adj && padj) {
                        failures.push(format!("topology case {case} level {l}"));
                    }
                }
            }
        }
    }
    check(failures.is_empty(), if failures.is_empty() { "SVD, truncation, basis union, GMRES and topology spot checks".into() } else { failures.join(", ") })
}

fn main() -> ExitCode {
    faer::set_global_parallelism(faer::Par::Seq);
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| a.starts_with('C')).collect();
    let selected = |id: &str| wanted.is_empty() || wanted.iter().any(|w| w == id);
    let sweep_cache: OnceCell<Result<ScalingReport, String>> = OnceCell::new();
    let with_sweep = |f: fn(&ScalingReport) -> Outcome| -> Outcome {
        match sweep_cache.get_or_init(sweep) {
            Ok(s) => f(s),
            Err(e) => Err(format!("sweep failed: {e}")),
        }
    };

    let criteria: Vec<Criterion> = vec![
        ("C1", "lossless solve matches dense LU", 30.0, Box::new(c1)),
        ("C2", "direct accuracy improves with n", 300.0, Box::new(c2)),
        ("C3", "linear scaling of factorize + solve", 1800.0, Box::new(|| with_sweep(c3))),
        ("C4", "bounded far-field rank", 1800.0, Box::new(|| with_sweep(c4))),
        ("C5", "preconditioner, well conditioned", 900.0, Box::new(c5)),
        ("C6", "preconditioner, ill conditioned", 900.0, Box::new(c6)),
        ("C7", "eigenvalue clustering", 300.0, Box::new(c7)),
        ("C8", "left vs right preconditioning", 900.0, Box::new(c8)),
        ("C9", "Stokes preconditioner ordering", 1200.0, Box::new(c9)),
        ("C10", "edge count stays within C per cluster", 1800.0, Box::new(|| with_sweep(c10))),
        ("C11", "module invariants", 300.0, Box::new(c11)),
    ];
    let mut failed = 0;
    for (id, what, limit, f) in &criteria {
        if !selected(id) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t0.elapsed().as_secs_f64();
        let (ok, detail) = match outcome {
            Ok(d) if secs <= *limit => (true, d),
            Ok(d) => (false, format!("{d}; took {secs:.0}s, limit {limit:.0}s")),
            Err(d) => (false, d),
        };
        failed += usize::from(!ok);
        println!("{} {id} {what}: {detail} [{secs:.1}s]", if ok { "PASS" } else { "FAIL" });
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
