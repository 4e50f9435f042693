//! Experiment configuration, run drivers and machine-readable reports.

use crate::factor::{factorize, EliminationTimings, FactorError, FactorOptions, FillinStats, IfmmFactorization};
use crate::h2build::{assemble_extended_graph, build_operators, H2Error, H2Operators, TreeDepth, WeightMode};
use crate::kernel::{benchmark_kernel, generate_scene, rpy_kernel, scaled_d, Kernel, KernelError, SceneSpec};
use crate::krylov::{
    gmres, BlockDiagPreconditioner, GmresOptions, H2Matvec, IfmmPreconditioner, IterationTrace, KrylovError,
    Operator, PrecondSide,
};
use crate::refcheck::{assemble_dense, relative_error, RefError};
use clap::{Parser, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use std::time::Instant;
use thiserror::Error;

pub const SCHEMA_VERSION: &str = "1.0.0";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("reading config {path}: {source}")]
    ConfigIo { path: PathBuf, source: std::io::Error },
    #[error("parsing config {path}: {source}")]
    ConfigParse { path: PathBuf, source: serde_json::Error },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    H2(#[from] H2Error),
    #[error(transparent)]
    Factor(#[from] FactorError),
    #[error(transparent)]
    Krylov(#[from] KrylovError),
    #[error(transparent)]
    Ref(#[from] RefError),
    #[error("writing report: {0}")]
    Output(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Benchmark,
    Rpy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Distribution {
    Sphere,
    Cube,
    Lattice,
    Shells,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DScaling {
    None,
    Sphere,
    Cube,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Direct,
    Gmres,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Precond {
    None,
    Blockdiag,
    Ifmm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Weights {
    Rigorous,
    Sampled,
    Unit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    #[default]
    Json,
    Csv,
}

/// Full experiment configuration. Every field has a default; a JSON config
/// file may set any subset and command-line flags override it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub kernel: KernelKind,
    pub n_points: usize,
    pub distribution: Distribution,
    pub cheb_nodes: usize,
    pub epsilon: f64,
    pub leaf_target: usize,
    /// Fixed octree depth instead of the leaf-target rule.
    pub depth: Option<usize>,
    pub d: f64,
    pub d_scaling: DScaling,
    pub mode: Mode,
    pub precond: Precond,
    pub precond_side: Side,
    pub gmres_tol: f64,
    pub max_iters: usize,
    pub seed: u64,
    pub weights: Weights,
    pub weight_samples: usize,
    /// Relative cutoff when the initial bases are rotated by their weights;
    /// defaults to epsilon.
    pub basis_tol: Option<f64>,
    /// Chebyshev order of the operator used for GMRES products and large-N residuals.
    pub matvec_cheb_nodes: usize,
    /// Problems up to this many unknowns use the exact dense matrix.
    pub dense_cap: usize,
    pub block_size: usize,
    pub rpy_radius: f64,
    pub viscosity: f64,
    pub lattice: [usize; 3],
    pub lattice_subdivision: i32,
    pub lattice_spacing: f64,
    pub lattice_sphere_radius: f64,
    pub shell_subdivisions: Vec<i32>,
    /// Shell radii; empty means 1, 2, 4, ...
    pub shell_radii: Vec<f64>,
    /// Sampled leaf pivots for the fill-in spectrum statistics.
    pub spectra_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            kernel: KernelKind::Benchmark,
            n_points: 1000,
            distribution: Distribution::Cube,
            cheb_nodes: 3,
            epsilon: 1e-3,
            leaf_target: 100,
            depth: None,
            d: 1e-3,
            d_scaling: DScaling::None,
            mode: Mode::Direct,
            precond: Precond::Ifmm,
            precond_side: Side::Right,
            gmres_tol: 1e-10,
            max_iters: 500,
            seed: 0,
            weights: Weights::Rigorous,
            weight_samples: 64,
            basis_tol: None,
            matvec_cheb_nodes: 4,
            dense_cap: crate::refcheck::DEFAULT_DENSE_CAP,
            block_size: 126,
            rpy_radius: 0.15,
            viscosity: 1.0,
            lattice: [4, 4, 4],
            lattice_subdivision: 1,
            lattice_spacing: 3.0,
            lattice_sphere_radius: 1.0,
            shell_subdivisions: vec![1, 2, 3],
            shell_radii: Vec::new(),
            spectra_samples: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Invalid(m.into()));
        if self.cheb_nodes == 0 || self.matvec_cheb_nodes == 0 {
            return bad("Chebyshev orders must be at least 1");
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return bad("epsilon must lie in [0, 1)");
        }
        if self.leaf_target == 0 {
            return bad("leaf target must be at least 1");
        }
        if self.gmres_tol.is_nan() || self.gmres_tol <= 0.0 || self.max_iters == 0 {
            return bad("GMRES needs a positive tolerance and at least one iteration");
        }
        if matches!(self.distribution, Distribution::Sphere | Distribution::Cube) && self.n_points == 0 {
            return bad("n_points must be positive");
        }
        Ok(())
    }

    pub fn scene_spec(&self) -> SceneSpec {
        match self.distribution {
            Distribution::Sphere => SceneSpec::SphereSurface { n: self.n_points, seed: self.seed },
            Distribution::Cube => SceneSpec::CubeUniform { n: self.n_points, seed: self.seed },
            Distribution::Lattice => SceneSpec::SphereLattice {
                nx: self.lattice[0],
                ny: self.lattice[1],
                nz: self.lattice[2],
                subdivision: self.lattice_subdivision,
                spacing: self.lattice_spacing,
                sphere_radius: self.lattice_sphere_radius,
            },
            Distribution::Shells => {
                let radii = if self.shell_radii.is_empty() {
                    (0..self.shell_subdivisions.len()).map(|k| 2f64.powi(k as i32)).collect()
                } else {
                    self.shell_radii.clone()
                };
                SceneSpec::ConcentricShells { subdivisions: self.shell_subdivisions.clone(), radii }
            }
        }
    }

    /// Kernel parameter after the optional size scaling.
    pub fn effective_d(&self, n: usize) -> f64 {
        match self.d_scaling {
            DScaling::None => self.d,
            DScaling::Sphere => scaled_d(self.d, n, -0.5),
            DScaling::Cube => scaled_d(self.d, n, -1.0 / 3.0),
        }
    }

    pub fn make_kernel(&self, n: usize) -> Result<Box<dyn Kernel>, CliError> {
        Ok(match self.kernel {
            KernelKind::Benchmark => Box::new(benchmark_kernel(self.effective_d(n))?),
            KernelKind::Rpy => Box::new(rpy_kernel(self.rpy_radius, self.viscosity)?),
        })
    }

    fn tree_depth(&self) -> TreeDepth {
        match self.depth {
            Some(d) => TreeDepth::Fixed(d),
            None => TreeDepth::LeafTarget(self.leaf_target),
        }
    }

    fn weight_mode(&self) -> Option<(WeightMode, f64)> {
        let tol = self.basis_tol.unwrap_or(self.epsilon);
        match self.weights {
            Weights::Rigorous => Some((WeightMode::Rigorous, tol)),
            Weights::Sampled => Some((WeightMode::Sampled { samples: self.weight_samples, seed: self.seed }, tol)),
            Weights::Unit => None,
        }
    }
}

/// Command-line flags; unset flags fall back to the config file, then defaults.
#[derive(Debug, Clone, Default, Parser)]
#[command(name = "ifmm", about = "Inverse fast multipole solver and preconditioner benchmarks")]
pub struct CliArgs {
    /// JSON file with any subset of the configuration fields
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub kernel: Option<KernelKind>,
    /// Points for the sphere and cube scenes
    #[arg(long)]
    pub n_points: Option<usize>,
    #[arg(long, value_enum)]
    pub distribution: Option<Distribution>,
    /// Chebyshev nodes per dimension for the factorization
    #[arg(long)]
    pub cheb_nodes: Option<usize>,
    /// Truncation tolerance relative to the largest singular value of the extended matrix
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Mean points per leaf used to pick the tree depth
    #[arg(long)]
    pub leaf_target: Option<usize>,
    /// Fixed tree depth; overrides --leaf-target
    #[arg(long)]
    pub depth: Option<usize>,
    /// Benchmark kernel parameter
    #[arg(long)]
    pub d: Option<f64>,
    /// Scale d with the point count
    #[arg(long, value_enum)]
    pub d_scaling: Option<DScaling>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    #[arg(long, value_enum)]
    pub precond: Option<Precond>,
    #[arg(long, value_enum)]
    pub precond_side: Option<Side>,
    /// Relative residual at which GMRES stops
    #[arg(long)]
    pub gmres_tol: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub weights: Option<Weights>,
    /// Chebyshev nodes of the operator used for GMRES products above --dense-cap
    #[arg(long)]
    pub matvec_cheb_nodes: Option<usize>,
    /// Largest system assembled as a dense matrix
    #[arg(long)]
    pub dense_cap: Option<usize>,
    /// Block size of the block-diagonal preconditioner
    #[arg(long)]
    pub block_size: Option<usize>,
    /// Particle radius of the mobility kernel
    #[arg(long)]
    pub rpy_radius: Option<f64>,
    #[arg(long)]
    pub lattice_spacing: Option<f64>,
    #[arg(long)]
    pub lattice_sphere_radius: Option<f64>,
    /// Comma-separated shell radii (default 1, 2, 4, ...)
    #[arg(long, value_delimiter = ',')]
    pub shell_radii: Option<Vec<f64>>,
    /// Run a size sweep over these point counts instead of a single run
    #[arg(long, value_delimiter = ',')]
    pub sweep: Option<Vec<usize>>,
    /// Run GMRES once per preconditioner (none, blockdiag, ifmm) and report all three
    #[arg(long)]
    pub compare_precond: bool,
    /// Write the scene as x y z lines to this file
    #[arg(long)]
    pub export_scene: Option<PathBuf>,
    /// Output file; stdout when absent
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
}

impl CliArgs {
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut c = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|source| CliError::ConfigIo { path: path.clone(), source })?;
                serde_json::from_str(&text).map_err(|source| CliError::ConfigParse { path: path.clone(), source })?
            }
            None => RunConfig::default(),
        };
        macro_rules! over {
            ($($f:ident),*) => { $( if let Some(v) = self.$f.clone() { c.$f = v; } )* };
        }
        over!(
            kernel, n_points, distribution, cheb_nodes, epsilon, leaf_target, d, d_scaling, mode, precond, precond_side, gmres_tol,
            max_iters, seed, weights, matvec_cheb_nodes, dense_cap, block_size, rpy_radius, lattice_spacing, lattice_sphere_radius,
            shell_radii
        );
        if self.depth.is_some() {
            c.depth = self.depth;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct Timings {
    pub initialization: f64,
    pub sigma0_estimation: f64,
    pub elimination: f64,
    pub substitution: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct ProblemInfo {
    pub kernel: String,
    pub n_points: usize,
    pub unknowns: usize,
    pub d: Option<f64>,
    pub depth: usize,
    pub leaves: usize,
    pub clusters: usize,
    pub initial_max_rank: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct RankStats {
    pub max_rank: usize,
    pub mean_rank: f64,
    pub top_dim: usize,
    pub levels: Vec<FillinStats>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct EdgeStats {
    pub peak_edges: usize,
    pub clusters: usize,
    pub peak_edges_per_cluster: f64,
    pub bound_per_cluster: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunReport {
    pub schema_version: String,
    pub config: RunConfig,
    pub problem: ProblemInfo,
    pub timings: Timings,
    pub elimination_breakdown: EliminationTimings,
    pub sigma0: f64,
    pub threshold: f64,
    pub ranks: RankStats,
    pub edges: EdgeStats,
    /// Relative error against the known solution.
    pub relative_error: Option<f64>,
    /// ‖b − A x‖ / ‖b‖ with the exact or high-order operator.
    pub relative_residual: Option<f64>,
    /// Which operator stands in for A: "dense" or "h2".
    pub reference_operator: String,
    pub preconditioner: Option<Precond>,
    pub iterations: Option<IterationTrace>,
}

/// Points, kernel and the reference problem shared by the drivers.
pub struct Problem {
    pub coords: Vec<[f64; 3]>,
    pub kernel: Box<dyn Kernel>,
    pub x_true: Vec<f64>,
    pub b: Vec<f64>,
    pub dense: Option<faer::Mat<f64>>,
    /// High-order operator for products when the dense matrix is too large.
    pub h2: Option<H2Operators>,
    pub d: Option<f64>,
}

impl Problem {
    pub fn new(cfg: &RunConfig) -> Result<Self, CliError> {
        let scene = generate_scene(&cfg.scene_spec())?;
        let coords = scene.coords();
        let kernel = cfg.make_kernel(coords.len())?;
        let dim = coords.len() * kernel.block_dim();
        let d = (cfg.kernel == KernelKind::Benchmark).then(|| cfg.effective_d(coords.len()));
        if dim <= cfg.dense_cap {
            let p = assemble_dense(&coords, kernel.as_ref(), cfg.seed ^ 0x5eed, cfg.dense_cap)?;
            return Ok(Problem { coords, kernel, x_true: p.x_true, b: p.b, dense: Some(p.a), h2: None, d });
        }
        let ops = build_operators(&coords, kernel.as_ref(), TreeDepth::LeafTarget(cfg.leaf_target), cfg.matvec_cheb_nodes, None)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
        let x_true: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let b = ops.matvec_input_order(&x_true);
        Ok(Problem { coords, kernel, x_true, b, dense: None, h2: Some(ops), d })
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn operator(&self) -> Box<dyn Operator + '_> {
        match (&self.dense, &self.h2) {
            (Some(a), _) => Box::new(DenseRef { a }),
            (None, Some(ops)) => Box::new(H2Matvec { ops }),
            _ => unreachable!("problem has an operator"),
        }
    }

    fn reference_name(&self) -> String {
        if self.dense.is_some() { "dense" } else { "h2" }.into()
    }

    pub fn residual(&self, x: &[f64]) -> f64 {
        let ax = self.operator().apply(x);
        let r: f64 = ax.iter().zip(&self.b).map(|(a, b)| (a - b).powi(2)).sum();
        (r / self.b.iter().map(|v| v * v).sum::<f64>()).sqrt()
    }
}

struct DenseRef<'a> {
    a: &'a faer::Mat<f64>,
}

impl Operator for DenseRef<'_> {
    fn dim(&self) -> usize {
        self.a.nrows()
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        crate::dense::to_vec(crate::dense::mul(self.a.as_ref(), crate::dense::col(x)).as_ref())
    }
}

/// Operators and factorization for one configuration, with phase timings.
pub struct BuiltSolver {
    pub ops_max_rank: usize,
    pub depth: usize,
    pub leaves: usize,
    pub clusters: usize,
    pub factorization: IfmmFactorization,
    pub initialization: f64,
}

pub fn build_solver(cfg: &RunConfig, problem: &Problem) -> Result<BuiltSolver, CliError> {
    let t0 = Instant::now();
    let ops = build_operators(&problem.coords, problem.kernel.as_ref(), cfg.tree_depth(), cfg.cheb_nodes, cfg.weight_mode())?;
    let (depth, leaves, clusters, max_rank) = (ops.depth(), ops.tree.leaves().len(), ops.tree.eliminated_cluster_count(), ops.max_rank());
    let graph = assemble_extended_graph(ops, &problem.b)?;
    let initialization = t0.elapsed().as_secs_f64();
    let opts = FactorOptions { epsilon: cfg.epsilon, sigma0: None, spectra_samples: cfg.spectra_samples };
    let factorization = factorize(&graph, &opts)?;
    Ok(BuiltSolver { ops_max_rank: max_rank, depth, leaves, clusters, factorization, initialization })
}

fn base_report(cfg: &RunConfig, problem: &Problem, s: &BuiltSolver) -> RunReport {
    let st = &s.factorization.stats;
    RunReport {
        schema_version: SCHEMA_VERSION.into(),
        config: cfg.clone(),
        problem: ProblemInfo {
            kernel: problem.kernel.name(),
            n_points: problem.coords.len(),
            unknowns: problem.dim(),
            d: problem.d,
            depth: s.depth,
            leaves: s.leaves,
            clusters: s.clusters,
            initial_max_rank: s.ops_max_rank,
        },
        timings: Timings {
            initialization: s.initialization,
            sigma0_estimation: st.sigma0_seconds,
            elimination: st.elimination_seconds,
            ..Default::default()
        },
        elimination_breakdown: st.timings.clone(),
        sigma0: st.sigma0,
        threshold: st.threshold,
        ranks: RankStats { max_rank: st.max_rank, mean_rank: st.mean_rank, top_dim: st.top_dim, levels: st.levels.clone() },
        edges: EdgeStats {
            peak_edges: st.peak_edges,
            clusters: st.clusters,
            peak_edges_per_cluster: st.peak_edges_per_cluster(),
            bound_per_cluster: crate::factor::EDGES_PER_CLUSTER_BOUND,
        },
        relative_error: None,
        relative_residual: None,
        reference_operator: problem.reference_name(),
        preconditioner: None,
        iterations: None,
    }
}

/// Factorizes and solves once, comparing against the known solution.
pub fn run_direct(cfg: &RunConfig) -> Result<RunReport, CliError> {
    let problem = Problem::new(cfg)?;
    run_direct_on(cfg, &problem)
}

pub fn run_direct_on(cfg: &RunConfig, problem: &Problem) -> Result<RunReport, CliError> {
    let solver = build_solver(cfg, problem)?;
    let t0 = Instant::now();
    let x = solver.factorization.solve(&problem.b)?;
    let substitution = t0.elapsed().as_secs_f64();
    let mut report = base_report(cfg, problem, &solver);
    report.timings.substitution = substitution;
    report.timings.total = report.timings.initialization + report.timings.sigma0_estimation + report.timings.elimination + substitution;
    report.relative_error = Some(relative_error(&x, &problem.x_true));
    report.relative_residual = Some(problem.residual(&x));
    Ok(report)
}

/// GMRES with the configured preconditioner.
pub fn run_iterative(cfg: &RunConfig) -> Result<RunReport, CliError> {
    let problem = Problem::new(cfg)?;
    run_iterative_on(cfg, &problem, cfg.precond)
}

pub fn run_iterative_on(cfg: &RunConfig, problem: &Problem, precond: Precond) -> Result<RunReport, CliError> {
    let total0 = Instant::now();
    let side = match cfg.precond_side {
        Side::Left => PrecondSide::Left,
        Side::Right => PrecondSide::Right,
    };
    let opts = GmresOptions { tol: cfg.gmres_tol, max_iters: cfg.max_iters };
    let a = problem.operator();
    let (x, trace, mut report) = match precond {
        Precond::Ifmm => {
            let solver = build_solver(cfg, problem)?;
            let t0 = Instant::now();
            let p = IfmmPreconditioner { factorization: &solver.factorization };
            let (x, trace) = gmres(a.as_ref(), &problem.b, opts, Some(&p), side)?;
            let mut report = base_report(cfg, problem, &solver);
            report.timings.substitution = t0.elapsed().as_secs_f64();
            (x, trace, report)
        }
        Precond::Blockdiag => {
            let t0 = Instant::now();
            let p = match &problem.dense {
                Some(m) => BlockDiagPreconditioner::from_dense(m, cfg.block_size)?,
                None => BlockDiagPreconditioner::from_kernel(problem.kernel.as_ref(), &problem.coords, cfg.block_size)?,
            };
            let init = t0.elapsed().as_secs_f64();
            let t0 = Instant::now();
            let (x, trace) = gmres(a.as_ref(), &problem.b, opts, Some(&p), side)?;
            let mut report = empty_report(cfg, problem);
            report.timings.initialization = init;
            report.timings.substitution = t0.elapsed().as_secs_f64();
            (x, trace, report)
        }
        Precond::None => {
            let t0 = Instant::now();
            let (x, trace) = gmres(a.as_ref(), &problem.b, opts, None, PrecondSide::None)?;
            let mut report = empty_report(cfg, problem);
            report.timings.substitution = t0.elapsed().as_secs_f64();
            (x, trace, report)
        }
    };
    report.config.mode = Mode::Gmres;
    report.config.precond = precond;
    report.preconditioner = Some(precond);
    report.relative_error = Some(relative_error(&x, &problem.x_true));
    report.relative_residual = Some(trace.final_residual);
    report.iterations = Some(trace);
    report.timings.total = total0.elapsed().as_secs_f64();
    Ok(report)
}

fn empty_report(cfg: &RunConfig, problem: &Problem) -> RunReport {
    RunReport {
        schema_version: SCHEMA_VERSION.into(),
        config: cfg.clone(),
        problem: ProblemInfo {
            kernel: problem.kernel.name(),
            n_points: problem.coords.len(),
            unknowns: problem.dim(),
            d: problem.d,
            ..Default::default()
        },
        timings: Timings::default(),
        elimination_breakdown: EliminationTimings::default(),
        sigma0: 0.0,
        threshold: 0.0,
        ranks: RankStats::default(),
        edges: EdgeStats::default(),
        relative_error: None,
        relative_residual: None,
        reference_operator: problem.reference_name(),
        preconditioner: None,
        iterations: None,
    }
}

pub fn run(cfg: &RunConfig) -> Result<RunReport, CliError> {
    match cfg.mode {
        Mode::Direct => run_direct(cfg),
        Mode::Gmres => run_iterative(cfg),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScalingReport {
    pub runs: Vec<RunReport>,
    /// Least-squares slope of log(factorize + solve time) against log(N).
    pub slope: f64,
    /// Largest over smallest per-run maximum rank.
    pub max_rank_ratio: f64,
    pub max_edges_per_cluster: f64,
}

/// Least-squares slope of log y against log x.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Direct runs over a list of point counts at otherwise fixed settings.
pub fn run_scaling(cfg: &RunConfig, sizes: &[usize]) -> Result<ScalingReport, CliError> {
    let mut runs = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let mut c = cfg.clone();
        c.n_points = n;
        c.mode = Mode::Direct;
        runs.push(run_direct(&c)?);
    }
    let xs: Vec<f64> = runs.iter().map(|r| r.problem.n_points as f64).collect();
    let ts: Vec<f64> =
        runs.iter().map(|r| r.timings.sigma0_estimation + r.timings.elimination + r.timings.substitution).collect();
    let ranks: Vec<f64> = runs.iter().map(|r| r.ranks.max_rank as f64).collect();
    let max_rank_ratio = ranks.iter().copied().fold(0.0, f64::max) / ranks.iter().copied().fold(f64::INFINITY, f64::min).max(1.0);
    let max_edges_per_cluster = runs.iter().map(|r| r.edges.peak_edges_per_cluster).fold(0.0, f64::max);
    Ok(ScalingReport { slope: loglog_slope(&xs, &ts), max_rank_ratio, max_edges_per_cluster, runs })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ComparisonReport {
    pub runs: Vec<RunReport>,
}

impl ComparisonReport {
    pub fn iterations(&self, p: Precond) -> Option<usize> {
        self.runs.iter().find(|r| r.preconditioner == Some(p)).and_then(|r| r.iterations.as_ref()).map(|t| t.iterations)
    }
}

/// GMRES on one problem with each of the given preconditioners.
pub fn run_comparison(cfg: &RunConfig, preconds: &[Precond]) -> Result<ComparisonReport, CliError> {
    let problem = Problem::new(cfg)?;
    let mut runs = Vec::new();
    for &p in preconds {
        runs.push(run_iterative_on(cfg, &problem, p)?);
    }
    Ok(ComparisonReport { runs })
}

/// Stokes mobility runs: GMRES without preconditioner, block diagonal and IFMM.
pub fn run_stokes(cfg: &RunConfig) -> Result<ComparisonReport, CliError> {
    let mut c = cfg.clone();
    c.kernel = KernelKind::Rpy;
    run_comparison(&c, &[Precond::None, Precond::Blockdiag, Precond::Ifmm])
}

pub const CSV_HEADER: &str =
    "n_points,cheb_nodes,epsilon,precond,initialization,sigma0_estimation,elimination,substitution,total,relative_error,relative_residual,iterations,max_rank";

pub fn csv_row(r: &RunReport) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
    let precond = r.preconditioner.map(|p| format!("{p:?}").to_lowercase()).unwrap_or_else(|| "direct".into());
    format!(
        "{},{},{:e},{},{:e},{:e},{:e},{:e},{:e},{},{},{},{}",
        r.problem.n_points,
        r.config.cheb_nodes,
        r.config.epsilon,
        precond,
        r.timings.initialization,
        r.timings.sigma0_estimation,
        r.timings.elimination,
        r.timings.substitution,
        r.timings.total,
        opt(r.relative_error),
        opt(r.relative_residual),
        r.iterations.as_ref().map(|t| t.iterations.to_string()).unwrap_or_default(),
        r.ranks.max_rank
    )
}

pub fn to_csv(runs: &[RunReport]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in runs {
        s.push_str(&csv_row(r));
        s.push('\n');
    }
    s
}
