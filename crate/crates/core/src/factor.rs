//! Level-by-level elimination of the extended system with compression and
//! redirection of well-separated fill-in, followed by replayable solves.

use crate::dense::{frob, gemm_acc, hcat, mul, pad_orthonormal, pad_rows, scale_cols};
use crate::h2build::{estimate_sigma0, ExtendedGraph, H2Operators};
use crate::lowrank::{rank_from_reference, truncated_svd, union_basis, LowRankError};
use crate::tree::{from_tree_order, to_tree_order, ClusterTopology, MIN_DEPTH};
use faer::linalg::solvers::{PartialPivLu, Solve};
use faer::{Mat, MatRef};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FactorError {
    #[error("singular pivot block at level {level}, cluster {cluster}")]
    SingularPivot { level: usize, cluster: usize },
    #[error("singular top-level system")]
    SingularTop,
    #[error("right-hand side has length {found}, expected {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("epsilon must lie in [0, 1), got {0}")]
    Epsilon(f64),
    #[error(transparent)]
    LowRank(#[from] LowRankError),
    #[error(transparent)]
    H2(#[from] crate::h2build::H2Error),
}

#[derive(Debug, Clone)]
pub struct FactorOptions {
    /// Relative truncation tolerance; thresholds are epsilon * sigma0.
    pub epsilon: f64,
    /// Reference scale; estimated from the graph when absent.
    pub sigma0: Option<f64>,
    /// Leaf pivots whose fill-in spectra are sampled for statistics.
    pub spectra_samples: usize,
}

impl Default for FactorOptions {
    fn default() -> Self {
        Self { epsilon: 1e-3, sigma0: None, spectra_samples: 0 }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct EliminationTimings {
    pub lu_and_triangular_solves: f64,
    pub matmul_updates: f64,
    pub lowrank_approximations: f64,
    pub operator_transfer: f64,
}

impl EliminationTimings {
    pub fn sum(&self) -> f64 {
        self.lu_and_triangular_solves + self.matmul_updates + self.lowrank_approximations + self.operator_transfer
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct FillinStats {
    pub level: usize,
    pub clusters: usize,
    /// Fill-in blocks added to edges between touching clusters.
    pub added: usize,
    /// Fill-in blocks between well-separated clusters absorbed into far-field couplings.
    pub redirected: usize,
    /// Well-separated fill-in below the threshold, discarded.
    pub dropped: usize,
    /// Basis recompressions triggered by redirected fill-in.
    pub basis_updates: usize,
    /// Cluster ranks when the level is eliminated.
    pub max_rank: usize,
    pub mean_rank: f64,
    pub compress_seconds: f64,
    /// Sampled fill-in decay: rank at epsilon relative to the block's own
    /// largest singular value, over block size, for touching pairs.
    pub sampled_near_rank_fraction: Option<f64>,
    /// Same for well-separated pairs.
    pub sampled_far_rank_fraction: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct FactorStats {
    pub sigma0: f64,
    pub threshold: f64,
    pub levels: Vec<FillinStats>,
    pub timings: EliminationTimings,
    pub sigma0_seconds: f64,
    pub elimination_seconds: f64,
    /// Largest number of stored blocks seen during elimination.
    pub peak_edges: usize,
    /// Clusters on eliminated levels.
    pub clusters: usize,
    pub max_rank: usize,
    pub mean_rank: f64,
    pub top_dim: usize,
}

impl FactorStats {
    pub fn peak_edges_per_cluster(&self) -> f64 {
        self.peak_edges as f64 / self.clusters.max(1) as f64
    }
}

/// Bound on stored blocks per cluster implied by the octree geometry:
/// 27 touching pairs, 54 mixed blocks, 216 far pairs, and 6 pivot and
/// transfer blocks.
pub const EDGES_PER_CLUSTER_BOUND: usize = 27 + 2 * 27 + 216 + 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeRef {
    /// Reduced unknowns x̃ of a cluster not yet eliminated.
    X(usize),
    /// Multipole coefficients ȳ.
    Y(usize),
}

impl NodeRef {
    fn cluster(self) -> usize {
        match self {
            NodeRef::X(c) | NodeRef::Y(c) => c,
        }
    }
}

struct PivotRecord {
    cluster: usize,
    nx: usize,
    lu: PartialPivLu<f64>,
    /// Outside nodes with their offset and size in the stacked blocks.
    outside: Vec<(NodeRef, usize, usize)>,
    /// E(a, x̃_i) stacked over outside nodes a.
    row_block: Mat<f64>,
    /// E(x̃_i, a) side by side over outside nodes a.
    col_block: Mat<f64>,
}

struct LevelRecord {
    level: usize,
    pivots: Vec<PivotRecord>,
    /// Final multipole sizes, which are the parent's unknown blocks.
    rank: Vec<usize>,
    /// x̃ sizes of this level's clusters.
    nx: Vec<usize>,
}

struct TopRecord {
    lu: PartialPivLu<f64>,
    offsets: Vec<usize>,
    dim: usize,
}

/// The eliminated graph: pivot factorizations and coupling blocks per level
/// plus the dense top-level factorization.
pub struct IfmmFactorization {
    depth: usize,
    dim: usize,
    block_dim: usize,
    permutation: Vec<usize>,
    /// children[l][p] on level l + 1
    children: Vec<Vec<Vec<usize>>>,
    leaf_sizes: Vec<usize>,
    levels: Vec<LevelRecord>,
    top: Option<TopRecord>,
    dense: Option<PartialPivLu<f64>>,
    pub epsilon: f64,
    pub stats: FactorStats,
}

/// Working copy of one level of the extended graph during elimination.
pub struct LevelGraph {
    pub level: usize,
    pub nx: Vec<usize>,
    pub rank: Vec<usize>,
    pub u: Vec<Mat<f64>>,
    pub v: Vec<Mat<f64>>,
    pub wu: Vec<Vec<f64>>,
    pub wv: Vec<Vec<f64>>,
    /// U(ī, parent) and V(ī, parent), rank_i x rank_parent; empty on the coarsest level.
    pub up_u: Vec<Mat<f64>>,
    pub up_v: Vec<Mat<f64>>,
    pub xx: HashMap<(usize, usize), Mat<f64>>,
    pub xy: HashMap<(usize, usize), Mat<f64>>,
    pub yx: HashMap<(usize, usize), Mat<f64>>,
    pub yy: HashMap<(usize, usize), Mat<f64>>,
    pub eliminated: Vec<bool>,
}

impl LevelGraph {
    /// The leaf level of the initial extended graph.
    pub fn leaf(ops: &H2Operators) -> Self {
        let l = ops.depth();
        let lv = &ops.levels[l];
        let n = ops.tree.leaves().len();
        let (up_u, up_v) = transfers(ops, l);
        LevelGraph {
            level: l,
            nx: (0..n).map(|i| ops.leaf_dofs(i).len()).collect(),
            rank: lv.rank.clone(),
            u: lv.basis_u.clone(),
            v: lv.basis_v.clone(),
            wu: lv.weight_u.clone(),
            wv: lv.weight_v.clone(),
            up_u,
            up_v,
            xx: ops.near.clone(),
            xy: HashMap::new(),
            yx: HashMap::new(),
            yy: lv.far.clone(),
            eliminated: vec![false; n],
        }
    }

    fn edge_count(&self) -> usize {
        let live = self.eliminated.iter().filter(|e| !**e).count();
        let transfers = if self.level > MIN_DEPTH { 2 * self.nx.len() } else { 0 };
        self.xx.len() + self.xy.len() + self.yx.len() + self.yy.len() + 4 * live + transfers
    }
}

fn transfers(ops: &H2Operators, l: usize) -> (Vec<Mat<f64>>, Vec<Mat<f64>>) {
    let lv = &ops.levels[l];
    if l > MIN_DEPTH {
        (lv.transfer_u.clone(), lv.transfer_v.clone())
    } else {
        let n = lv.rank.len();
        (vec![Mat::zeros(0, 0); n], vec![Mat::zeros(0, 0); n])
    }
}

#[derive(Default)]
pub(crate) struct Clock {
    t: EliminationTimings,
}

impl Clock {
    fn lu(&mut self, d: Duration) {
        self.t.lu_and_triangular_solves += d.as_secs_f64();
    }
    fn mm(&mut self, d: Duration) {
        self.t.matmul_updates += d.as_secs_f64();
    }
    fn lr(&mut self, d: Duration) {
        self.t.lowrank_approximations += d.as_secs_f64();
    }
    fn ot(&mut self, d: Duration) {
        self.t.operator_transfer += d.as_secs_f64();
    }
}

struct Ctx<'a> {
    topo: &'a ClusterTopology,
    threshold: f64,
    epsilon: f64,
    clock: Clock,
    spectra_left: usize,
    near_fracs: Vec<f64>,
    far_fracs: Vec<f64>,
}

fn add_block(map: &mut HashMap<(usize, usize), Mat<f64>>, key: (usize, usize), blk: MatRef<'_, f64>) {
    match map.get_mut(&key) {
        Some(m) => *m += blk,
        None => {
            map.insert(key, blk.to_owned());
        }
    }
}

fn check_finite(m: MatRef<'_, f64>) -> bool {
    (0..m.ncols()).all(|j| (0..m.nrows()).all(|i| m[(i, j)].is_finite()))
}

/// A well-separated fill-in block waiting to be absorbed into the far field.
pub struct PendingFill {
    pub row: NodeRef,
    pub col: NodeRef,
    pub block: Mat<f64>,
}

/// Eliminates the (x̃_i, z_i) pivot of every cluster in Morton order.
fn eliminate_level(g: &mut LevelGraph, ctx: &mut Ctx<'_>, edges: &mut EdgeTracker) -> Result<(LevelRecord, FillinStats), FactorError> {
    let l = g.level;
    let n = g.nx.len();
    let mut stats = FillinStats {
        level: l,
        clusters: n,
        max_rank: g.rank.iter().copied().max().unwrap_or(0),
        mean_rank: g.rank.iter().sum::<usize>() as f64 / n.max(1) as f64,
        ..Default::default()
    };
    let mut pivots = Vec::with_capacity(n);
    for i in 0..n {
        let rec = eliminate_cluster(g, i, ctx, &mut stats)?;
        pivots.push(rec);
        edges.observe(g.edge_count());
    }
    if !ctx.near_fracs.is_empty() {
        stats.sampled_near_rank_fraction = Some(ctx.near_fracs.iter().sum::<f64>() / ctx.near_fracs.len() as f64);
    }
    if !ctx.far_fracs.is_empty() {
        stats.sampled_far_rank_fraction = Some(ctx.far_fracs.iter().sum::<f64>() / ctx.far_fracs.len() as f64);
    }
    ctx.near_fracs.clear();
    ctx.far_fracs.clear();
    Ok((LevelRecord { level: l, pivots, rank: g.rank.clone(), nx: g.nx.clone() }, stats))
}

fn eliminate_cluster(g: &mut LevelGraph, i: usize, ctx: &mut Ctx<'_>, stats: &mut FillinStats) -> Result<PivotRecord, FactorError> {
    let l = g.level;
    let (nxi, ri) = (g.nx[i], g.rank[i]);
    let t0 = Instant::now();
    let mut outside: Vec<(NodeRef, usize, usize)> = Vec::new();
    let mut d = 0;
    for &j in &ctx.topo.neighbors[l][i] {
        if j == i {
            continue;
        }
        let node = if g.eliminated[j] {
            if !(g.xy.contains_key(&(i, j)) || g.yx.contains_key(&(j, i))) {
                continue;
            }
            NodeRef::Y(j)
        } else {
            if !(g.xx.contains_key(&(i, j)) || g.xx.contains_key(&(j, i))) {
                continue;
            }
            NodeRef::X(j)
        };
        let size = match node {
            NodeRef::X(j) => g.nx[j],
            NodeRef::Y(j) => g.rank[j],
        };
        outside.push((node, d, size));
        d += size;
    }
    let mut col_block = Mat::zeros(nxi, d);
    let mut row_block = Mat::zeros(d, nxi);
    for &(node, off, size) in &outside {
        let (c, r) = match node {
            NodeRef::X(j) => (g.xx.remove(&(i, j)), g.xx.remove(&(j, i))),
            NodeRef::Y(j) => (g.xy.remove(&(i, j)), g.yx.remove(&(j, i))),
        };
        if let Some(c) = c {
            col_block.as_mut().submatrix_mut(0, off, nxi, size).copy_from(&c);
        }
        if let Some(r) = r {
            row_block.as_mut().submatrix_mut(off, 0, size, nxi).copy_from(&r);
        }
    }
    let mut m = Mat::zeros(nxi + ri, nxi + ri);
    if let Some(s) = g.xx.remove(&(i, i)) {
        m.as_mut().submatrix_mut(0, 0, nxi, nxi).copy_from(&s);
    }
    m.as_mut().submatrix_mut(0, nxi, nxi, ri).copy_from(&g.u[i]);
    m.as_mut().submatrix_mut(nxi, 0, ri, nxi).copy_from(g.v[i].transpose());
    ctx.clock.mm(t0.elapsed());

    let t0 = Instant::now();
    let lu = m.partial_piv_lu();
    let mut x = Mat::zeros(nxi + ri, d + ri);
    x.as_mut().submatrix_mut(0, 0, nxi, d).copy_from(&col_block);
    for k in 0..ri {
        x[(nxi + k, d + k)] = -1.0;
    }
    lu.solve_in_place(x.as_mut());
    ctx.clock.lu(t0.elapsed());
    if !check_finite(x.as_ref()) {
        return Err(FactorError::SingularPivot { level: l, cluster: i });
    }
    g.eliminated[i] = true;

    // fill-in: rows of the outside nodes, then the row of ȳ_i
    let t0 = Instant::now();
    let mut fill = Mat::zeros(d + ri, d + ri);
    gemm_acc(fill.as_mut().submatrix_mut(0, 0, d, d + ri), row_block.as_ref(), x.subrows(0, nxi), -1.0);
    fill.as_mut().submatrix_mut(d, 0, ri, d + ri).copy_from(x.subrows(nxi, ri));
    let mut nodes = outside.clone();
    nodes.push((NodeRef::Y(i), d, ri));

    let mut pending: Vec<PendingFill> = Vec::new();
    let sample = ctx.spectra_left > 0 && l == g.level;
    for &(a, ra, sa) in &nodes {
        for &(b, cb, sb) in &nodes {
            if sa == 0 || sb == 0 {
                continue;
            }
            let blk = fill.submatrix(ra, cb, sa, sb);
            let adj = ctx.topo.is_neighbor(l, a.cluster(), b.cluster());
            if sample && a != b {
                if let (NodeRef::X(_), NodeRef::X(_)) = (a, b) {
                    let s = truncated_svd(blk, 0.0)?;
                    let top = s.sigma.first().copied().unwrap_or(0.0);
                    let k = rank_from_reference(&s.sigma, ctx.epsilon, top);
                    let frac = k as f64 / sa.min(sb) as f64;
                    if adj {
                        ctx.near_fracs.push(frac);
                    } else {
                        ctx.far_fracs.push(frac);
                    }
                }
            }
            match (a, b) {
                (NodeRef::Y(p), NodeRef::Y(q)) => add_block(&mut g.yy, (p, q), blk),
                _ if adj => {
                    let key = (a.cluster(), b.cluster());
                    match (a, b) {
                        (NodeRef::X(_), NodeRef::X(_)) => add_block(&mut g.xx, key, blk),
                        (NodeRef::X(_), NodeRef::Y(_)) => add_block(&mut g.xy, key, blk),
                        _ => add_block(&mut g.yx, key, blk),
                    }
                    stats.added += 1;
                }
                _ => {
                    if frob(blk) <= ctx.threshold {
                        stats.dropped += 1;
                    } else {
                        pending.push(PendingFill { row: a, col: b, block: blk.to_owned() });
                    }
                }
            }
        }
    }
    if sample {
        ctx.spectra_left -= 1;
    }
    ctx.clock.mm(t0.elapsed());
    stats.redirected += pending.len();
    if !pending.is_empty() {
        let t0 = Instant::now();
        stats.basis_updates += redirect_fillin(g, ctx.topo, pending, ctx.threshold, &mut ctx.clock)?;
        stats.compress_seconds += t0.elapsed().as_secs_f64();
    }
    Ok(PivotRecord { cluster: i, nx: nxi, lu, outside, row_block, col_block })
}

struct SideUpdate {
    basis: Mat<f64>,
    weights: Vec<f64>,
    map: Mat<f64>,
}

/// Weighted union of a basis with extra columns; returns the new basis, its
/// weights, and the map old ≈ new * map.
fn side_union(basis: &Mat<f64>, weights: &[f64], extra: &[Mat<f64>], threshold: f64) -> Result<SideUpdate, FactorError> {
    let n = basis.nrows();
    let scaled = scale_cols(basis.as_ref(), weights);
    let mut parts: Vec<MatRef<'_, f64>> = vec![scaled.as_ref()];
    parts.extend(extra.iter().map(|m| m.as_ref()));
    let all = hcat(&parts, n);
    let (b, w) = union_basis(all.as_ref(), threshold)?;
    let map = mul(b.transpose(), basis.as_ref());
    Ok(SideUpdate { basis: b, weights: w, map })
}

/// Pads a side update to rank k with orthonormal complement columns.
fn pad_side(s: SideUpdate, k: usize, threshold: f64) -> SideUpdate {
    if s.weights.len() >= k {
        return s;
    }
    let floor = if threshold > 0.0 { threshold } else { f64::MIN_POSITIVE };
    let mut weights = s.weights;
    weights.resize(k, floor);
    SideUpdate { basis: pad_orthonormal(s.basis.as_ref(), k), weights, map: pad_rows(s.map.as_ref(), k) }
}

/// Absorbs well-separated fill-in into the far-field couplings: the bases of
/// the affected non-eliminated clusters are widened by a weighted union,
/// existing couplings and parent transfers are re-expressed in the new bases,
/// and the fill-in, projected onto them, is added to the coupling of the pair.
/// Returns the number of basis recompressions.
pub(crate) fn redirect_fillin(
    g: &mut LevelGraph,
    topo: &ClusterTopology,
    pending: Vec<PendingFill>,
    threshold: f64,
    clock: &mut Clock,
) -> Result<usize, FactorError> {
    let t0 = Instant::now();
    let mut u_add: BTreeMap<usize, Vec<Mat<f64>>> = BTreeMap::new();
    let mut v_add: BTreeMap<usize, Vec<Mat<f64>>> = BTreeMap::new();
    for f in &pending {
        if let NodeRef::X(j) = f.row {
            u_add.entry(j).or_default().push(f.block.clone());
        }
        if let NodeRef::X(k) = f.col {
            v_add.entry(k).or_default().push(f.block.transpose().to_owned());
        }
    }
    let mut new_u: BTreeMap<usize, SideUpdate> = BTreeMap::new();
    let mut new_v: BTreeMap<usize, SideUpdate> = BTreeMap::new();
    for (&j, extra) in &u_add {
        new_u.insert(j, side_union(&g.u[j], &g.wu[j], extra, threshold)?);
    }
    for (&k, extra) in &v_add {
        new_v.insert(k, side_union(&g.v[k], &g.wv[k], extra, threshold)?);
    }
    clock.lr(t0.elapsed());

    let t0 = Instant::now();
    let mut touched: Vec<usize> = new_u.keys().chain(new_v.keys()).copied().collect();
    touched.sort_unstable();
    touched.dedup();
    let updates = new_u.len() + new_v.len();
    for &c in &touched {
        let keep = |basis: &Mat<f64>, w: &Vec<f64>| SideUpdate {
            basis: basis.clone(),
            weights: w.clone(),
            map: Mat::identity(basis.ncols(), basis.ncols()),
        };
        let su = new_u.remove(&c).unwrap_or_else(|| keep(&g.u[c], &g.wu[c]));
        let sv = new_v.remove(&c).unwrap_or_else(|| keep(&g.v[c], &g.wv[c]));
        let k = su.weights.len().max(sv.weights.len());
        let su = pad_side(su, k, threshold);
        let sv = pad_side(sv, k, threshold);
        let l = g.level;
        for &q in topo.neighbors[l][c].iter().chain(&topo.interactions[l][c]) {
            if let Some(m) = g.yy.get_mut(&(c, q)) {
                *m = mul(su.map.as_ref(), m.as_ref());
            }
        }
        for &q in topo.neighbors[l][c].iter().chain(&topo.interactions[l][c]) {
            if let Some(m) = g.yy.get_mut(&(q, c)) {
                *m = mul(m.as_ref(), sv.map.transpose());
            }
        }
        if l > MIN_DEPTH {
            g.up_u[c] = mul(su.map.as_ref(), g.up_u[c].as_ref());
            g.up_v[c] = mul(sv.map.as_ref(), g.up_v[c].as_ref());
        }
        g.rank[c] = k;
        g.u[c] = su.basis;
        g.v[c] = sv.basis;
        g.wu[c] = su.weights;
        g.wv[c] = sv.weights;
    }
    for f in pending {
        let (p, q) = (f.row.cluster(), f.col.cluster());
        let mut blk = f.block;
        if let NodeRef::X(j) = f.row {
            blk = mul(g.u[j].transpose(), blk.as_ref());
        }
        if let NodeRef::X(k) = f.col {
            blk = mul(blk.as_ref(), g.v[k].as_ref());
        }
        let shape = (g.rank[p], g.rank[q]);
        let m = g.yy.entry((p, q)).or_insert_with(|| Mat::zeros(shape.0, shape.1));
        *m += &blk;
    }
    clock.ot(t0.elapsed());
    Ok(updates)
}

/// Builds the parent level: multipole blocks of siblings form the parent's
/// unknowns, far couplings among children tile the parent's near blocks,
/// and stacked child transfers become the parent's bases (re-orthonormalized
/// with their weights).
fn merge_to_parent(child: LevelGraph, ops: &H2Operators, threshold: f64, clock: &mut Clock) -> Result<LevelGraph, FactorError> {
    let t0 = Instant::now();
    let l = child.level;
    let pl = l - 1;
    let tree = &ops.tree;
    let parents = &tree.levels[pl];
    let np = parents.len();
    // offset of each child inside its parent's unknown block
    let mut offset = vec![0usize; child.nx.len()];
    let mut nx = vec![0usize; np];
    for p in parents {
        let mut o = 0;
        for &c in &p.children {
            offset[c] = o;
            o += child.rank[c];
        }
        nx[p.index] = o;
    }
    let parent_of = |c: usize| tree.levels[l][c].parent.unwrap();
    let mut xx: HashMap<(usize, usize), Mat<f64>> = HashMap::new();
    for ((i, j), blk) in child.yy {
        let (p, q) = (parent_of(i), parent_of(j));
        let tile = xx.entry((p, q)).or_insert_with(|| Mat::zeros(nx[p], nx[q]));
        let mut t = tile.as_mut().submatrix_mut(offset[i], offset[j], blk.nrows(), blk.ncols());
        t += &blk;
    }
    let lv = &ops.levels[pl];
    let stack = |maps: &Vec<Mat<f64>>, p: usize| {
        let refs: Vec<MatRef<'_, f64>> = parents[p].children.iter().map(|&c| maps[c].as_ref()).collect();
        crate::dense::vcat(&refs, lv.rank[p])
    };
    let u: Vec<Mat<f64>> = (0..np).map(|p| stack(&child.up_u, p)).collect();
    let v: Vec<Mat<f64>> = (0..np).map(|p| stack(&child.up_v, p)).collect();
    let (up_u, up_v) = transfers(ops, pl);
    let mut g = LevelGraph {
        level: pl,
        nx,
        rank: lv.rank.clone(),
        u,
        v,
        wu: lv.weight_u.clone(),
        wv: lv.weight_v.clone(),
        up_u,
        up_v,
        xx,
        xy: HashMap::new(),
        yx: HashMap::new(),
        yy: lv.far.clone(),
        eliminated: vec![false; np],
    };
    clock.ot(t0.elapsed());
    for p in 0..np {
        let t0 = Instant::now();
        let su = side_union(&g.u[p], &g.wu[p], &[], threshold)?;
        let sv = side_union(&g.v[p], &g.wv[p], &[], threshold)?;
        clock.lr(t0.elapsed());
        let t0 = Instant::now();
        let k = su.weights.len().max(sv.weights.len());
        let su = pad_side(su, k, threshold);
        let sv = pad_side(sv, k, threshold);
        for &q in &ops.topology.interactions[pl][p] {
            if let Some(m) = g.yy.get_mut(&(p, q)) {
                *m = mul(su.map.as_ref(), m.as_ref());
            }
            if let Some(m) = g.yy.get_mut(&(q, p)) {
                *m = mul(m.as_ref(), sv.map.transpose());
            }
        }
        if pl > MIN_DEPTH {
            g.up_u[p] = mul(su.map.as_ref(), g.up_u[p].as_ref());
            g.up_v[p] = mul(sv.map.as_ref(), g.up_v[p].as_ref());
        }
        g.rank[p] = k;
        g.u[p] = su.basis;
        g.v[p] = sv.basis;
        g.wu[p] = su.weights;
        g.wv[p] = sv.weights;
        clock.ot(t0.elapsed());
    }
    Ok(g)
}

struct EdgeTracker {
    /// Blocks on levels not yet reached, indexed by level.
    pending_below: Vec<usize>,
    current_level: usize,
    peak: usize,
}

impl EdgeTracker {
    fn new(ops: &H2Operators) -> Self {
        let depth = ops.depth();
        let mut static_edges = vec![0usize; depth + 1];
        for l in MIN_DEPTH..depth {
            let lv = &ops.levels[l];
            let n = lv.rank.len();
            static_edges[l] = lv.far.len() + 4 * n + if l > MIN_DEPTH { 2 * n } else { 0 };
        }
        EdgeTracker { pending_below: static_edges, current_level: depth, peak: 0 }
    }

    fn observe(&mut self, level_edges: usize) {
        let rest: usize = self.pending_below[..self.current_level].iter().sum();
        self.peak = self.peak.max(level_edges + rest);
    }
}

/// Eliminates every level from the leaves up, merging into the parent level
/// in between, and factorizes the remaining coarsest multipole system.
pub fn factorize(graph: &ExtendedGraph, opts: &FactorOptions) -> Result<IfmmFactorization, FactorError> {
    if !(0.0..1.0).contains(&opts.epsilon) {
        return Err(FactorError::Epsilon(opts.epsilon));
    }
    let ops = &graph.ops;
    let t_all = Instant::now();
    let t0 = Instant::now();
    let sigma0 = match opts.sigma0 {
        Some(s) => s,
        None => estimate_sigma0(graph)?,
    };
    let sigma0_seconds = if opts.sigma0.is_some() { 0.0 } else { t0.elapsed().as_secs_f64() };
    let threshold = opts.epsilon * sigma0;
    let mut stats = FactorStats { sigma0, threshold, sigma0_seconds, clusters: ops.tree.eliminated_cluster_count(), ..Default::default() };
    let depth = ops.depth();
    let children: Vec<Vec<Vec<usize>>> = ops.topology.children.clone();
    let leaf_sizes: Vec<usize> = (0..ops.tree.leaves().len()).map(|i| ops.leaf_dofs(i).len()).collect();
    let mut fact = IfmmFactorization {
        depth,
        dim: ops.dim(),
        block_dim: ops.block_dim,
        permutation: ops.permutation.clone(),
        children,
        leaf_sizes,
        levels: Vec::new(),
        top: None,
        dense: None,
        epsilon: opts.epsilon,
        stats: FactorStats::default(),
    };
    let t_elim = Instant::now();
    if !ops.has_far_field() {
        // a tree without far field is a single dense block
        let n = ops.dim();
        let mut a = Mat::zeros(n, n);
        for ((i, j), blk) in &ops.near {
            let (ri, rj) = (ops.leaf_dofs(*i), ops.leaf_dofs(*j));
            a.as_mut().submatrix_mut(ri.start, rj.start, ri.len(), rj.len()).copy_from(blk);
        }
        let t0 = Instant::now();
        fact.dense = Some(a.partial_piv_lu());
        stats.timings.lu_and_triangular_solves = t0.elapsed().as_secs_f64();
        stats.top_dim = n;
        stats.elimination_seconds = t_elim.elapsed().as_secs_f64();
        fact.stats = stats;
        return Ok(fact);
    }
    let mut ctx = Ctx {
        topo: &ops.topology,
        threshold,
        epsilon: opts.epsilon,
        clock: Clock::default(),
        spectra_left: opts.spectra_samples,
        near_fracs: Vec::new(),
        far_fracs: Vec::new(),
    };
    let mut edges = EdgeTracker::new(ops);
    let mut g = LevelGraph::leaf(ops);
    let mut rank_sum = 0usize;
    let mut rank_count = 0usize;
    loop {
        let l = g.level;
        edges.current_level = l;
        edges.observe(g.edge_count());
        let (rec, st) = eliminate_level(&mut g, &mut ctx, &mut edges)?;
        ctx.spectra_left = 0;
        stats.max_rank = stats.max_rank.max(st.max_rank);
        rank_sum += (st.mean_rank * st.clusters as f64).round() as usize;
        rank_count += st.clusters;
        stats.levels.push(st);
        fact.levels.push(rec);
        if l == MIN_DEPTH {
            break;
        }
        g = merge_to_parent(g, ops, threshold, &mut ctx.clock)?;
    }
    // coarsest level: dense system over the remaining multipole blocks
    let t0 = Instant::now();
    let mut offsets = Vec::with_capacity(g.rank.len());
    let mut dim = 0;
    for &r in &g.rank {
        offsets.push(dim);
        dim += r;
    }
    let mut top = Mat::zeros(dim, dim);
    for ((i, j), blk) in &g.yy {
        let mut t = top.as_mut().submatrix_mut(offsets[*i], offsets[*j], blk.nrows(), blk.ncols());
        t += blk;
    }
    let lu = top.partial_piv_lu();
    ctx.clock.lu(t0.elapsed());
    {
        let mut probe = Mat::<f64>::ones(dim, 1);
        lu.solve_in_place(probe.as_mut());
        if !check_finite(probe.as_ref()) {
            return Err(FactorError::SingularTop);
        }
    }
    fact.top = Some(TopRecord { lu, offsets, dim });
    stats.top_dim = dim;
    stats.timings = ctx.clock.t;
    stats.peak_edges = edges.peak;
    stats.mean_rank = rank_sum as f64 / rank_count.max(1) as f64;
    stats.elimination_seconds = t_elim.elapsed().as_secs_f64();
    let _ = t_all;
    fact.stats = stats;
    Ok(fact)
}

impl IfmmFactorization {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn block_dim(&self) -> usize {
        self.block_dim
    }

    /// Solves with b and x in the input ordering.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, FactorError> {
        if b.len() != self.dim {
            return Err(FactorError::Dimension { expected: self.dim, found: b.len() });
        }
        let bt = to_tree_order(&self.permutation, b, self.block_dim);
        let xt = self.solve_tree_order(&bt);
        Ok(from_tree_order(&self.permutation, &xt, self.block_dim))
    }

    /// Solves with b and x in tree order.
    pub fn solve_tree_order(&self, b: &[f64]) -> Vec<f64> {
        if let Some(lu) = &self.dense {
            let mut x = Mat::from_fn(b.len(), 1, |i, _| b[i]);
            lu.solve_in_place(x.as_mut());
            return (0..b.len()).map(|i| x[(i, 0)]).collect();
        }
        // split b into leaf blocks
        let mut rhs_x: Vec<Vec<f64>> = Vec::with_capacity(self.leaf_sizes.len());
        let mut off = 0;
        for &s in &self.leaf_sizes {
            rhs_x.push(b[off..off + s].to_vec());
            off += s;
        }
        let mut saved: Vec<Vec<Vec<f64>>> = Vec::with_capacity(self.levels.len());
        let mut rhs_y: Vec<Vec<f64>> = Vec::new();
        for rec in &self.levels {
            rhs_y = rec.rank.iter().map(|&r| vec![0.0; r]).collect();
            let mut level_saved = Vec::with_capacity(rec.pivots.len());
            for piv in &rec.pivots {
                let i = piv.cluster;
                let bp = std::mem::take(&mut rhs_x[i]);
                let ri = rec.rank[i];
                let mut w = Mat::zeros(piv.nx + ri, 1);
                for (k, v) in bp.iter().enumerate() {
                    w[(k, 0)] = *v;
                }
                piv.lu.solve_in_place(w.as_mut());
                let upd = mul(piv.row_block.as_ref(), w.subrows(0, piv.nx));
                for &(node, o, s) in &piv.outside {
                    let target = match node {
                        NodeRef::X(j) => &mut rhs_x[j],
                        NodeRef::Y(j) => &mut rhs_y[j],
                    };
                    for t in 0..s {
                        target[t] -= upd[(o + t, 0)];
                    }
                }
                for t in 0..ri {
                    rhs_y[i][t] += w[(piv.nx + t, 0)];
                }
                level_saved.push(bp);
            }
            saved.push(level_saved);
            if rec.level > MIN_DEPTH {
                let ch = &self.children[rec.level - 1];
                rhs_x = ch.iter().map(|cs| cs.iter().flat_map(|&c| rhs_y[c].iter().copied()).collect()).collect();
            }
        }
        // coarsest multipole system
        let top = self.top.as_ref().expect("far-field factorization has a top system");
        let mut t = Mat::zeros(top.dim, 1);
        for (i, r) in rhs_y.iter().enumerate() {
            for (k, v) in r.iter().enumerate() {
                t[(top.offsets[i] + k, 0)] = *v;
            }
        }
        top.lu.solve_in_place(t.as_mut());
        let last = self.levels.last().unwrap();
        let mut yv: Vec<Vec<f64>> = last
            .rank
            .iter()
            .enumerate()
            .map(|(i, &r)| (0..r).map(|k| t[(top.offsets[i] + k, 0)]).collect())
            .collect();
        // back substitution from the coarsest level down
        let mut xv: Vec<Vec<f64>> = Vec::new();
        for (li, rec) in self.levels.iter().enumerate().rev() {
            xv = vec![Vec::new(); rec.nx.len()];
            for (pi, piv) in rec.pivots.iter().enumerate().rev() {
                let i = piv.cluster;
                let ri = rec.rank[i];
                let bp = &saved[li][pi];
                let d = piv.col_block.ncols();
                let mut xo = Mat::zeros(d, 1);
                for &(node, o, s) in &piv.outside {
                    let src = match node {
                        NodeRef::X(j) => &xv[j],
                        NodeRef::Y(j) => &yv[j],
                    };
                    for t in 0..s {
                        xo[(o + t, 0)] = src[t];
                    }
                }
                let mut r = Mat::zeros(piv.nx + ri, 1);
                for (k, v) in bp.iter().enumerate() {
                    r[(k, 0)] = *v;
                }
                gemm_acc(r.as_mut().subrows_mut(0, piv.nx), piv.col_block.as_ref(), xo.as_ref(), -1.0);
                for t in 0..ri {
                    r[(piv.nx + t, 0)] = yv[i][t];
                }
                piv.lu.solve_in_place(r.as_mut());
                xv[i] = (0..piv.nx).map(|k| r[(k, 0)]).collect();
            }
            if li > 0 {
                // children's multipoles are slices of the parent's unknowns
                let child_rank = &self.levels[li - 1].rank;
                let ch = &self.children[rec.level];
                let mut next = vec![Vec::new(); child_rank.len()];
                for (p, cs) in ch.iter().enumerate() {
                    let mut o = 0;
                    for &c in cs {
                        next[c] = xv[p][o..o + child_rank[c]].to_vec();
                        o += child_rank[c];
                    }
                }
                yv = next;
            }
        }
        xv.concat()
    }
}

/// Solves with a finished factorization, b and x in the input ordering.
pub fn solve(factorization: &IfmmFactorization, b: &[f64]) -> Result<Vec<f64>, FactorError> {
    factorization.solve(b)
}
