//! Initial H² representation from tensor-product Chebyshev interpolation,
//! basis weights, and the extended sparse system built on top of it.

use crate::dense::{col, frob, gemm_acc, hcat, mul, pad_orthonormal, scale_cols};
use crate::kernel::{kernel_block, Kernel};
use crate::lowrank::{full_svd, leading_singular_values, LinearOperator, LowRankError, RsvdOptions};
use crate::tree::{build_octree, build_octree_with_depth, compute_topology, points_from_coords, ClusterTopology, Octree, MIN_DEPTH};
use faer::{Mat, MatRef};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::HashMap;
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum H2Error {
    #[error("right-hand side has length {found}, expected {expected}")]
    RhsLength { expected: usize, found: usize },
    #[error("cluster {cluster} on level {level}: interpolation rank {u} differs from anterpolation rank {v}")]
    RankMismatch { level: usize, cluster: usize, u: usize, v: usize },
    #[error("dense assembly of {0} unknowns exceeds the cap {1}")]
    TooLarge(usize, usize),
    #[error("Chebyshev order must be at least 1")]
    ZeroOrder,
    #[error(transparent)]
    LowRank(#[from] LowRankError),
    #[error(transparent)]
    Tree(#[from] crate::tree::TreeError),
}

/// Chebyshev points of the first kind on [-1, 1].
pub fn chebyshev_points(n: usize) -> Vec<f64> {
    (1..=n).map(|k| ((2 * k - 1) as f64 * PI / (2 * n) as f64).cos()).collect()
}

/// S_n(node_m, t) for every node m: the Lagrange-like weights of
/// Chebyshev interpolation evaluated at t.
pub fn interpolation_weights(n: usize, t: f64) -> Vec<f64> {
    let nodes = chebyshev_points(n);
    let tk = cheb_polys(n, t);
    nodes
        .iter()
        .map(|&x| {
            let tx = cheb_polys(n, x);
            let s: f64 = (1..n).map(|k| tk[k] * tx[k]).sum();
            (1.0 + 2.0 * s) / n as f64
        })
        .collect()
}

fn cheb_polys(n: usize, t: f64) -> Vec<f64> {
    let mut v = vec![1.0; n.max(2)];
    v[1] = t;
    for k in 2..n {
        v[k] = 2.0 * t * v[k - 1] - v[k - 2];
    }
    v
}

/// Rows: points (times block_dim); columns: n³ grid nodes (times block_dim).
fn interpolation_matrix(n: usize, block_dim: usize, center: [f64; 3], half_width: f64, pts: &[[f64; 3]]) -> Mat<f64> {
    let n3 = n * n * n;
    let mut m = Mat::zeros(pts.len() * block_dim, n3 * block_dim);
    for (p, x) in pts.iter().enumerate() {
        let w: Vec<Vec<f64>> = (0..3).map(|d| interpolation_weights(n, (x[d] - center[d]) / half_width)).collect();
        for m2 in 0..n {
            for m1 in 0..n {
                for m0 in 0..n {
                    let v = w[0][m0] * w[1][m1] * w[2][m2];
                    let node = m0 + n * (m1 + n * m2);
                    for b in 0..block_dim {
                        m[(p * block_dim + b, node * block_dim + b)] = v;
                    }
                }
            }
        }
    }
    m
}

fn grid(n: usize, center: [f64; 3], half_width: f64) -> Vec<[f64; 3]> {
    let t = chebyshev_points(n);
    let mut out = Vec::with_capacity(n * n * n);
    for m2 in 0..n {
        for m1 in 0..n {
            for m0 in 0..n {
                out.push([center[0] + half_width * t[m0], center[1] + half_width * t[m1], center[2] + half_width * t[m2]]);
            }
        }
    }
    out
}

/// Operators of one tree level. `far`, `transfer_*` and the bases are all in
/// the orthonormal coordinates of each cluster.
#[derive(Debug, Clone, Default)]
pub struct LevelOperators {
    pub rank: Vec<usize>,
    /// Leaf level only: point dofs x rank.
    pub basis_u: Vec<Mat<f64>>,
    pub basis_v: Vec<Mat<f64>>,
    /// Levels below the coarsest: rank_i x rank_parent.
    pub transfer_u: Vec<Mat<f64>>,
    pub transfer_v: Vec<Mat<f64>>,
    /// (i, j) for j in the interaction list of i.
    pub far: HashMap<(usize, usize), Mat<f64>>,
    pub weight_u: Vec<Vec<f64>>,
    pub weight_v: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct H2Operators {
    pub tree: Octree,
    pub topology: ClusterTopology,
    pub permutation: Vec<usize>,
    pub block_dim: usize,
    pub cheb_nodes: usize,
    /// Indexed by level; levels below the coarsest eliminated level stay empty.
    pub levels: Vec<LevelOperators>,
    /// Leaf pairs (i, j) with j a neighbor of i.
    pub near: HashMap<(usize, usize), Mat<f64>>,
}

impl H2Operators {
    pub fn depth(&self) -> usize {
        self.tree.depth
    }

    /// Unknowns in the original system.
    pub fn dim(&self) -> usize {
        self.tree.num_points() * self.block_dim
    }

    pub fn has_far_field(&self) -> bool {
        self.tree.depth >= MIN_DEPTH
    }

    /// Dof range of leaf i in tree order.
    pub fn leaf_dofs(&self, i: usize) -> std::ops::Range<usize> {
        let r = &self.tree.leaves()[i].point_range;
        r.start * self.block_dim..r.end * self.block_dim
    }

    pub fn max_rank(&self) -> usize {
        self.levels.iter().flat_map(|l| l.rank.iter().copied()).max().unwrap_or(0)
    }

    /// y = A_H2 x with x, y in tree order.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim());
        let depth = self.depth();
        let leaves = self.tree.leaves();
        let mut y = vec![0.0; x.len()];
        for i in 0..leaves.len() {
            let ri = self.leaf_dofs(i);
            for &j in &self.topology.neighbors[depth][i] {
                let rj = self.leaf_dofs(j);
                let s = &self.near[&(i, j)];
                let mut out = crate::dense::col_mut(&mut y[ri.clone()]);
                gemm_acc(out.as_mut(), s.as_ref(), col(&x[rj]), 1.0);
            }
        }
        if !self.has_far_field() {
            return y;
        }
        // upward pass
        let mut mp: Vec<Vec<Mat<f64>>> = vec![Vec::new(); depth + 1];
        mp[depth] = (0..leaves.len())
            .map(|i| mul(self.levels[depth].basis_v[i].transpose(), col(&x[self.leaf_dofs(i)])))
            .collect();
        for l in (MIN_DEPTH..depth).rev() {
            let lv = &self.levels[l + 1];
            mp[l] = self.tree.levels[l]
                .iter()
                .map(|p| {
                    let mut acc = Mat::zeros(self.levels[l].rank[p.index], 1);
                    for &c in &p.children {
                        gemm_acc(acc.as_mut(), lv.transfer_v[c].transpose(), mp[l + 1][c].as_ref(), 1.0);
                    }
                    acc
                })
                .collect();
        }
        // far-field coupling and downward pass
        let mut loc: Vec<Vec<Mat<f64>>> = vec![Vec::new(); depth + 1];
        for l in MIN_DEPTH..=depth {
            let lv = &self.levels[l];
            loc[l] = (0..self.tree.levels[l].len())
                .map(|i| {
                    let mut acc = Mat::zeros(lv.rank[i], 1);
                    for &j in &self.topology.interactions[l][i] {
                        gemm_acc(acc.as_mut(), lv.far[&(i, j)].as_ref(), mp[l][j].as_ref(), 1.0);
                    }
                    if l > MIN_DEPTH {
                        let p = self.tree.levels[l][i].parent.unwrap();
                        gemm_acc(acc.as_mut(), lv.transfer_u[i].as_ref(), loc[l - 1][p].as_ref(), 1.0);
                    }
                    acc
                })
                .collect();
        }
        for (i, z) in loc[depth].iter().enumerate() {
            let ri = self.leaf_dofs(i);
            let mut out = crate::dense::col_mut(&mut y[ri]);
            gemm_acc(out.as_mut(), self.levels[depth].basis_u[i].as_ref(), z.as_ref(), 1.0);
        }
        y
    }

    /// y = A_H2 x with x, y in the input ordering.
    pub fn matvec_input_order(&self, x: &[f64]) -> Vec<f64> {
        let xt = crate::tree::to_tree_order(&self.permutation, x, self.block_dim);
        crate::tree::from_tree_order(&self.permutation, &self.matvec(&xt), self.block_dim)
    }

    /// The represented matrix in input ordering; for small problems only.
    pub fn to_dense(&self, cap: usize) -> Result<Mat<f64>, H2Error> {
        let n = self.dim();
        if n > cap {
            return Err(H2Error::TooLarge(n, cap));
        }
        let mut a = Mat::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            let c = self.matvec_input_order(&e);
            for i in 0..n {
                a[(i, j)] = c[i];
            }
            e[j] = 0.0;
        }
        Ok(a)
    }
}

/// Builds near-field blocks, orthonormal nested interpolation bases and
/// far-field couplings from an n-point-per-dimension Chebyshev grid.
/// Weights start at one; see [`initialize_weights`].
pub fn chebyshev_operators(
    tree: &Octree,
    topology: &ClusterTopology,
    permutation: &[usize],
    kernel: &dyn Kernel,
    n: usize,
) -> Result<H2Operators, H2Error> {
    if n == 0 {
        return Err(H2Error::ZeroOrder);
    }
    let b = kernel.block_dim();
    let depth = tree.depth;
    let leaves = tree.leaves();
    let mut near = HashMap::new();
    let leaf_coords: Vec<Vec<[f64; 3]>> = leaves.iter().map(|c| tree.coords(c.point_range.clone())).collect();
    for i in 0..leaves.len() {
        for &j in &topology.neighbors[depth][i] {
            near.insert((i, j), kernel_block(kernel, &leaf_coords[i], &leaf_coords[j]));
        }
    }
    let mut levels: Vec<LevelOperators> = vec![LevelOperators::default(); depth + 1];
    if depth < MIN_DEPTH {
        return Ok(H2Operators {
            tree: tree.clone(),
            topology: topology.clone(),
            permutation: permutation.to_vec(),
            block_dim: b,
            cheb_nodes: n,
            levels,
            near,
        });
    }
    let nodes = n * n * n * b;
    // r_maps[i]: coefficient map from grid values to the orthonormal basis, rank x nodes
    let mut r_maps: Vec<Mat<f64>> = Vec::new();
    {
        let lv = &mut levels[depth];
        for (i, c) in leaves.iter().enumerate() {
            let p = interpolation_matrix(n, b, c.center, c.half_width, &leaf_coords[i]);
            let qr = p.qr();
            let q = qr.compute_thin_Q();
            let r = qr.thin_R().to_owned();
            lv.rank.push(q.ncols());
            lv.basis_u.push(q.clone());
            lv.basis_v.push(q);
            r_maps.push(r);
        }
    }
    let mut all_r: Vec<Vec<Mat<f64>>> = vec![Vec::new(); depth + 1];
    all_r[depth] = r_maps;
    for l in (MIN_DEPTH..depth).rev() {
        let mut rank = Vec::new();
        let mut rs = Vec::new();
        let mut transfers: Vec<Mat<f64>> = vec![Mat::zeros(0, 0); tree.levels[l + 1].len()];
        for p in &tree.levels[l] {
            let parts: Vec<Mat<f64>> = p
                .children
                .iter()
                .map(|&c| {
                    let child = &tree.levels[l + 1][c];
                    let cn = grid(n, child.center, child.half_width);
                    let t = interpolation_matrix(n, b, p.center, p.half_width, &cn);
                    mul(all_r[l + 1][c].as_ref(), t.as_ref())
                })
                .collect();
            let refs: Vec<MatRef<'_, f64>> = parts.iter().map(|m| m.as_ref()).collect();
            let stacked = crate::dense::vcat(&refs, nodes);
            let qr = stacked.qr();
            let q = qr.compute_thin_Q();
            let mut row = 0;
            for (k, &c) in p.children.iter().enumerate() {
                let h = parts[k].nrows();
                transfers[c] = q.subrows(row, h).to_owned();
                row += h;
            }
            rank.push(q.ncols());
            rs.push(qr.thin_R().to_owned());
        }
        levels[l + 1].transfer_u = transfers.clone();
        levels[l + 1].transfer_v = transfers;
        levels[l].rank = rank;
        all_r[l] = rs;
    }
    for l in MIN_DEPTH..=depth {
        let clusters = &tree.levels[l];
        let mut cache: HashMap<[i64; 3], Mat<f64>> = HashMap::new();
        let hw = clusters.first().map(|c| c.half_width).unwrap_or(1.0);
        let origin = grid(n, [0.0; 3], hw);
        let mut far = HashMap::new();
        for (i, ci) in clusters.iter().enumerate() {
            for &j in &topology.interactions[l][i] {
                let cj = &clusters[j];
                let off = [
                    cj.cell[0] as i64 - ci.cell[0] as i64,
                    cj.cell[1] as i64 - ci.cell[1] as i64,
                    cj.cell[2] as i64 - ci.cell[2] as i64,
                ];
                let kg = cache.entry(off).or_insert_with(|| {
                    let shifted: Vec<[f64; 3]> = origin
                        .iter()
                        .map(|g| [g[0] + 2.0 * hw * off[0] as f64, g[1] + 2.0 * hw * off[1] as f64, g[2] + 2.0 * hw * off[2] as f64])
                        .collect();
                    kernel_block(kernel, &origin, &shifted)
                });
                let left = mul(all_r[l][i].as_ref(), kg.as_ref());
                far.insert((i, j), mul(left.as_ref(), all_r[l][j].transpose()));
            }
        }
        let lv = &mut levels[l];
        lv.far = far;
        lv.weight_u = lv.rank.iter().map(|&k| vec![1.0; k]).collect();
        lv.weight_v = lv.weight_u.clone();
    }
    Ok(H2Operators {
        tree: tree.clone(),
        topology: topology.clone(),
        permutation: permutation.to_vec(),
        block_dim: b,
        cheb_nodes: n,
        levels,
        near,
    })
}

/// How the octree depth is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TreeDepth {
    /// Smallest depth whose mean leaf population is at most this many points.
    LeafTarget(usize),
    Fixed(usize),
}

/// Octree, topology, Chebyshev operators and weights for a point set.
pub fn build_operators(
    coords: &[[f64; 3]],
    kernel: &dyn Kernel,
    depth: TreeDepth,
    cheb_nodes: usize,
    weights: Option<(WeightMode, f64)>,
) -> Result<H2Operators, H2Error> {
    let points = points_from_coords(coords);
    let (tree, perm) = match depth {
        TreeDepth::LeafTarget(t) => build_octree(&points, t)?,
        TreeDepth::Fixed(d) => build_octree_with_depth(&points, d)?,
    };
    let topo = compute_topology(&tree);
    let mut ops = chebyshev_operators(&tree, &topo, &perm, kernel, cheb_nodes)?;
    if let Some((mode, tol)) = weights {
        initialize_weights(&mut ops, mode, tol)?;
    }
    Ok(ops)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightMode {
    /// SVD of every outgoing and incoming coupling of a cluster.
    Rigorous,
    /// SVD of a random subset of `samples` coupling columns.
    Sampled { samples: usize, seed: u64 },
}

fn sample_columns(f: Mat<f64>, mode: WeightMode, rng: &mut Option<ChaCha8Rng>) -> Mat<f64> {
    match (mode, rng.as_mut()) {
        (WeightMode::Sampled { samples, .. }, Some(rng)) if samples < f.ncols() => {
            let mut idx = sample(rng, f.ncols(), samples).into_vec();
            idx.sort_unstable();
            let scale = (f.ncols() as f64 / samples as f64).sqrt();
            Mat::from_fn(f.nrows(), samples, |i, k| f[(i, idx[k])] * scale)
        }
        _ => f,
    }
}

struct Rotation {
    q: Mat<f64>,
    weights: Vec<f64>,
}

/// Left singular basis of `f`, truncated at `reduce_tol` times its largest
/// singular value and padded to `keep` columns.
fn rotation(f: MatRef<'_, f64>, rank: usize, reduce_tol: f64) -> Result<(Mat<f64>, Vec<f64>, usize), H2Error> {
    if f.ncols() == 0 || frob(f) == 0.0 {
        return Ok((Mat::identity(rank, rank), vec![1.0; rank], rank));
    }
    let svd = full_svd(f)?;
    let cut = reduce_tol * svd.sigma[0];
    let keep = svd.sigma.iter().take_while(|&&s| s > cut).count().max(1);
    Ok((svd.u, svd.sigma, keep))
}

/// Top-down pass: for each cluster, the SVD of its couplings (interaction
/// list plus the weighted contribution inherited from the parent) rotates
/// the bases, truncates them at `reduce_tol` relative to the largest
/// singular value, and sets the weights.
pub fn initialize_weights(ops: &mut H2Operators, mode: WeightMode, reduce_tol: f64) -> Result<(), H2Error> {
    if !ops.has_far_field() {
        return Ok(());
    }
    let depth = ops.depth();
    let mut rng = match mode {
        WeightMode::Sampled { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        WeightMode::Rigorous => None,
    };
    for l in MIN_DEPTH..=depth {
        let nclusters = ops.tree.levels[l].len();
        let mut rot_u = Vec::with_capacity(nclusters);
        let mut rot_v = Vec::with_capacity(nclusters);
        for j in 0..nclusters {
            let lv = &ops.levels[l];
            let k = lv.rank[j];
            let inter = &ops.topology.interactions[l][j];
            let mut fu: Vec<Mat<f64>> = inter.iter().map(|q| lv.far[&(j, *q)].clone()).collect();
            let mut fv: Vec<Mat<f64>> = inter.iter().map(|q| lv.far[&(*q, j)].transpose().to_owned()).collect();
            if l > MIN_DEPTH {
                let p = ops.tree.levels[l][j].parent.unwrap();
                let up = &ops.levels[l - 1];
                fu.push(scale_cols(lv.transfer_u[j].as_ref(), &up.weight_u[p]));
                fv.push(scale_cols(lv.transfer_v[j].as_ref(), &up.weight_v[p]));
            }
            let fu = sample_columns(hcat(&fu.iter().map(|m| m.as_ref()).collect::<Vec<_>>(), k), mode, &mut rng);
            let fv = sample_columns(hcat(&fv.iter().map(|m| m.as_ref()).collect::<Vec<_>>(), k), mode, &mut rng);
            let (qu, su, ku) = rotation(fu.as_ref(), k, reduce_tol)?;
            let (qv, sv, kv) = rotation(fv.as_ref(), k, reduce_tol)?;
            let keep = ku.max(kv).min(k);
            let finish = |q: Mat<f64>, s: Vec<f64>| {
                let floor = s.first().map(|&s0| (reduce_tol * s0).max(f64::MIN_POSITIVE)).unwrap_or(1.0);
                let weights: Vec<f64> = (0..keep).map(|t| s.get(t).copied().filter(|&v| v > 0.0).unwrap_or(floor)).collect();
                let q = if q.ncols() >= keep { q.subcols(0, keep).to_owned() } else { pad_orthonormal(q.as_ref(), keep) };
                Rotation { q, weights }
            };
            rot_u.push(finish(qu, su));
            rot_v.push(finish(qv, sv));
        }
        for j in 0..nclusters {
            let (ru, rv) = (&rot_u[j], &rot_v[j]);
            let inter = ops.topology.interactions[l][j].clone();
            let lv = &mut ops.levels[l];
            for q in &inter {
                let k = lv.far.get_mut(&(j, *q)).unwrap();
                *k = mul(ru.q.transpose(), k.as_ref());
                let k = lv.far.get_mut(&(*q, j)).unwrap();
                *k = mul(k.as_ref(), rv.q.as_ref());
            }
            if l > MIN_DEPTH {
                lv.transfer_u[j] = mul(ru.q.transpose(), lv.transfer_u[j].as_ref());
                lv.transfer_v[j] = mul(rv.q.transpose(), lv.transfer_v[j].as_ref());
            }
            if l == depth {
                lv.basis_u[j] = mul(lv.basis_u[j].as_ref(), ru.q.as_ref());
                lv.basis_v[j] = mul(lv.basis_v[j].as_ref(), rv.q.as_ref());
            }
            lv.rank[j] = ru.weights.len();
            lv.weight_u[j] = ru.weights.clone();
            lv.weight_v[j] = rv.weights.clone();
            if l < depth {
                let children = ops.tree.levels[l][j].children.clone();
                let lc = &mut ops.levels[l + 1];
                for c in children {
                    lc.transfer_u[c] = mul(lc.transfer_u[c].as_ref(), ru.q.as_ref());
                    lc.transfer_v[c] = mul(lc.transfer_v[c].as_ref(), rv.q.as_ref());
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    /// Point unknowns of a leaf.
    Unknown,
    /// Local (incoming far-field) coefficients z.
    Local,
    /// Multipole (outgoing far-field) coefficients y.
    Multipole,
}

#[derive(Debug, Clone, Serialize)]
pub struct GraphNode {
    pub id: usize,
    pub kind: NodeKind,
    pub level: usize,
    pub cluster: usize,
    pub offset: usize,
    pub size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Near,
    Interpolation,
    Anterpolation,
    NegIdentity,
    Far,
    TransferU,
    TransferV,
}

#[derive(Debug, Clone, Serialize)]
pub struct GraphEdge {
    pub row: usize,
    pub col: usize,
    pub kind: EdgeKind,
}

#[derive(Debug, Clone, Serialize)]
pub struct GraphPattern {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

/// The extended sparse system: point unknowns plus local and multipole
/// coefficients on every level, with the right-hand side stored alongside.
#[derive(Debug, Clone)]
pub struct ExtendedGraph {
    pub ops: H2Operators,
    /// Right-hand side for the point unknowns, tree order.
    pub rhs: Vec<f64>,
    nodes: Vec<GraphNode>,
    /// node id of (kind, level, cluster)
    index: HashMap<(NodeKind, usize, usize), usize>,
    dim: usize,
}

pub fn assemble_extended_graph(ops: H2Operators, b: &[f64]) -> Result<ExtendedGraph, H2Error> {
    if b.len() != ops.dim() {
        return Err(H2Error::RhsLength { expected: ops.dim(), found: b.len() });
    }
    let depth = ops.depth();
    if ops.has_far_field() {
        for l in MIN_DEPTH..=depth {
            let lv = &ops.levels[l];
            for i in 0..lv.rank.len() {
                let (u, v) = if l == depth {
                    (lv.basis_u[i].ncols(), lv.basis_v[i].ncols())
                } else {
                    (lv.weight_u[i].len(), lv.weight_v[i].len())
                };
                if u != lv.rank[i] || v != lv.rank[i] {
                    return Err(H2Error::RankMismatch { level: l, cluster: i, u, v });
                }
            }
        }
    }
    let mut nodes = Vec::new();
    let mut index = HashMap::new();
    let mut offset = 0;
    let mut push = |kind, level, cluster, size, nodes: &mut Vec<GraphNode>| {
        let id = nodes.len();
        nodes.push(GraphNode { id, kind, level, cluster, offset, size });
        index.insert((kind, level, cluster), id);
        offset += size;
    };
    for i in 0..ops.tree.leaves().len() {
        push(NodeKind::Unknown, depth, i, ops.leaf_dofs(i).len(), &mut nodes);
    }
    if ops.has_far_field() {
        for l in (MIN_DEPTH..=depth).rev() {
            for kind in [NodeKind::Local, NodeKind::Multipole] {
                for i in 0..ops.levels[l].rank.len() {
                    push(kind, l, i, ops.levels[l].rank[i], &mut nodes);
                }
            }
        }
    }
    Ok(ExtendedGraph { rhs: b.to_vec(), ops, nodes, index, dim: offset })
}

impl ExtendedGraph {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn node(&self, kind: NodeKind, level: usize, cluster: usize) -> &GraphNode {
        &self.nodes[self.index[&(kind, level, cluster)]]
    }

    /// Full right-hand side: b on the point unknowns, zero elsewhere.
    pub fn full_rhs(&self) -> Vec<f64> {
        let mut r = vec![0.0; self.dim];
        r[..self.rhs.len()].copy_from_slice(&self.rhs);
        r
    }

    /// Every stored block as a (row node, column node, kind) triple.
    pub fn pattern(&self) -> GraphPattern {
        let ops = &self.ops;
        let depth = ops.depth();
        let id = |k, l, c| self.index[&(k, l, c)];
        let mut edges = Vec::new();
        for i in 0..ops.tree.leaves().len() {
            for &j in &ops.topology.neighbors[depth][i] {
                edges.push(GraphEdge { row: id(NodeKind::Unknown, depth, i), col: id(NodeKind::Unknown, depth, j), kind: EdgeKind::Near });
            }
        }
        if ops.has_far_field() {
            for l in MIN_DEPTH..=depth {
                for i in 0..ops.levels[l].rank.len() {
                    let (z, y) = (id(NodeKind::Local, l, i), id(NodeKind::Multipole, l, i));
                    if l == depth {
                        let x = id(NodeKind::Unknown, l, i);
                        edges.push(GraphEdge { row: x, col: z, kind: EdgeKind::Interpolation });
                        edges.push(GraphEdge { row: z, col: x, kind: EdgeKind::Anterpolation });
                    }
                    edges.push(GraphEdge { row: z, col: y, kind: EdgeKind::NegIdentity });
                    edges.push(GraphEdge { row: y, col: z, kind: EdgeKind::NegIdentity });
                    for &j in &ops.topology.interactions[l][i] {
                        edges.push(GraphEdge { row: y, col: id(NodeKind::Multipole, l, j), kind: EdgeKind::Far });
                    }
                    if l > MIN_DEPTH {
                        let p = ops.tree.levels[l][i].parent.unwrap();
                        edges.push(GraphEdge { row: y, col: id(NodeKind::Local, l - 1, p), kind: EdgeKind::TransferU });
                        edges.push(GraphEdge { row: id(NodeKind::Local, l - 1, p), col: y, kind: EdgeKind::TransferV });
                    }
                }
            }
        }
        GraphPattern { nodes: self.nodes.clone(), edges }
    }

    pub fn pattern_json(&self) -> String {
        serde_json::to_string_pretty(&self.pattern()).expect("pattern serializes")
    }

    fn seg<'a>(&self, v: MatRef<'a, f64>, kind: NodeKind, l: usize, i: usize) -> MatRef<'a, f64> {
        let n = self.node(kind, l, i);
        v.subrows(n.offset, n.size)
    }

    fn add(&self, out: &mut Mat<f64>, kind: NodeKind, l: usize, i: usize, m: MatRef<'_, f64>, x: MatRef<'_, f64>, alpha: f64) {
        let n = self.node(kind, l, i);
        gemm_acc(out.as_mut().subrows_mut(n.offset, n.size), m, x, alpha);
    }

    fn add_identity(&self, out: &mut Mat<f64>, kind: NodeKind, l: usize, i: usize, x: MatRef<'_, f64>, alpha: f64) {
        let n = self.node(kind, l, i);
        let mut o = out.as_mut().subrows_mut(n.offset, n.size);
        o += alpha * x;
    }

    /// y = E x (or Eᵀ x when `transpose`).
    pub fn apply_vec(&self, x: &[f64], transpose: bool) -> Vec<f64> {
        assert_eq!(x.len(), self.dim);
        crate::dense::to_vec(self.apply_block(col(x), transpose).as_ref())
    }

    /// E X (or Eᵀ X) for a block of columns.
    pub fn apply_block(&self, x: MatRef<'_, f64>, transpose: bool) -> Mat<f64> {
        assert_eq!(x.nrows(), self.dim);
        use NodeKind::*;
        let ops = &self.ops;
        let depth = ops.depth();
        let mut y = Mat::zeros(self.dim, x.ncols());
        for i in 0..ops.tree.leaves().len() {
            for &j in &ops.topology.neighbors[depth][i] {
                let s = &ops.near[&(i, j)];
                if transpose {
                    self.add(&mut y, Unknown, depth, j, s.transpose(), self.seg(x, Unknown, depth, i), 1.0);
                } else {
                    self.add(&mut y, Unknown, depth, i, s.as_ref(), self.seg(x, Unknown, depth, j), 1.0);
                }
            }
        }
        if !ops.has_far_field() {
            return y;
        }
        for l in MIN_DEPTH..=depth {
            let lv = &ops.levels[l];
            for i in 0..lv.rank.len() {
                // row/column pairs (row kind, col kind, block) for this cluster
                if l == depth {
                    let (u, v) = (&lv.basis_u[i], &lv.basis_v[i]);
                    if transpose {
                        self.add(&mut y, Local, l, i, u.transpose(), self.seg(x, Unknown, l, i), 1.0);
                        self.add(&mut y, Unknown, l, i, v.as_ref(), self.seg(x, Local, l, i), 1.0);
                    } else {
                        self.add(&mut y, Unknown, l, i, u.as_ref(), self.seg(x, Local, l, i), 1.0);
                        self.add(&mut y, Local, l, i, v.transpose(), self.seg(x, Unknown, l, i), 1.0);
                    }
                }
                self.add_identity(&mut y, Local, l, i, self.seg(x, Multipole, l, i), -1.0);
                self.add_identity(&mut y, Multipole, l, i, self.seg(x, Local, l, i), -1.0);
                for &j in &ops.topology.interactions[l][i] {
                    let k = &lv.far[&(i, j)];
                    if transpose {
                        self.add(&mut y, Multipole, l, j, k.transpose(), self.seg(x, Multipole, l, i), 1.0);
                    } else {
                        self.add(&mut y, Multipole, l, i, k.as_ref(), self.seg(x, Multipole, l, j), 1.0);
                    }
                }
                if l > MIN_DEPTH {
                    let p = ops.tree.levels[l][i].parent.unwrap();
                    let (tu, tv) = (&lv.transfer_u[i], &lv.transfer_v[i]);
                    if transpose {
                        self.add(&mut y, Local, l - 1, p, tu.transpose(), self.seg(x, Multipole, l, i), 1.0);
                        self.add(&mut y, Multipole, l, i, tv.as_ref(), self.seg(x, Local, l - 1, p), 1.0);
                    } else {
                        self.add(&mut y, Multipole, l, i, tu.as_ref(), self.seg(x, Local, l - 1, p), 1.0);
                        self.add(&mut y, Local, l - 1, p, tv.transpose(), self.seg(x, Multipole, l, i), 1.0);
                    }
                }
            }
        }
        y
    }

    /// Dense E; for oracle checks on small problems.
    pub fn to_dense(&self, cap: usize) -> Result<Mat<f64>, H2Error> {
        if self.dim > cap {
            return Err(H2Error::TooLarge(self.dim, cap));
        }
        Ok(self.apply_block(Mat::<f64>::identity(self.dim, self.dim).as_ref(), false))
    }
}

impl LinearOperator for ExtendedGraph {
    fn nrows(&self) -> usize {
        self.dim
    }
    fn ncols(&self) -> usize {
        self.dim
    }
    fn apply(&self, x: MatRef<'_, f64>) -> Mat<f64> {
        apply_cols(self, x, false)
    }
    fn apply_transpose(&self, x: MatRef<'_, f64>) -> Mat<f64> {
        apply_cols(self, x, true)
    }
}

fn apply_cols(g: &ExtendedGraph, x: MatRef<'_, f64>, transpose: bool) -> Mat<f64> {
    g.apply_block(x, transpose)
}

/// Leading singular value of E from a randomized pass with extra power
/// iterations.
pub fn estimate_sigma0(graph: &ExtendedGraph) -> Result<f64, H2Error> {
    let opts = RsvdOptions { oversample: 10, power_iters: 4, initial_rank: 1, seed: 0x51 };
    Ok(leading_singular_values(graph, 1, &opts)?.first().copied().unwrap_or(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolation_reproduces_nodes_and_sums_to_one() {
        let n = 4;
        let nodes = chebyshev_points(n);
        for (m, &x) in nodes.iter().enumerate() {
            let w = interpolation_weights(n, x);
            for (k, wk) in w.iter().enumerate() {
                assert!((wk - if k == m { 1.0 } else { 0.0 }).abs() < 1e-13);
            }
        }
        let w = interpolation_weights(n, 0.3);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-13);
    }

    #[test]
    fn interpolation_is_exact_for_low_degree() {
        let n = 3;
        let nodes = chebyshev_points(n);
        let f = |x: f64| 2.0 * x * x - x + 0.5;
        let t = -0.37;
        let w = interpolation_weights(n, t);
        let approx: f64 = w.iter().zip(&nodes).map(|(w, x)| w * f(*x)).sum();
        assert!((approx - f(t)).abs() < 1e-13);
    }

    #[test]
    fn empty_coupling_gives_unit_weights() {
        let (q, w, keep) = rotation(Mat::<f64>::zeros(3, 0).as_ref(), 3, 1e-3).unwrap();
        assert_eq!(w, vec![1.0; 3]);
        assert_eq!(keep, 3);
        assert_eq!(q, Mat::<f64>::identity(3, 3));
        let (_, w, _) = rotation(Mat::<f64>::zeros(2, 4).as_ref(), 2, 1e-3).unwrap();
        assert_eq!(w, vec![1.0; 2]);
    }
}
