//! Uniform octree over 3D point sets and the cluster topology derived from it.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::ops::Range;
use thiserror::Error;

/// Finest grid used to bin points; deeper trees are rejected.
pub const MAX_DEPTH: usize = 20;

/// Levels below this have no well-separated pairs, so the elimination
/// needs at least this depth.
pub const MIN_DEPTH: usize = 2;

#[derive(Debug, Error, PartialEq)]
pub enum TreeError {
    #[error("point set is empty")]
    Empty,
    #[error("leaf target must be at least 1")]
    ZeroLeafTarget,
    #[error("all points coincide; bounding box has zero extent")]
    DegenerateGeometry,
    #[error("point {0} has a non-finite coordinate")]
    NonFinite(usize),
    #[error("requested depth {0} exceeds the maximum {MAX_DEPTH}")]
    TooDeep(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub global_index: usize,
}

impl Point3 {
    pub fn new(x: f64, y: f64, z: f64, global_index: usize) -> Self {
        Self { x, y, z, global_index }
    }

    pub fn coords(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

/// Number the coordinates 0..n in input order.
pub fn points_from_coords(coords: &[[f64; 3]]) -> Vec<Point3> {
    coords
        .iter()
        .enumerate()
        .map(|(i, c)| Point3::new(c[0], c[1], c[2], i))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub level: usize,
    /// Position in the level's cluster list (Morton order).
    pub index: usize,
    /// Integer cell coordinates on the 2^level grid.
    pub cell: [u32; 3],
    pub center: [f64; 3],
    pub half_width: f64,
    /// Slice of `Octree::points` owned by this cluster.
    pub point_range: Range<usize>,
    pub children: Vec<usize>,
    pub parent: Option<usize>,
}

impl Cluster {
    pub fn len(&self) -> usize {
        self.point_range.len()
    }

    pub fn is_empty(&self) -> bool {
        self.point_range.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Octree {
    pub depth: usize,
    pub center: [f64; 3],
    pub half_width: f64,
    /// `levels[l]` lists the non-empty clusters at level l in Morton order.
    pub levels: Vec<Vec<Cluster>>,
    /// Points in tree order.
    pub points: Vec<Point3>,
}

impl Octree {
    pub fn leaves(&self) -> &[Cluster] {
        &self.levels[self.depth]
    }

    pub fn num_points(&self) -> usize {
        self.points.len()
    }

    /// `perm[k]` is the input index of the k-th point in tree order.
    pub fn permutation(&self) -> Vec<usize> {
        self.points.iter().map(|p| p.global_index).collect()
    }

    /// Total number of clusters over all levels.
    pub fn cluster_count(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    /// Clusters on levels that take part in the elimination.
    pub fn eliminated_cluster_count(&self) -> usize {
        self.levels.iter().skip(MIN_DEPTH).map(Vec::len).sum()
    }

    pub fn coords(&self, range: Range<usize>) -> Vec<[f64; 3]> {
        self.points[range].iter().map(Point3::coords).collect()
    }
}

/// Gather `values` (input order, `dim` entries per point) into tree order.
pub fn to_tree_order(perm: &[usize], values: &[f64], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for (k, &g) in perm.iter().enumerate() {
        out[k * dim..(k + 1) * dim].copy_from_slice(&values[g * dim..(g + 1) * dim]);
    }
    out
}

/// Scatter tree-ordered `values` back to input order.
pub fn from_tree_order(perm: &[usize], values: &[f64], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for (k, &g) in perm.iter().enumerate() {
        out[g * dim..(g + 1) * dim].copy_from_slice(&values[k * dim..(k + 1) * dim]);
    }
    out
}

fn spread_bits(v: u32) -> u64 {
    let mut x = v as u64 & 0x1f_ffff;
    x = (x | (x << 32)) & 0x1f00000000ffff;
    x = (x | (x << 16)) & 0x1f0000ff0000ff;
    x = (x | (x << 8)) & 0x100f00f00f00f00f;
    x = (x | (x << 4)) & 0x10c30c30c30c30c3;
    x = (x | (x << 2)) & 0x1249249249249249;
    x
}

pub fn morton_key(cell: [u32; 3]) -> u64 {
    spread_bits(cell[0]) | (spread_bits(cell[1]) << 1) | (spread_bits(cell[2]) << 2)
}

/// Cells touch (faces, edges or corners) or coincide.
pub fn cells_adjacent(a: [u32; 3], b: [u32; 3]) -> bool {
    (0..3).all(|d| a[d].abs_diff(b[d]) <= 1)
}

struct Binned {
    center: [f64; 3],
    half_width: f64,
    /// Cell of every input point on the finest grid.
    fine: Vec<[u32; 3]>,
}

fn bin_points(points: &[Point3]) -> Result<Binned, TreeError> {
    if points.is_empty() {
        return Err(TreeError::Empty);
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for (i, p) in points.iter().enumerate() {
        for (d, c) in p.coords().into_iter().enumerate() {
            if !c.is_finite() {
                return Err(TreeError::NonFinite(i));
            }
            lo[d] = lo[d].min(c);
            hi[d] = hi[d].max(c);
        }
    }
    let extent = (0..3).map(|d| hi[d] - lo[d]).fold(0.0, f64::max);
    if extent <= 0.0 {
        return Err(TreeError::DegenerateGeometry);
    }
    let half_width = extent / 2.0;
    let center = [
        (lo[0] + hi[0]) / 2.0,
        (lo[1] + hi[1]) / 2.0,
        (lo[2] + hi[2]) / 2.0,
    ];
    let n_fine = 1u64 << MAX_DEPTH;
    let fine = points
        .iter()
        .map(|p| {
            let c = p.coords();
            let mut cell = [0u32; 3];
            for d in 0..3 {
                let t = (c[d] - (center[d] - half_width)) / extent * n_fine as f64;
                // ceil - 1 sends points on a cell face to the lower cell
                let idx = t.ceil() - 1.0;
                cell[d] = idx.clamp(0.0, (n_fine - 1) as f64) as u32;
            }
            cell
        })
        .collect();
    Ok(Binned { center, half_width, fine })
}

fn coarsen(cell: [u32; 3], depth: usize) -> [u32; 3] {
    let s = MAX_DEPTH - depth;
    [cell[0] >> s, cell[1] >> s, cell[2] >> s]
}

/// Smallest depth >= 2 whose mean non-empty leaf population is at most
/// `leaf_target`. Returns the octree and the tree-order permutation.
pub fn build_octree(points: &[Point3], leaf_target: usize) -> Result<(Octree, Vec<usize>), TreeError> {
    if leaf_target == 0 {
        return Err(TreeError::ZeroLeafTarget);
    }
    let binned = bin_points(points)?;
    let mut depth = MIN_DEPTH;
    loop {
        let mut keys: Vec<u64> = binned.fine.iter().map(|&c| morton_key(coarsen(c, depth))).collect();
        keys.sort_unstable();
        keys.dedup();
        let mean = points.len() as f64 / keys.len() as f64;
        if mean <= leaf_target as f64 || depth == MAX_DEPTH {
            break;
        }
        depth += 1;
    }
    Ok(assemble(points, &binned, depth))
}

/// Octree of a fixed depth. Depths 0 and 1 are allowed and give trees
/// without any far field.
pub fn build_octree_with_depth(points: &[Point3], depth: usize) -> Result<(Octree, Vec<usize>), TreeError> {
    if depth > MAX_DEPTH {
        return Err(TreeError::TooDeep(depth));
    }
    let binned = bin_points(points)?;
    Ok(assemble(points, &binned, depth))
}

fn assemble(points: &[Point3], binned: &Binned, depth: usize) -> (Octree, Vec<usize>) {
    let leaf_cells: Vec<[u32; 3]> = binned.fine.iter().map(|&c| coarsen(c, depth)).collect();
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by_key(|&i| (morton_key(leaf_cells[i]), i));
    let sorted: Vec<Point3> = order.iter().map(|&i| points[i]).collect();

    let mut levels: Vec<Vec<Cluster>> = vec![Vec::new(); depth + 1];
    // leaves: runs of equal cells in the sorted order
    let mut start = 0;
    while start < order.len() {
        let cell = leaf_cells[order[start]];
        let mut end = start + 1;
        while end < order.len() && leaf_cells[order[end]] == cell {
            end += 1;
        }
        let index = levels[depth].len();
        levels[depth].push(Cluster {
            level: depth,
            index,
            cell,
            center: [0.0; 3],
            half_width: 0.0,
            point_range: start..end,
            children: Vec::new(),
            parent: None,
        });
        start = end;
    }
    // coarser levels: Morton order makes siblings contiguous
    for l in (0..depth).rev() {
        let (upper, lower) = levels.split_at_mut(l + 1);
        let parents = &mut upper[l];
        for child in lower[0].iter_mut() {
            let pc = [child.cell[0] >> 1, child.cell[1] >> 1, child.cell[2] >> 1];
            match parents.last_mut() {
                Some(p) if p.cell == pc => {
                    p.point_range.end = child.point_range.end;
                    p.children.push(child.index);
                    child.parent = Some(p.index);
                }
                _ => {
                    let index = parents.len();
                    child.parent = Some(index);
                    parents.push(Cluster {
                        level: l,
                        index,
                        cell: pc,
                        center: [0.0; 3],
                        half_width: 0.0,
                        point_range: child.point_range.clone(),
                        children: vec![child.index],
                        parent: None,
                    });
                }
            }
        }
    }
    for (l, clusters) in levels.iter_mut().enumerate() {
        let hw = binned.half_width / (1u64 << l) as f64;
        for c in clusters.iter_mut() {
            for d in 0..3 {
                c.center[d] = binned.center[d] - binned.half_width + (2 * c.cell[d] as u64 + 1) as f64 * hw;
            }
            c.half_width = hw;
        }
    }
    let tree = Octree {
        depth,
        center: binned.center,
        half_width: binned.half_width,
        levels,
        points: sorted,
    };
    (tree, order)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterTopology {
    /// `neighbors[l][i]`: touching clusters on level l, self included, sorted.
    pub neighbors: Vec<Vec<Vec<usize>>>,
    /// `interactions[l][i]`: children of the parent's neighbors that do not touch i, sorted.
    pub interactions: Vec<Vec<Vec<usize>>>,
    /// `children[l][i]`: child indices on level l + 1.
    pub children: Vec<Vec<Vec<usize>>>,
}

impl ClusterTopology {
    pub fn is_neighbor(&self, level: usize, i: usize, j: usize) -> bool {
        self.neighbors[level][i].binary_search(&j).is_ok()
    }
}

pub fn compute_topology(tree: &Octree) -> ClusterTopology {
    let mut neighbors = Vec::with_capacity(tree.levels.len());
    let mut interactions = Vec::with_capacity(tree.levels.len());
    let mut children = Vec::with_capacity(tree.levels.len());
    for (l, clusters) in tree.levels.iter().enumerate() {
        let lookup: HashMap<[u32; 3], usize> = clusters.iter().map(|c| (c.cell, c.index)).collect();
        let nb: Vec<Vec<usize>> = clusters
            .iter()
            .map(|c| {
                let mut list = Vec::with_capacity(27);
                for dz in -1i64..=1 {
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let q = [c.cell[0] as i64 + dx, c.cell[1] as i64 + dy, c.cell[2] as i64 + dz];
                            if q.iter().any(|&v| v < 0) {
                                continue;
                            }
                            if let Some(&j) = lookup.get(&[q[0] as u32, q[1] as u32, q[2] as u32]) {
                                list.push(j);
                            }
                        }
                    }
                }
                list.sort_unstable();
                list
            })
            .collect();
        let il: Vec<Vec<usize>> = if l == 0 {
            vec![Vec::new(); clusters.len()]
        } else {
            let parents = &tree.levels[l - 1];
            let parent_nb: &Vec<Vec<usize>> = &neighbors[l - 1];
            clusters
                .iter()
                .map(|c| {
                    let p = c.parent.expect("non-root cluster has a parent");
                    let mut list: Vec<usize> = parent_nb[p]
                        .iter()
                        .flat_map(|&q| parents[q].children.iter().copied())
                        .filter(|&j| !cells_adjacent(c.cell, clusters[j].cell))
                        .collect();
                    list.sort_unstable();
                    list
                })
                .collect()
        };
        children.push(clusters.iter().map(|c| c.children.clone()).collect());
        neighbors.push(nb);
        interactions.push(il);
    }
    ClusterTopology { neighbors, interactions, children }
}
