//! Kernel functions, scene generators and the scene text format.

use crate::tree::{points_from_coords, Point3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::{BufRead, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("parameter {name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("invalid icosphere subdivision {0}")]
    InvalidSubdivision(i32),
    #[error("scene needs at least one point")]
    EmptyScene,
    #[error("shell subdivisions and radii differ in length ({0} vs {1})")]
    ShellMismatch(usize, usize),
    #[error("scene line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A translation-invariant kernel producing `block_dim x block_dim` blocks.
pub trait Kernel: Send + Sync {
    fn block_dim(&self) -> usize;

    /// Writes the block for the pair (target, source) in row-major order.
    fn eval(&self, target: [f64; 3], source: [f64; 3], out: &mut [f64]);

    fn name(&self) -> String;
}

/// K(r) = 1 at r = 0, r/d below d and d/r beyond.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkKernel {
    pub d: f64,
}

impl BenchmarkKernel {
    pub fn value(&self, r: f64) -> f64 {
        if r == 0.0 {
            1.0
        } else if r < self.d {
            r / self.d
        } else {
            self.d / r
        }
    }
}

impl Kernel for BenchmarkKernel {
    fn block_dim(&self) -> usize {
        1
    }

    fn eval(&self, target: [f64; 3], source: [f64; 3], out: &mut [f64]) {
        out[0] = self.value(dist(target, source));
    }

    fn name(&self) -> String {
        "benchmark".into()
    }
}

pub fn benchmark_kernel(d: f64) -> Result<BenchmarkKernel, KernelError> {
    positive("d", d)?;
    Ok(BenchmarkKernel { d })
}

/// Rotne-Prager-Yamakawa mobility for spheres of equal radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RpyKernel {
    pub radius: f64,
    pub viscosity: f64,
}

impl RpyKernel {
    /// Scalar coefficients (f, g) of M = f I + g r̂r̂ᵀ.
    pub fn coefficients(&self, r: f64) -> (f64, f64) {
        let a = self.radius;
        if r >= 2.0 * a {
            let c = 1.0 / (8.0 * PI * self.viscosity * r);
            let s = a * a / (r * r);
            (c * (1.0 + 2.0 * s / 3.0), c * (1.0 - 2.0 * s))
        } else {
            let c = 1.0 / (6.0 * PI * self.viscosity * a);
            (c * (1.0 - 9.0 * r / (32.0 * a)), c * 3.0 * r / (32.0 * a))
        }
    }
}

impl Kernel for RpyKernel {
    fn block_dim(&self) -> usize {
        3
    }

    fn eval(&self, target: [f64; 3], source: [f64; 3], out: &mut [f64]) {
        let d = [target[0] - source[0], target[1] - source[1], target[2] - source[2]];
        let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        let (f, g) = self.coefficients(r);
        for i in 0..3 {
            for j in 0..3 {
                let dyad = if r > 0.0 { d[i] * d[j] / (r * r) } else { 0.0 };
                out[3 * i + j] = g * dyad + if i == j { f } else { 0.0 };
            }
        }
    }

    fn name(&self) -> String {
        "rpy".into()
    }
}

pub fn rpy_kernel(radius: f64, viscosity: f64) -> Result<RpyKernel, KernelError> {
    positive("radius", radius)?;
    positive("viscosity", viscosity)?;
    Ok(RpyKernel { radius, viscosity })
}

fn positive(name: &'static str, value: f64) -> Result<(), KernelError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(KernelError::NonPositive { name, value })
    }
}

pub fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// base * (n / 1000)^exponent
pub fn scaled_d(base: f64, n: usize, exponent: f64) -> f64 {
    base * (n as f64 / 1000.0).powf(exponent)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SceneSpec {
    SphereSurface { n: usize, seed: u64 },
    CubeUniform { n: usize, seed: u64 },
    /// nx * ny * nz icospheres of radius `sphere_radius`, centers `spacing` apart.
    SphereLattice { nx: usize, ny: usize, nz: usize, subdivision: i32, spacing: f64, sphere_radius: f64 },
    /// One icosphere per entry, all centered at the origin.
    ConcentricShells { subdivisions: Vec<i32>, radii: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub points: Vec<Point3>,
    pub description: String,
}

impl Scene {
    pub fn coords(&self) -> Vec<[f64; 3]> {
        self.points.iter().map(Point3::coords).collect()
    }
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene, KernelError> {
    let coords: Vec<[f64; 3]> = match spec {
        SceneSpec::SphereSurface { n, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            (0..*n)
                .map(|_| loop {
                    let v: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
                    let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                    if r > 1e-12 {
                        break [v[0] / r, v[1] / r, v[2] / r];
                    }
                })
                .collect()
        }
        SceneSpec::CubeUniform { n, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            (0..*n)
                .map(|_| [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)])
                .collect()
        }
        SceneSpec::SphereLattice { nx, ny, nz, subdivision, spacing, sphere_radius } => {
            positive("spacing", *spacing)?;
            positive("sphere_radius", *sphere_radius)?;
            let unit = icosphere(*subdivision)?;
            let mut out = Vec::with_capacity(nx * ny * nz * unit.len());
            for k in 0..*nz {
                for j in 0..*ny {
                    for i in 0..*nx {
                        let c = [i as f64 * spacing, j as f64 * spacing, k as f64 * spacing];
                        out.extend(unit.iter().map(|v| {
                            [c[0] + sphere_radius * v[0], c[1] + sphere_radius * v[1], c[2] + sphere_radius * v[2]]
                        }));
                    }
                }
            }
            out
        }
        SceneSpec::ConcentricShells { subdivisions, radii } => {
            if subdivisions.len() != radii.len() {
                return Err(KernelError::ShellMismatch(subdivisions.len(), radii.len()));
            }
            let mut out = Vec::new();
            for (&s, &r) in subdivisions.iter().zip(radii) {
                positive("radius", r)?;
                out.extend(icosphere(s)?.into_iter().map(|v| [r * v[0], r * v[1], r * v[2]]));
            }
            out
        }
    };
    if coords.is_empty() {
        return Err(KernelError::EmptyScene);
    }
    Ok(Scene { points: points_from_coords(&coords), description: serde_json::to_string(spec).unwrap_or_default() })
}

/// Unit icosphere: a regular icosahedron refined `subdivision` times with
/// edge midpoints projected to the sphere. Has 10 * 4^s + 2 vertices.
pub fn icosphere(subdivision: i32) -> Result<Vec<[f64; 3]>, KernelError> {
    if !(0..=10).contains(&subdivision) {
        return Err(KernelError::InvalidSubdivision(subdivision));
    }
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<[f64; 3]> = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ]
    .iter()
    .map(|&v| normalize(v))
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivision {
        let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
        let mut mid = |a: usize, b: usize, verts: &mut Vec<[f64; 3]>| -> usize {
            let key = (a.min(b), a.max(b));
            *midpoints.entry(key).or_insert_with(|| {
                let (p, q) = (verts[a], verts[b]);
                verts.push(normalize([p[0] + q[0], p[1] + q[1], p[2] + q[2]]));
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let ab = mid(f[0], f[1], &mut verts);
            let bc = mid(f[1], f[2], &mut verts);
            let ca = mid(f[2], f[0], &mut verts);
            next.extend([[f[0], ab, ca], [f[1], bc, ab], [f[2], ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    Ok(verts)
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / r, v[1] / r, v[2] / r]
}

/// One `x y z` line per point.
pub fn write_scene<W: Write>(scene: &Scene, mut w: W) -> Result<(), KernelError> {
    for p in &scene.points {
        writeln!(w, "{:e} {:e} {:e}", p.x, p.y, p.z)?;
    }
    Ok(())
}

pub fn read_scene<R: BufRead>(r: R) -> Result<Scene, KernelError> {
    let mut coords = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let vals: Result<Vec<f64>, _> = t.split_whitespace().map(str::parse::<f64>).collect();
        match vals {
            Ok(v) if v.len() == 3 => coords.push([v[0], v[1], v[2]]),
            Ok(v) => return Err(KernelError::Parse { line: i + 1, msg: format!("expected 3 values, found {}", v.len()) }),
            Err(e) => return Err(KernelError::Parse { line: i + 1, msg: e.to_string() }),
        }
    }
    if coords.is_empty() {
        return Err(KernelError::EmptyScene);
    }
    Ok(Scene { points: points_from_coords(&coords), description: "imported".into() })
}

/// Fills a dense block of kernel values, rows from `targets`, columns from `sources`.
pub fn kernel_block(kernel: &dyn Kernel, targets: &[[f64; 3]], sources: &[[f64; 3]]) -> faer::Mat<f64> {
    let b = kernel.block_dim();
    let mut m = faer::Mat::<f64>::zeros(targets.len() * b, sources.len() * b);
    let mut buf = vec![0.0; b * b];
    for (j, s) in sources.iter().enumerate() {
        for (i, t) in targets.iter().enumerate() {
            kernel.eval(*t, *s, &mut buf);
            for bi in 0..b {
                for bj in 0..b {
                    m[(i * b + bi, j * b + bj)] = buf[bi * b + bj];
                }
            }
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn benchmark_branches() {
        let k = benchmark_kernel(0.1).unwrap();
        assert_eq!(k.value(0.0), 1.0);
        assert!((k.value(0.05) - 0.5).abs() < 1e-15);
        assert!((k.value(0.2) - 0.5).abs() < 1e-15);
        assert_eq!(k.value(0.1), 1.0);
    }

    #[test]
    fn rpy_self_block() {
        let k = rpy_kernel(0.5, 1.0).unwrap();
        let mut out = [0.0; 9];
        k.eval([1.0, 2.0, 3.0], [1.0, 2.0, 3.0], &mut out);
        let s = 1.0 / (6.0 * PI * 0.5);
        for i in 0..3 {
            for j in 0..3 {
                assert!((out[3 * i + j] - if i == j { s } else { 0.0 }).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn rpy_continuous_at_contact() {
        let k = rpy_kernel(0.3, 2.0).unwrap();
        let (f1, g1) = k.coefficients(0.6 * (1.0 - 1e-12));
        let (f2, g2) = k.coefficients(0.6);
        assert!((f1 - f2).abs() < 1e-10 && (g1 - g2).abs() < 1e-10);
    }

    #[test]
    fn icosphere_counts() {
        for s in 0..=5 {
            assert_eq!(icosphere(s).unwrap().len(), 10 * 4usize.pow(s as u32) + 2);
        }
        assert!(icosphere(-1).is_err());
    }

    #[test]
    fn scaled_d_examples() {
        assert!((scaled_d(1e-3, 1000, -0.5) - 1e-3).abs() < 1e-18);
        assert!((scaled_d(1e-3, 4000, -0.5) - 5e-4).abs() < 1e-15);
        assert!((scaled_d(1e-3, 8000, -1.0 / 3.0) - 5e-4).abs() < 1e-15);
    }

    #[test]
    fn scene_roundtrip() {
        let s = generate_scene(&SceneSpec::CubeUniform { n: 20, seed: 3 }).unwrap();
        let mut buf = Vec::new();
        write_scene(&s, &mut buf).unwrap();
        let back = read_scene(&buf[..]).unwrap();
        assert_eq!(back.coords(), s.coords());
    }
}
