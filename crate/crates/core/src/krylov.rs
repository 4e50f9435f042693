//! Non-restarted GMRES with pluggable operator and preconditioner.

use crate::factor::IfmmFactorization;
use crate::h2build::H2Operators;
use crate::kernel::{kernel_block, Kernel};
use faer::linalg::solvers::{PartialPivLu, ShapeCore, Solve};
use faer::Mat;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KrylovError {
    #[error("tolerance must be positive, got {0}")]
    Tolerance(f64),
    #[error("max_iters must be at least 1")]
    NoIterations,
    #[error("operator has dimension {op}, vector has length {vec}")]
    Dimension { op: usize, vec: usize },
    #[error("block size must be positive")]
    BlockSize,
    #[error("singular diagonal block starting at row {0}")]
    SingularBlock(usize),
    #[error(transparent)]
    Factor(#[from] crate::factor::FactorError),
}

/// A square linear map applied to vectors.
pub trait Operator {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PrecondSide {
    #[default]
    None,
    Left,
    Right,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct IterationTrace {
    /// Relative residual of the system GMRES minimizes, starting with 1 at
    /// iteration zero. For left preconditioning this is the preconditioned residual.
    pub residual_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub side: PrecondSide,
    /// ‖b − A x‖ / ‖b‖ for the returned x.
    pub final_residual: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct GmresOptions {
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for GmresOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iters: 500 }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// GMRES from a zero initial guess with modified Gram-Schmidt Arnoldi and
/// Givens rotations. Left: solves P⁻¹A x = P⁻¹b. Right: solves A P⁻¹ u = b, x = P⁻¹u.
pub fn gmres(
    a: &dyn Operator,
    b: &[f64],
    opts: GmresOptions,
    precond: Option<&dyn Operator>,
    side: PrecondSide,
) -> Result<(Vec<f64>, IterationTrace), KrylovError> {
    if opts.tol.is_nan() || opts.tol <= 0.0 {
        return Err(KrylovError::Tolerance(opts.tol));
    }
    if opts.max_iters == 0 {
        return Err(KrylovError::NoIterations);
    }
    let n = a.dim();
    if b.len() != n {
        return Err(KrylovError::Dimension { op: n, vec: b.len() });
    }
    if let Some(p) = precond {
        if p.dim() != n {
            return Err(KrylovError::Dimension { op: p.dim(), vec: n });
        }
    }
    let side = if precond.is_none() { PrecondSide::None } else { side };
    let pinv = |x: &[f64]| match precond {
        Some(p) => p.apply(x),
        None => x.to_vec(),
    };
    let op = |x: &[f64]| match side {
        PrecondSide::Left => pinv(&a.apply(x)),
        PrecondSide::Right => a.apply(&pinv(x)),
        PrecondSide::None => a.apply(x),
    };
    let r0 = if side == PrecondSide::Left { pinv(b) } else { b.to_vec() };
    let beta = norm(&r0);
    let mut trace = IterationTrace { residual_history: vec![1.0], iterations: 0, converged: false, side, final_residual: 1.0 };
    if beta == 0.0 {
        trace.converged = true;
        trace.final_residual = 0.0;
        return Ok((vec![0.0; n], trace));
    }
    let m = opts.max_iters;
    let mut basis: Vec<Vec<f64>> = vec![r0.iter().map(|v| v / beta).collect()];
    // columns of the rotated Hessenberg matrix
    let mut h: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut cs: Vec<f64> = Vec::with_capacity(m);
    let mut sn: Vec<f64> = Vec::with_capacity(m);
    let mut g = vec![beta];
    let mut k = 0;
    while k < m {
        let mut w = op(&basis[k]);
        let w_norm0 = norm(&w);
        let mut hk = vec![0.0; k + 2];
        for (j, vj) in basis.iter().enumerate() {
            let c = dot(&w, vj);
            hk[j] = c;
            for (wi, vi) in w.iter_mut().zip(vj) {
                *wi -= c * vi;
            }
        }
        let hnext = norm(&w);
        hk[k + 1] = hnext;
        for j in 0..k {
            let t = cs[j] * hk[j] + sn[j] * hk[j + 1];
            hk[j + 1] = -sn[j] * hk[j] + cs[j] * hk[j + 1];
            hk[j] = t;
        }
        let rho = hk[k].hypot(hk[k + 1]);
        let (c, s) = if rho == 0.0 { (1.0, 0.0) } else { (hk[k] / rho, hk[k + 1] / rho) };
        hk[k] = rho;
        hk[k + 1] = 0.0;
        cs.push(c);
        sn.push(s);
        let gk = g[k];
        g[k] = c * gk;
        g.push(-s * gk);
        h.push(hk);
        k += 1;
        let res = g[k].abs() / beta;
        trace.residual_history.push(res);
        if res <= opts.tol {
            trace.converged = true;
            break;
        }
        if hnext <= 1e-14 * w_norm0.max(f64::MIN_POSITIVE) {
            // Krylov space is invariant; the least-squares solution is final
            break;
        }
        basis.push(w.iter().map(|v| v / hnext).collect());
    }
    trace.iterations = k;
    // back substitution on the triangular system
    let mut yk = vec![0.0; k];
    for i in (0..k).rev() {
        let mut s = g[i];
        for j in i + 1..k {
            s -= h[j][i] * yk[j];
        }
        yk[i] = if h[i][i] != 0.0 { s / h[i][i] } else { 0.0 };
    }
    let mut u = vec![0.0; n];
    for (j, yj) in yk.iter().enumerate() {
        for (ui, vi) in u.iter_mut().zip(&basis[j]) {
            *ui += yj * vi;
        }
    }
    let x = if side == PrecondSide::Right { pinv(&u) } else { u };
    let ax = a.apply(&x);
    let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    trace.final_residual = norm(&r) / norm(b);
    if !trace.converged {
        trace.converged = trace.residual_history.last().is_some_and(|r| *r <= opts.tol);
    }
    Ok((x, trace))
}

/// Dense matrix in the input ordering.
pub struct DenseOperator {
    pub a: Mat<f64>,
}

impl Operator for DenseOperator {
    fn dim(&self) -> usize {
        self.a.nrows()
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        crate::dense::to_vec(crate::dense::mul(self.a.as_ref(), crate::dense::col(x)).as_ref())
    }
}

/// Fast H² matrix-vector product in the input ordering.
pub struct H2Matvec<'a> {
    pub ops: &'a H2Operators,
}

impl Operator for H2Matvec<'_> {
    fn dim(&self) -> usize {
        self.ops.dim()
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        h2_matvec(self.ops, x)
    }
}

/// y = A x through near-field blocks and the upward, coupling and downward
/// passes of the H² operators; x and y in input order.
pub fn h2_matvec(ops: &H2Operators, x: &[f64]) -> Vec<f64> {
    ops.matvec_input_order(x)
}

/// IFMM factorization used as P⁻¹.
pub struct IfmmPreconditioner<'a> {
    pub factorization: &'a IfmmFactorization,
}

impl Operator for IfmmPreconditioner<'_> {
    fn dim(&self) -> usize {
        self.factorization.dim()
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.factorization.solve(x).expect("preconditioner dimension checked by gmres")
    }
}

/// Inverse of the block diagonal of A, blocks of `block_size` consecutive
/// unknowns in input order; the last block may be shorter.
pub struct BlockDiagPreconditioner {
    dim: usize,
    blocks: Vec<(usize, PartialPivLu<f64>)>,
}

impl BlockDiagPreconditioner {
    /// Diagonal blocks evaluated directly from the kernel.
    pub fn from_kernel(kernel: &dyn Kernel, coords: &[[f64; 3]], block_size: usize) -> Result<Self, KrylovError> {
        let b = kernel.block_dim();
        let dim = coords.len() * b;
        Self::from_blocks(dim, block_size, |start, len| {
            // blocks may cut through a point's components; evaluate whole points and slice
            let p0 = start / b;
            let p1 = (start + len).div_ceil(b);
            let pts = &coords[p0..p1];
            let full = kernel_block(kernel, pts, pts);
            let off = start - p0 * b;
            full.submatrix(off, off, len, len).to_owned()
        })
    }

    /// Diagonal blocks copied from a dense matrix.
    pub fn from_dense(a: &Mat<f64>, block_size: usize) -> Result<Self, KrylovError> {
        Self::from_blocks(a.nrows(), block_size, |start, len| a.submatrix(start, start, len, len).to_owned())
    }

    fn from_blocks(dim: usize, block_size: usize, block: impl Fn(usize, usize) -> Mat<f64>) -> Result<Self, KrylovError> {
        if block_size == 0 {
            return Err(KrylovError::BlockSize);
        }
        let mut blocks = Vec::new();
        let mut start = 0;
        while start < dim {
            let len = block_size.min(dim - start);
            let lu = block(start, len).partial_piv_lu();
            let mut probe = Mat::<f64>::ones(len, 1);
            lu.solve_in_place(probe.as_mut());
            if (0..len).any(|i| !probe[(i, 0)].is_finite()) {
                return Err(KrylovError::SingularBlock(start));
            }
            blocks.push((start, lu));
            start += len;
        }
        Ok(Self { dim, blocks })
    }
}

impl Operator for BlockDiagPreconditioner {
    fn dim(&self) -> usize {
        self.dim
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        for (start, lu) in &self.blocks {
            let len = lu.nrows();
            let mut seg = crate::dense::col_mut(&mut y[*start..start + len]);
            lu.solve_in_place(seg.as_mut());
        }
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(a: Mat<f64>) -> DenseOperator {
        DenseOperator { a }
    }

    #[test]
    fn identity_converges_in_one_step() {
        let a = dense(Mat::identity(5, 5));
        let b = [1.0, -2.0, 3.0, 0.5, 4.0];
        let (x, t) = gmres(&a, &b, GmresOptions::default(), None, PrecondSide::None).unwrap();
        assert_eq!(t.iterations, 1);
        assert!(t.converged);
        for (xi, bi) in x.iter().zip(&b) {
            assert!((xi - bi).abs() < 1e-14);
        }
    }

    #[test]
    fn two_eigenvalues_two_steps() {
        let a = dense(Mat::from_fn(2, 2, |i, j| if i == j { (i + 1) as f64 } else { 0.0 }));
        let (x, t) = gmres(&a, &[1.0, 1.0], GmresOptions::default(), None, PrecondSide::None).unwrap();
        assert!(t.iterations <= 2);
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn exact_preconditioner_one_step_both_sides() {
        let m = Mat::from_fn(6, 6, |i, j| 1.0 / (1.0 + i as f64 + 2.0 * j as f64) + if i == j { 2.0 } else { 0.0 });
        let p = BlockDiagPreconditioner::from_dense(&m, 6).unwrap();
        let a = dense(m);
        let b = [1.0, 0.0, 2.0, -1.0, 0.5, 3.0];
        for side in [PrecondSide::Left, PrecondSide::Right] {
            let (_, t) = gmres(&a, &b, GmresOptions::default(), Some(&p), side).unwrap();
            assert_eq!(t.iterations, 1, "{side:?}");
            assert!(t.final_residual < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let a = dense(Mat::identity(2, 2));
        assert!(gmres(&a, &[1.0, 1.0], GmresOptions { tol: 0.0, max_iters: 5 }, None, PrecondSide::None).is_err());
        assert!(gmres(&a, &[1.0, 1.0], GmresOptions { tol: 1e-3, max_iters: 0 }, None, PrecondSide::None).is_err());
        assert!(gmres(&a, &[1.0], GmresOptions::default(), None, PrecondSide::None).is_err());
    }

    #[test]
    fn zero_rhs_returns_zero() {
        let a = dense(Mat::identity(3, 3));
        let (x, t) = gmres(&a, &[0.0; 3], GmresOptions::default(), None, PrecondSide::None).unwrap();
        assert!(t.converged && x.iter().all(|v| *v == 0.0));
    }
}
