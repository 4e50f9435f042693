//! Dense reference oracle for small problems.

use crate::dense::{col, mul, to_vec};
use crate::kernel::{kernel_block, Kernel};
use faer::linalg::solvers::Solve;
use faer::{Mat, MatRef, Side};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const DEFAULT_DENSE_CAP: usize = 6000;

#[derive(Debug, Error)]
pub enum RefError {
    #[error("dense problem of {0} unknowns exceeds the cap {1}")]
    TooLarge(usize, usize),
    #[error("matrix is singular")]
    Singular,
    #[error("eigen or singular value decomposition did not converge")]
    NoConvergence,
    #[error("vector has length {found}, expected {expected}")]
    Dimension { expected: usize, found: usize },
}

pub struct DenseProblem {
    pub a: Mat<f64>,
    pub x_true: Vec<f64>,
    pub b: Vec<f64>,
}

/// Exact kernel matrix with b = A x_true for x_true uniform in [-1, 1].
pub fn assemble_dense(coords: &[[f64; 3]], kernel: &dyn Kernel, seed: u64, cap: usize) -> Result<DenseProblem, RefError> {
    let n = coords.len() * kernel.block_dim();
    if n > cap {
        return Err(RefError::TooLarge(n, cap));
    }
    let a = kernel_block(kernel, coords, coords);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x_true: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let b = to_vec(mul(a.as_ref(), col(&x_true)).as_ref());
    Ok(DenseProblem { a, x_true, b })
}

pub fn dense_solve(a: MatRef<'_, f64>, b: &[f64]) -> Result<Vec<f64>, RefError> {
    if b.len() != a.nrows() {
        return Err(RefError::Dimension { expected: a.nrows(), found: b.len() });
    }
    let lu = a.partial_piv_lu();
    let mut x = Mat::from_fn(b.len(), 1, |i, _| b[i]);
    lu.solve_in_place(x.as_mut());
    let x = to_vec(x.as_ref());
    if x.iter().any(|v| !v.is_finite()) {
        return Err(RefError::Singular);
    }
    Ok(x)
}

/// 2-norm condition number σ_max / σ_min.
pub fn dense_cond(a: MatRef<'_, f64>) -> Result<f64, RefError> {
    let s = a.singular_values().map_err(|_| RefError::NoConvergence)?;
    let max = s.iter().copied().fold(0.0, f64::max);
    let min = s.iter().copied().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(max / min)
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn dense_eigs_symmetric(a: MatRef<'_, f64>) -> Result<Vec<f64>, RefError> {
    let mut e = a.self_adjoint_eigenvalues(Side::Lower).map_err(|_| RefError::NoConvergence)?;
    e.sort_by(f64::total_cmp);
    Ok(e)
}

/// Eigenvalues of a general matrix as (re, im) pairs.
pub fn dense_eigs(a: MatRef<'_, f64>) -> Result<Vec<(f64, f64)>, RefError> {
    let e = a.eigenvalues().map_err(|_| RefError::NoConvergence)?;
    Ok(e.iter().map(|z| (z.re, z.im)).collect())
}

/// Fraction of eigenvalues with |λ - 1| < radius.
pub fn clustered_fraction(eigs: &[(f64, f64)], radius: f64) -> f64 {
    if eigs.is_empty() {
        return 0.0;
    }
    let hit = eigs.iter().filter(|(re, im)| (re - 1.0).hypot(*im) < radius).count();
    hit as f64 / eigs.len() as f64
}

pub fn relative_error(x: &[f64], reference: &[f64]) -> f64 {
    let num: f64 = x.iter().zip(reference).map(|(a, b)| (a - b).powi(2)).sum();
    let den: f64 = reference.iter().map(|b| b * b).sum();
    (num / den).sqrt()
}
