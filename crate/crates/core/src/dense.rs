//! Small dense helpers shared by the solver modules.

use faer::linalg::solvers::DenseSolveCore;
use faer::{Accum, Mat, MatMut, MatRef, Par};

pub fn col(v: &[f64]) -> MatRef<'_, f64> {
    MatRef::from_column_major_slice(v, v.len(), 1)
}

pub fn col_mut(v: &mut [f64]) -> MatMut<'_, f64> {
    let n = v.len();
    MatMut::from_column_major_slice_mut(v, n, 1)
}

pub fn to_vec(m: MatRef<'_, f64>) -> Vec<f64> {
    debug_assert_eq!(m.ncols(), 1);
    (0..m.nrows()).map(|i| m[(i, 0)]).collect()
}

/// dst += alpha * lhs * rhs
pub fn gemm_acc(dst: MatMut<'_, f64>, lhs: MatRef<'_, f64>, rhs: MatRef<'_, f64>, alpha: f64) {
    if lhs.ncols() == 0 || dst.nrows() == 0 || dst.ncols() == 0 {
        return;
    }
    faer::linalg::matmul::matmul(dst, Accum::Add, lhs, rhs, alpha, Par::Seq);
}

pub fn mul(lhs: MatRef<'_, f64>, rhs: MatRef<'_, f64>) -> Mat<f64> {
    let mut out = Mat::zeros(lhs.nrows(), rhs.ncols());
    gemm_acc(out.as_mut(), lhs, rhs, 1.0);
    out
}

pub fn frob(m: MatRef<'_, f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        0.0
    } else {
        m.norm_l2()
    }
}

/// Copy of `m` with column j scaled by `w[j]`.
pub fn scale_cols(m: MatRef<'_, f64>, w: &[f64]) -> Mat<f64> {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] * w[j])
}

/// Horizontal concatenation.
pub fn hcat(parts: &[MatRef<'_, f64>], nrows: usize) -> Mat<f64> {
    let ncols = parts.iter().map(|p| p.ncols()).sum();
    let mut out = Mat::zeros(nrows, ncols);
    let mut c = 0;
    for p in parts {
        debug_assert_eq!(p.nrows(), nrows);
        out.as_mut().submatrix_mut(0, c, nrows, p.ncols()).copy_from(p);
        c += p.ncols();
    }
    out
}

/// Vertical concatenation.
pub fn vcat(parts: &[MatRef<'_, f64>], ncols: usize) -> Mat<f64> {
    let nrows = parts.iter().map(|p| p.nrows()).sum();
    let mut out = Mat::zeros(nrows, ncols);
    let mut r = 0;
    for p in parts {
        debug_assert_eq!(p.ncols(), ncols);
        out.as_mut().submatrix_mut(r, 0, p.nrows(), ncols).copy_from(p);
        r += p.nrows();
    }
    out
}

/// Orthonormal basis of the column space via thin QR (columns = min(m, n)).
pub fn thin_q(m: MatRef<'_, f64>) -> Mat<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Mat::zeros(m.nrows(), 0);
    }
    m.qr().compute_thin_Q()
}

/// Extends the orthonormal columns of `q` to `k` orthonormal columns.
/// Requires k <= q.nrows().
pub fn pad_orthonormal(q: MatRef<'_, f64>, k: usize) -> Mat<f64> {
    let n = q.nrows();
    assert!(k <= n, "cannot pad {} rows to {} orthonormal columns", n, k);
    let mut out = Mat::zeros(n, k);
    let r0 = q.ncols().min(k);
    out.as_mut().submatrix_mut(0, 0, n, r0).copy_from(q.submatrix(0, 0, n, r0));
    let mut filled = r0;
    // Gram-Schmidt on coordinate vectors, taking the least covered ones first
    let mut cover: Vec<(f64, usize)> = (0..n)
        .map(|i| {
            let s: f64 = (0..r0).map(|j| q[(i, j)] * q[(i, j)]).sum();
            (s, i)
        })
        .collect();
    cover.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    for &(_, i) in &cover {
        if filled == k {
            break;
        }
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        for _ in 0..2 {
            for j in 0..filled {
                let dot: f64 = (0..n).map(|t| out[(t, j)] * v[t]).sum();
                for t in 0..n {
                    v[t] -= dot * out[(t, j)];
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            for t in 0..n {
                out[(t, filled)] = v[t] / norm;
            }
            filled += 1;
        }
    }
    assert_eq!(filled, k, "failed to complete orthonormal basis");
    out
}

/// Pads a map with zero rows so it has `k` rows.
pub fn pad_rows(m: MatRef<'_, f64>, k: usize) -> Mat<f64> {
    let mut out = Mat::zeros(k, m.ncols());
    out.as_mut().submatrix_mut(0, 0, m.nrows(), m.ncols()).copy_from(m);
    out
}

/// Largest absolute deviation of QᵀQ from the identity.
pub fn orthonormality_defect(q: MatRef<'_, f64>) -> f64 {
    let g = mul(q.transpose(), q);
    let mut worst: f64 = 0.0;
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            let e = g[(i, j)] - if i == j { 1.0 } else { 0.0 };
            worst = worst.max(e.abs());
        }
    }
    worst
}

/// Solves A x = b with a throwaway LU; used by oracles and small systems.
pub fn lu_solve(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> Mat<f64> {
    use faer::linalg::solvers::Solve;
    let lu = a.partial_piv_lu();
    let mut x = b.to_owned();
    lu.solve_in_place(x.as_mut());
    x
}

/// Dense inverse via LU; only for small blocks in tests and oracles.
pub fn inverse(a: MatRef<'_, f64>) -> Mat<f64> {
    a.partial_piv_lu().inverse()
}
