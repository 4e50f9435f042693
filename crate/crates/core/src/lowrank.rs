//! Low-rank machinery: truncated and randomized SVD, fully pivoted ACA with
//! QR-QR-SVD recompression, threshold rank selection and weighted basis union.

use crate::dense::{frob, mul, scale_cols, thin_q};
use faer::{Mat, MatRef};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LowRankError {
    #[error("SVD did not converge")]
    NoConvergence,
    #[error("weight {index} is not positive ({value})")]
    NonPositiveWeight { index: usize, value: f64 },
    #[error("{what}: expected {expected}, found {found}")]
    Shape { what: &'static str, expected: usize, found: usize },
    #[error("oversampling must be at least 2")]
    Oversample,
}

/// M ≈ U diag(sigma) Vᵀ with orthonormal U, V and non-increasing sigma.
#[derive(Debug, Clone)]
pub struct LowRankFactor {
    pub u: Mat<f64>,
    pub sigma: Vec<f64>,
    pub v: Mat<f64>,
}

impl LowRankFactor {
    pub fn empty(m: usize, n: usize) -> Self {
        Self { u: Mat::zeros(m, 0), sigma: Vec::new(), v: Mat::zeros(n, 0) }
    }

    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn to_dense(&self) -> Mat<f64> {
        mul(scale_cols(self.u.as_ref(), &self.sigma).as_ref(), self.v.transpose())
    }

    fn truncate(mut self, abs_threshold: f64) -> Self {
        let k = self.sigma.iter().take_while(|&&s| s > abs_threshold).count();
        if k < self.sigma.len() {
            self.sigma.truncate(k);
            self.u = self.u.subcols(0, k).to_owned();
            self.v = self.v.subcols(0, k).to_owned();
        }
        self
    }
}

/// Full thin SVD, singular values non-increasing.
pub fn full_svd(m: MatRef<'_, f64>) -> Result<LowRankFactor, LowRankError> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Ok(LowRankFactor::empty(m.nrows(), m.ncols()));
    }
    let svd = m.thin_svd().map_err(|_| LowRankError::NoConvergence)?;
    let s = svd.S().column_vector();
    Ok(LowRankFactor {
        u: svd.U().to_owned(),
        sigma: (0..s.nrows()).map(|i| s[i]).collect(),
        v: svd.V().to_owned(),
    })
}

/// Keeps exactly the singular triplets with sigma > abs_threshold.
pub fn truncated_svd(m: MatRef<'_, f64>, abs_threshold: f64) -> Result<LowRankFactor, LowRankError> {
    Ok(full_svd(m)?.truncate(abs_threshold))
}

/// Matrix-free access to M and Mᵀ.
pub trait LinearOperator {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    fn apply(&self, x: MatRef<'_, f64>) -> Mat<f64>;
    fn apply_transpose(&self, x: MatRef<'_, f64>) -> Mat<f64>;
}

impl LinearOperator for MatRef<'_, f64> {
    fn nrows(&self) -> usize {
        MatRef::nrows(self)
    }
    fn ncols(&self) -> usize {
        MatRef::ncols(self)
    }
    fn apply(&self, x: MatRef<'_, f64>) -> Mat<f64> {
        mul(*self, x)
    }
    fn apply_transpose(&self, x: MatRef<'_, f64>) -> Mat<f64> {
        mul(self.transpose(), x)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RsvdOptions {
    pub oversample: usize,
    pub power_iters: usize,
    /// Rank guess for the first pass; doubled until the tail falls below the threshold.
    pub initial_rank: usize,
    pub seed: u64,
}

impl Default for RsvdOptions {
    fn default() -> Self {
        Self { oversample: 10, power_iters: 2, initial_rank: 8, seed: 0x5eed }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Mat<f64> {
    Mat::from_fn(m, n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Randomized range finder with `ell` samples followed by an SVD of QᵀM.
fn rsvd_pass(op: &dyn LinearOperator, ell: usize, power_iters: usize, rng: &mut ChaCha8Rng) -> Result<LowRankFactor, LowRankError> {
    let omega = gaussian(rng, op.ncols(), ell);
    let mut q = thin_q(op.apply(omega.as_ref()).as_ref());
    for _ in 0..power_iters {
        let z = thin_q(op.apply_transpose(q.as_ref()).as_ref());
        q = thin_q(op.apply(z.as_ref()).as_ref());
    }
    // B = QᵀM, computed as (MᵀQ)ᵀ
    let bt = op.apply_transpose(q.as_ref());
    let f = full_svd(bt.as_ref())?;
    // Bᵀ = W S Zᵀ  =>  M ≈ Q Z S Wᵀ
    Ok(LowRankFactor { u: mul(q.as_ref(), f.v.as_ref()), sigma: f.sigma, v: f.u })
}

/// Adaptive randomized SVD keeping the triplets above `abs_threshold`.
pub fn randomized_svd(op: &dyn LinearOperator, abs_threshold: f64, opts: &RsvdOptions) -> Result<LowRankFactor, LowRankError> {
    if opts.oversample < 2 {
        return Err(LowRankError::Oversample);
    }
    let (m, n) = (op.nrows(), op.ncols());
    let full = m.min(n);
    if full == 0 {
        return Ok(LowRankFactor::empty(m, n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut k = opts.initial_rank.max(1);
    loop {
        let ell = (k + opts.oversample).min(full);
        let f = rsvd_pass(op, ell, opts.power_iters, &mut rng)?;
        let resolved = f.sigma.last().is_none_or(|&s| s <= abs_threshold);
        if resolved || ell == full {
            return Ok(f.truncate(abs_threshold));
        }
        k *= 2;
    }
}

/// The `k` leading singular values from a single randomized pass.
pub fn leading_singular_values(op: &dyn LinearOperator, k: usize, opts: &RsvdOptions) -> Result<Vec<f64>, LowRankError> {
    if opts.oversample < 2 {
        return Err(LowRankError::Oversample);
    }
    let full = op.nrows().min(op.ncols());
    if full == 0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let f = rsvd_pass(op, (k + opts.oversample).min(full), opts.power_iters, &mut rng)?;
    Ok(f.sigma.into_iter().take(k).collect())
}

/// Fully pivoted cross approximation, stopped once the Frobenius norm of the
/// residual is at most `abs_threshold`, then recompressed by two thin QRs and
/// an SVD of the product of their triangular factors.
pub fn aca_svd(m: MatRef<'_, f64>, abs_threshold: f64) -> Result<LowRankFactor, LowRankError> {
    let (nr, nc) = (m.nrows(), m.ncols());
    if nr == 0 || nc == 0 {
        return Ok(LowRankFactor::empty(nr, nc));
    }
    let mut res = m.to_owned();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let tol2 = abs_threshold * abs_threshold;
    while cols.len() < nr.min(nc) {
        let mut best = (0usize, 0usize, 0.0f64);
        let mut norm2 = 0.0;
        for j in 0..nc {
            for i in 0..nr {
                let v = res[(i, j)];
                norm2 += v * v;
                if v.abs() > best.2 {
                    best = (i, j, v.abs());
                }
            }
        }
        if norm2 <= tol2 || best.2 == 0.0 {
            break;
        }
        let (pi, pj) = (best.0, best.1);
        let pivot = res[(pi, pj)];
        let c: Vec<f64> = (0..nr).map(|i| res[(i, pj)]).collect();
        let r: Vec<f64> = (0..nc).map(|j| res[(pi, j)] / pivot).collect();
        for j in 0..nc {
            let rj = r[j];
            if rj != 0.0 {
                for i in 0..nr {
                    res[(i, j)] -= c[i] * rj;
                }
            }
        }
        cols.push(c);
        rows.push(r);
    }
    let k = cols.len();
    if k == 0 {
        return Ok(LowRankFactor::empty(nr, nc));
    }
    let cm = Mat::from_fn(nr, k, |i, j| cols[j][i]);
    let rt = Mat::from_fn(nc, k, |i, j| rows[j][i]);
    let q1 = cm.qr();
    let q2 = rt.qr();
    let core = mul(q1.thin_R(), q2.thin_R().transpose());
    let f = full_svd(core.as_ref())?;
    Ok(LowRankFactor {
        u: mul(q1.compute_thin_Q().as_ref(), f.u.as_ref()),
        sigma: f.sigma,
        v: mul(q2.compute_thin_Q().as_ref(), f.v.as_ref()),
    }
    .truncate(abs_threshold))
}

/// min{k : sigma_{k+1} <= epsilon * sigma0_ref}, capped at the list length.
pub fn rank_from_reference(sigmas: &[f64], epsilon: f64, sigma0_ref: f64) -> usize {
    let cut = epsilon * sigma0_ref;
    sigmas.iter().position(|&s| s <= cut).unwrap_or(sigmas.len())
}

/// New weighted basis replacing an old one after absorbing fill-in directions.
#[derive(Debug, Clone)]
pub struct BasisUpdate {
    pub new_basis: Mat<f64>,
    pub weights: Vec<f64>,
    /// old_basis ≈ new_basis * old_map
    pub old_map: Mat<f64>,
    /// fill_basis ≈ new_basis * fill_map
    pub fill_map: Mat<f64>,
}

impl BasisUpdate {
    pub fn rank(&self) -> usize {
        self.weights.len()
    }
}

/// Orthonormal basis and weights of the column space of `scaled` (columns
/// already multiplied by their weights), truncated at `abs_threshold`.
pub(crate) fn union_basis(scaled: MatRef<'_, f64>, abs_threshold: f64) -> Result<(Mat<f64>, Vec<f64>), LowRankError> {
    let (n, c) = (scaled.nrows(), scaled.ncols());
    if n == 0 || c == 0 {
        return Ok((Mat::zeros(n, 0), Vec::new()));
    }
    // a wide matrix has the same left singular pairs as Rᵀ from the QR of its transpose
    let f = if c > n {
        let r = scaled.transpose().qr().thin_R().to_owned();
        aca_svd(r.transpose(), abs_threshold)?
    } else {
        aca_svd(scaled, abs_threshold)?
    };
    Ok((f.u, f.sigma))
}

/// Recompresses [old diag(w_old) | fill diag(w_fill)] ≈ Û Σ̂ Φ and returns
/// Û, Σ̂ and the maps expressing both inputs in the new basis.
pub fn weighted_basis_union(
    old_basis: MatRef<'_, f64>,
    old_weights: &[f64],
    fill_basis: MatRef<'_, f64>,
    fill_weights: &[f64],
    abs_threshold: f64,
) -> Result<BasisUpdate, LowRankError> {
    check_weights(old_basis, old_weights)?;
    check_weights(fill_basis, fill_weights)?;
    if fill_basis.nrows() != old_basis.nrows() {
        return Err(LowRankError::Shape { what: "fill basis rows", expected: old_basis.nrows(), found: fill_basis.nrows() });
    }
    let n = old_basis.nrows();
    let scaled = crate::dense::hcat(
        &[scale_cols(old_basis, old_weights).as_ref(), scale_cols(fill_basis, fill_weights).as_ref()],
        n,
    );
    let (new_basis, weights) = union_basis(scaled.as_ref(), abs_threshold)?;
    // projections coincide with Σ̂ φ Σ⁻¹ when Û holds exact singular vectors
    let old_map = mul(new_basis.transpose(), old_basis);
    let fill_map = mul(new_basis.transpose(), fill_basis);
    Ok(BasisUpdate { new_basis, weights, old_map, fill_map })
}

fn check_weights(basis: MatRef<'_, f64>, weights: &[f64]) -> Result<(), LowRankError> {
    if basis.ncols() != weights.len() {
        return Err(LowRankError::Shape { what: "weights", expected: basis.ncols(), found: weights.len() });
    }
    if let Some((index, &value)) = weights.iter().enumerate().find(|(_, &w)| w.is_nan() || w <= 0.0) {
        return Err(LowRankError::NonPositiveWeight { index, value });
    }
    Ok(())
}

/// Spectral norm of M - UΣVᵀ, for tests and diagnostics.
pub fn reconstruction_error(m: MatRef<'_, f64>, f: &LowRankFactor) -> f64 {
    let mut d = m.to_owned();
    d -= f.to_dense();
    if d.nrows() == 0 || d.ncols() == 0 || frob(d.as_ref()) == 0.0 {
        return 0.0;
    }
    d.singular_values().map(|s| s[0]).unwrap_or(f64::NAN)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::orthonormality_defect;

    fn random(m: usize, n: usize, seed: u64) -> Mat<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        gaussian(&mut rng, m, n)
    }

    #[test]
    fn identity_keeps_everything() {
        let f = truncated_svd(Mat::<f64>::identity(3, 3).as_ref(), 0.0).unwrap();
        assert_eq!(f.rank(), 3);
        assert!(f.sigma.iter().all(|&s| (s - 1.0).abs() < 1e-14));
    }

    #[test]
    fn rank_one_outer_product() {
        let u = [0.6, 0.8, 0.0];
        let v = [0.0, 1.0];
        let m = Mat::from_fn(3, 2, |i, j| u[i] * v[j]);
        let f = truncated_svd(m.as_ref(), 1e-12).unwrap();
        assert_eq!(f.rank(), 1);
        assert!((f.sigma[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn zero_matrix_has_rank_zero() {
        let z = Mat::<f64>::zeros(4, 5);
        assert_eq!(truncated_svd(z.as_ref(), 0.0).unwrap().rank(), 0);
        assert_eq!(aca_svd(z.as_ref(), 0.0).unwrap().rank(), 0);
        assert_eq!(randomized_svd(&z.as_ref(), 0.0, &RsvdOptions::default()).unwrap().rank(), 0);
    }

    #[test]
    fn rsvd_diagonal_leading_value() {
        let d = [10.0, 1.0, 0.1, 0.01, 0.001];
        let m = Mat::from_fn(40, 40, |i, j| if i == j && i < d.len() { d[i] } else { 0.0 });
        let f = randomized_svd(&m.as_ref(), 1e-6, &RsvdOptions::default()).unwrap();
        assert!(f.sigma[0] >= 9.0 && f.sigma[0] <= 10.1);
    }

    #[test]
    fn rsvd_recovers_rank_five() {
        let m = mul(random(30, 5, 1).as_ref(), random(5, 30, 2).as_ref());
        let exact = truncated_svd(m.as_ref(), 0.0).unwrap();
        let f = randomized_svd(&m.as_ref(), exact.sigma[4] * 1e-3, &RsvdOptions { initial_rank: 2, ..Default::default() }).unwrap();
        assert_eq!(f.rank(), 5);
        let err = frob((m.clone() - f.to_dense()).as_ref()) / frob(m.as_ref());
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn aca_rank_two_and_identity() {
        let m = mul(random(12, 2, 3).as_ref(), random(2, 9, 4).as_ref());
        assert_eq!(aca_svd(m.as_ref(), 1e-14).unwrap().rank(), 2);
        assert_eq!(aca_svd(Mat::<f64>::identity(4, 4).as_ref(), 0.5).unwrap().rank(), 4);
    }

    #[test]
    fn aca_tracks_truncated_svd() {
        let m = random(50, 40, 5);
        for &tau in &[0.5, 2.0, 5.0, 10.0] {
            let a = aca_svd(m.as_ref(), tau).unwrap();
            let s = truncated_svd(m.as_ref(), tau).unwrap();
            assert!(a.rank().abs_diff(s.rank()) <= 1, "tau {tau}: {} vs {}", a.rank(), s.rank());
            let ea = reconstruction_error(m.as_ref(), &a);
            assert!(ea <= 10.0 * tau);
            assert!(orthonormality_defect(a.u.as_ref()) < 1e-12);
        }
    }

    #[test]
    fn rank_from_reference_examples() {
        assert_eq!(rank_from_reference(&[10.0, 1.0, 1e-4], 1e-3, 10.0), 2);
        assert_eq!(rank_from_reference(&[10.0], 1e-3, 10.0), 1);
        assert_eq!(rank_from_reference(&[1e-3, 1e-4], 1e-3, 10.0), 0);
    }

    #[test]
    fn union_of_same_subspace() {
        let q = thin_q(random(10, 3, 6).as_ref());
        let rot = thin_q(random(3, 3, 7).as_ref());
        let fill = mul(q.as_ref(), rot.as_ref());
        let up = weighted_basis_union(q.as_ref(), &[3.0, 2.0, 1.0], fill.as_ref(), &[0.1, 0.1, 0.1], 1e-10).unwrap();
        assert_eq!(up.rank(), 3);
        let back = mul(up.new_basis.as_ref(), up.old_map.as_ref());
        assert!(frob((back - &q).as_ref()) < 1e-10);
    }

    #[test]
    fn union_of_orthogonal_subspaces() {
        let q = thin_q(random(10, 5, 8).as_ref());
        let a = q.subcols(0, 2).to_owned();
        let b = q.subcols(2, 3).to_owned();
        let up = weighted_basis_union(a.as_ref(), &[1.0, 1.0], b.as_ref(), &[1.0, 1.0, 1.0], 0.1).unwrap();
        assert_eq!(up.rank(), 5);
    }

    #[test]
    fn union_rejects_bad_weights() {
        let q = Mat::<f64>::identity(3, 1);
        let err = weighted_basis_union(q.as_ref(), &[0.0], q.as_ref(), &[1.0], 0.0).unwrap_err();
        assert_eq!(err, LowRankError::NonPositiveWeight { index: 0, value: 0.0 });
    }
}
