//! One-sided (Hestenes) Jacobi SVD.
//!
//! Deterministic and accurate to high relative precision for small dense
//! matrices, which is what every engine in this crate feeds it. No
//! randomization; the same input always yields bit-identical factors.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::{dot, norm2, DenseMatrix};

const MAX_SWEEPS: usize = 80;

/// Thin SVD `m = u · diag(sigma) · vt` with `r = min(rows, cols)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    /// `m × r`, orthonormal columns.
    pub u: DenseMatrix,
    /// Non-increasing, non-negative.
    pub sigma: Vec<f64>,
    /// `r × n`, orthonormal rows.
    pub vt: DenseMatrix,
}

impl SvdResult {
    pub fn rank_cap(&self) -> usize {
        self.sigma.len()
    }

    /// `u · diag(sigma) · vt`.
    pub fn reconstruct(&self) -> DenseMatrix {
        self.u
            .scale_cols(&self.sigma)
            .matmul(&self.vt)
            .expect("svd factors compose")
    }

    /// Frobenius mass of the singular values past index `k`.
    pub fn tail_norm(&self, k: usize) -> f64 {
        if k >= self.sigma.len() {
            return 0.0;
        }
        norm2(&self.sigma[k..])
    }
}

pub fn svd(m: &DenseMatrix) -> Result<SvdResult> {
    if !m.is_finite() {
        return Err(Error::NonFinite);
    }
    let (rows, cols) = m.shape();
    if rows >= cols {
        let (u, sigma, v) = jacobi_tall(m)?;
        Ok(SvdResult {
            u,
            sigma,
            vt: v.transpose(),
        })
    } else {
        // m = (mᵀ)ᵀ = (U Σ Vᵀ)ᵀ = V Σ Uᵀ
        let (u, sigma, v) = jacobi_tall(&m.transpose())?;
        Ok(SvdResult {
            u: v,
            sigma,
            vt: u.transpose(),
        })
    }
}

/// SVD of a matrix with `rows >= cols`. Returns `(U m×n, σ, V n×n)`.
fn jacobi_tall(m: &DenseMatrix) -> Result<(DenseMatrix, Vec<f64>, DenseMatrix)> {
    let (rows, n) = m.shape();
    // Columns of the working matrix and of V, stored contiguously.
    let mut a: Vec<Vec<f64>> = (0..n).map(|j| m.col(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let tol = f64::EPSILON * rows as f64;
    let mut converged = n == 1;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if alpha == 0.0 || beta == 0.0 || gamma == 0.0 {
                    continue;
                }
                if gamma.abs() <= tol * libm::sqrt(alpha) * libm::sqrt(beta) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = libm::copysign(1.0, zeta) / (zeta.abs() + libm::hypot(1.0, zeta));
                let c = 1.0 / libm::hypot(1.0, t);
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::ConvergenceFailure { sweeps: MAX_SWEEPS });
    }

    let norms: Vec<f64> = a.iter().map(|col| norm2(col)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable: equal singular values keep their input order.
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        if norms[j] > f64::MIN_POSITIVE {
            u_cols.push(a[j].iter().map(|x| x / norms[j]).collect());
        } else {
            u_cols.push(vec![0.0; rows]);
            missing.push(slot);
        }
    }
    complete_orthonormal(&mut u_cols, &missing, rows);

    let u = DenseMatrix::from_fn(rows, n, |i, j| u_cols[j][i]);
    let vmat = DenseMatrix::from_fn(n, n, |i, j| v[order[j]][i]);
    Ok((u, sigma, vmat))
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fills the columns listed in `missing` with unit vectors orthogonal to all
/// other columns: two-pass Gram-Schmidt over the standard basis, keeping the
/// candidate with the largest residual.
fn complete_orthonormal(cols: &mut [Vec<f64>], missing: &[usize], dim: usize) {
    for &slot in missing {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for candidate in 0..dim {
            let mut e = vec![0.0; dim];
            e[candidate] = 1.0;
            for _ in 0..2 {
                for (k, col) in cols.iter().enumerate() {
                    if k == slot || col.iter().all(|&x| x == 0.0) {
                        continue;
                    }
                    let proj = dot(&e, col);
                    for (ei, ci) in e.iter_mut().zip(col) {
                        *ei -= proj * ci;
                    }
                }
            }
            let nrm = norm2(&e);
            if best.as_ref().is_none_or(|(b, _)| nrm > *b) {
                best = Some((nrm, e));
            }
        }
        let (nrm, e) = best.expect("dimension is positive");
        cols[slot] = e.iter().map(|x| x / nrm).collect();
    }
}
