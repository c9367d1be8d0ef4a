//! Dense kernels shared by every engine.

mod budget;
mod cholesky;
mod svd;

pub use budget::{rank_for_ratio, RankBudget};
pub use cholesky::{cholesky, solve_lower, solve_lower_transposed, symmetric_part, SYMMETRY_TOL};
pub use svd::{svd, SvdResult};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

/// Default relative threshold for treating a singular value as zero: the
/// dimension times machine epsilon.
pub fn default_pinv_tol(dim: usize) -> f64 {
    dim as f64 * f64::EPSILON
}

/// Indicator of which singular values survive `σ_i > tol_rel · σ_max`,
/// together with their reciprocals (zero for annihilated directions).
pub fn thresholded_reciprocals(sigma: &[f64], tol_rel: f64) -> Result<alloc::vec::Vec<f64>> {
    let smax = sigma.first().copied().unwrap_or(0.0);
    if !(smax > 0.0) {
        return Err(Error::AllSingular);
    }
    let cut = tol_rel * smax;
    Ok(sigma
        .iter()
        .map(|&s| if s > cut { 1.0 / s } else { 0.0 })
        .collect())
}

/// Moore-Penrose style inverse `V · Σ⁺ · Uᵀ` from an existing SVD, inverting
/// only singular values above `tol_rel · σ_max`.
pub fn pseudo_inverse_factors(svd: &SvdResult, tol_rel: f64) -> Result<DenseMatrix> {
    let inv = thresholded_reciprocals(&svd.sigma, tol_rel)?;
    // (Σ⁺ Uᵀ) is r×m; V = vtᵀ.
    let sigma_ut = svd.u.transpose().scale_rows(&inv);
    svd.vt.t_matmul(&sigma_ut)
}
