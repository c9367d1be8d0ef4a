//! Loss-optimized truncation through two SVDs and no Cholesky factor.
//!
//! With `X·Xᵀ = U_s·S_s·U_sᵀ`, the map `S = U_s·√S_s` satisfies `S·Sᵀ = X·Xᵀ`
//! and `S⁺·X` has orthonormal rows on the range of `X`. Truncating
//! `D = W·S` and mapping back through `S⁺` therefore attains the
//! Eckart-Young floor of `W·X` exactly.

use alloc::vec::Vec;

use crate::engines::{check_inputs, LowRankFactors};
use crate::error::{Error, Result};
use crate::linalg::{default_pinv_tol, svd, symmetric_part, thresholded_reciprocals};
use crate::matrix::DenseMatrix;

/// Eigenbasis of a Gram matrix with its square-root spectrum and the
/// thresholded reciprocal of that spectrum.
#[derive(Debug, Clone)]
pub struct WhitenedBasis {
    pub u_s: DenseMatrix,
    pub sqrt_s: Vec<f64>,
    pub inv_sqrt_s: Vec<f64>,
}

impl WhitenedBasis {
    /// `tol_rel` thresholds `√S_s` relative to its largest entry; `None`
    /// means `dim · ε`.
    pub fn from_gram(gram: &DenseMatrix, tol_rel: Option<f64>) -> Result<Self> {
        let g = symmetric_part(gram)?;
        let tol = tol_rel.unwrap_or_else(|| default_pinv_tol(g.rows()));
        let s = svd(&g)?;
        let root: Vec<f64> = s.sigma.iter().map(|&v| libm::sqrt(v)).collect();
        let inv_sqrt_s = thresholded_reciprocals(&root, tol).map_err(|_| Error::DegenerateGram)?;
        let sqrt_s = root
            .iter()
            .zip(&inv_sqrt_s)
            .map(|(&v, &i)| if i > 0.0 { v } else { 0.0 })
            .collect();
        Ok(Self {
            u_s: s.u,
            sqrt_s,
            inv_sqrt_s,
        })
    }

    /// `D = W · U_s · diag(√S_s)`.
    pub fn whiten(&self, w: &DenseMatrix) -> Result<DenseMatrix> {
        Ok(w.matmul(&self.u_s)?.scale_cols(&self.sqrt_s))
    }

    /// `M · diag(√S_s)⁺ · U_sᵀ`.
    pub fn unwhiten(&self, m: &DenseMatrix) -> Result<DenseMatrix> {
        m.scale_cols(&self.inv_sqrt_s).matmul_t(&self.u_s)
    }
}

pub fn truncate_double_svd(
    w: &DenseMatrix,
    gram: &DenseMatrix,
    k: usize,
) -> Result<LowRankFactors> {
    truncate_double_svd_with_tol(w, gram, k, None)
}

pub fn truncate_double_svd_with_tol(
    w: &DenseMatrix,
    gram: &DenseMatrix,
    k: usize,
    tol_rel: Option<f64>,
) -> Result<LowRankFactors> {
    if check_inputs(w, Some(gram), k)? {
        return Ok(LowRankFactors::exact(w));
    }
    let basis = WhitenedBasis::from_gram(gram, tol_rel)?;
    let d = basis.whiten(w)?;
    let ws = svd(&d)?;
    let a = ws.u.take_cols(k).scale_cols(&ws.sigma[..k]);
    let b = basis.unwhiten(&ws.vt.take_rows(k))?;
    LowRankFactors::new(a, b)
}
