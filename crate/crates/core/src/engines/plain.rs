use crate::engines::{check_inputs, LowRankFactors};
use crate::error::Result;
use crate::linalg::svd;
use crate::matrix::DenseMatrix;

/// Activation-agnostic baseline: rank-`k` SVD of `W` itself.
pub fn truncate_plain(w: &DenseMatrix, k: usize) -> Result<LowRankFactors> {
    if check_inputs(w, None, k)? {
        return Ok(LowRankFactors::exact(w));
    }
    let s = svd(w)?;
    let a = s.u.take_cols(k).scale_cols(&s.sigma[..k]);
    let b = s.vt.take_rows(k);
    LowRankFactors::new(a, b)
}
