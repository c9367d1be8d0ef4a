use crate::engines::double_svd::WhitenedBasis;
use crate::engines::LowRankFactors;
use crate::error::{Error, Result};
use crate::linalg::svd;
use crate::matrix::DenseMatrix;

/// Eckart-Young floor for `‖W·X − W′·X‖_F` over all rank-`k` `W′`: the tail
/// Frobenius mass of the spectrum of `W·X`.
pub fn theoretical_min_loss(w: &DenseMatrix, x: &DenseMatrix, k: usize) -> Result<f64> {
    if w.cols() != x.rows() {
        return Err(Error::DimensionMismatch {
            context: "theoretical_min_loss",
            expected: w.cols(),
            found: x.rows(),
        });
    }
    if k == 0 {
        return Err(Error::InvalidRank {
            rank: 0,
            max: w.rows().min(x.cols()),
        });
    }
    let wx = w.matmul(x)?;
    Ok(svd(&wx)?.tail_norm(k))
}

/// Truncation loss measured on explicit activations.
pub fn activation_loss(w: &DenseMatrix, factors: &LowRankFactors, x: &DenseMatrix) -> Result<f64> {
    let wx = w.matmul(x)?;
    let abx = factors.a().matmul(&factors.b().matmul(x)?)?;
    Ok(wx.sub(&abx)?.frobenius_norm())
}

/// Truncation loss through the Gram: `sqrt(trace((W − AB)·G·(W − AB)ᵀ))`.
pub fn gram_loss(w: &DenseMatrix, factors: &LowRankFactors, gram: &DenseMatrix) -> Result<f64> {
    let r = w.sub(&factors.product())?;
    let rg = r.matmul(gram)?;
    let sq: f64 = rg
        .as_slice()
        .iter()
        .zip(r.as_slice())
        .map(|(a, b)| a * b)
        .sum();
    Ok(libm::sqrt(sq.max(0.0)))
}

/// Gram-only form of [`theoretical_min_loss`]: the tail of the spectrum of
/// `W·U_s·√S_s`, which shares its singular values with `W·X`.
pub fn gram_min_loss(w: &DenseMatrix, gram: &DenseMatrix, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidRank {
            rank: 0,
            max: w.rows().min(w.cols()),
        });
    }
    let basis = WhitenedBasis::from_gram(gram, None)?;
    let d = basis.whiten(w)?;
    Ok(svd(&d)?.tail_norm(k))
}
