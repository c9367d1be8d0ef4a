//! Cholesky-whitened truncation, the baseline that needs a positive-definite
//! Gram.

use crate::engines::{check_inputs, LowRankFactors};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, solve_lower_transposed, svd, symmetric_part};
use crate::matrix::DenseMatrix;

#[derive(Debug, Clone)]
pub struct CholeskyTruncation {
    pub factors: LowRankFactors,
    /// The first factorization failed and the jittered Gram was used.
    pub jittered: bool,
}

/// Whitens with `S = chol(G)`, truncates `W·S` and maps back with `S⁻¹`.
///
/// On a non-positive pivot the factorization is retried once on
/// `G + jitter · trace(G)/d · I` when `jitter > 0`; otherwise, or if the retry
/// also fails, [`Error::NotPositiveDefinite`] is returned.
pub fn truncate_cholesky(
    w: &DenseMatrix,
    gram: &DenseMatrix,
    k: usize,
    jitter: f64,
) -> Result<CholeskyTruncation> {
    if !(jitter >= 0.0) {
        return Err(Error::InvalidParameter("jitter must be non-negative"));
    }
    let full = check_inputs(w, Some(gram), k)?;
    let g = symmetric_part(gram)?;
    let (s, jittered) = match cholesky(&g) {
        Ok(s) => (s, false),
        Err(Error::NotPositiveDefinite { pivot }) => {
            if jitter == 0.0 {
                return Err(Error::NotPositiveDefinite { pivot });
            }
            let d = g.rows();
            let shift = jitter * g.trace() / d as f64;
            let mut shifted = g.clone();
            for i in 0..d {
                shifted[(i, i)] += shift;
            }
            (cholesky(&shifted)?, true)
        }
        Err(e) => return Err(e),
    };
    if full {
        return Ok(CholeskyTruncation {
            factors: LowRankFactors::exact(w),
            jittered,
        });
    }
    let ws = w.matmul(&s)?;
    let dec = svd(&ws)?;
    let a = dec.u.take_cols(k).scale_cols(&dec.sigma[..k]);
    // b = V_kᵀ · S⁻¹  ⇔  Sᵀ · bᵀ = V_k
    let b = solve_lower_transposed(&s, &dec.vt.take_rows(k).transpose())?.transpose();
    if !b.is_finite() {
        return Err(Error::NotPositiveDefinite {
            pivot: s.rows() - 1,
        });
    }
    Ok(CholeskyTruncation {
        factors: LowRankFactors::new(a, b)?,
        jittered,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::{generate_calibration, SampleDistribution};
    use crate::engines::{activation_loss, gram_loss, theoretical_min_loss, truncate_plain};
    use crate::synth::spectral_activations;

    #[test]
    fn identity_gram_matches_plain() {
        let w = generate_calibration(1, 5, 5, SampleDistribution::Gaussian).unwrap();
        let eye = DenseMatrix::identity(5);
        for k in 1..5 {
            let c = truncate_cholesky(&w, &eye, k, 0.0).unwrap();
            assert!(!c.jittered);
            let lc = gram_loss(&w, &c.factors, &eye).unwrap();
            let lp = gram_loss(&w, &truncate_plain(&w, k).unwrap(), &eye).unwrap();
            assert!((lc - lp).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_gram_fails_without_jitter() {
        let w = generate_calibration(2, 4, 4, SampleDistribution::Gaussian).unwrap();
        let x = generate_calibration(3, 16, 4, SampleDistribution::LowRank(1)).unwrap();
        let g = x.matmul_t(&x).unwrap();
        assert!(matches!(
            truncate_cholesky(&w, &g, 2, 0.0),
            Err(Error::NotPositiveDefinite { .. })
        ));
        let retry = truncate_cholesky(&w, &g, 2, 1e-6).unwrap();
        assert!(retry.jittered);
    }

    #[test]
    fn well_conditioned_reaches_oracle() {
        let w = generate_calibration(4, 8, 8, SampleDistribution::Gaussian).unwrap();
        let x = spectral_activations(5, 8, 32, 1e3, 0).unwrap();
        let g = x.matmul_t(&x).unwrap();
        let c = truncate_cholesky(&w, &g, 4, 0.0).unwrap();
        let got = activation_loss(&w, &c.factors, &x).unwrap();
        let want = theoretical_min_loss(&w, &x, 4).unwrap();
        assert!((got - want).abs() <= 1e-6 * want, "{got} vs {want}");
    }

    #[test]
    fn negative_jitter_rejected() {
        let w = DenseMatrix::identity(2);
        assert!(truncate_cholesky(&w, &w, 1, -1.0).is_err());
    }
}
