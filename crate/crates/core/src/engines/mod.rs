//! Truncation engines and the minimum-loss oracle they are judged against.
//!
//! Every engine turns a weight `W` (`m × n`) and the Gram `X·Xᵀ` of its input
//! activations into a rank-`k` pair `A·B`. Losses are always measured through
//! the activations: `‖W·X − A·B·X‖_F`.

mod admm;
mod cholesky;
mod double_svd;
mod oracle;
mod plain;
mod refine;
mod report;

pub use admm::{truncate_admm_noise, AdmmOutcome, AdmmParams};
pub use cholesky::{truncate_cholesky, CholeskyTruncation};
pub use double_svd::{truncate_double_svd, truncate_double_svd_with_tol, WhitenedBasis};
pub use oracle::{activation_loss, gram_loss, gram_min_loss, theoretical_min_loss};
pub use plain::truncate_plain;
pub use refine::{gradient_check, refine_lbfgs, refinement_objective, LbfgsParams, RefineOutcome};
pub use report::{gram_condition, EngineKind, SiteStatus, TruncationReport, DIV_EPS};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

/// Compressed weight `W′ = a · b`, stored factored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankFactors {
    a: DenseMatrix,
    b: DenseMatrix,
}

impl LowRankFactors {
    pub fn new(a: DenseMatrix, b: DenseMatrix) -> Result<Self> {
        if a.cols() != b.rows() {
            return Err(Error::DimensionMismatch {
                context: "factor inner dimension",
                expected: a.cols(),
                found: b.rows(),
            });
        }
        let k = a.cols();
        let max = a.rows().min(b.cols());
        if k > max {
            return Err(Error::InvalidRank { rank: k, max });
        }
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::NonFinite);
        }
        Ok(Self { a, b })
    }

    /// Exact factorization of `w` at rank `min(m, n)`.
    pub fn exact(w: &DenseMatrix) -> Self {
        let (m, n) = w.shape();
        if n <= m {
            Self {
                a: w.clone(),
                b: DenseMatrix::identity(n),
            }
        } else {
            Self {
                a: DenseMatrix::identity(m),
                b: w.clone(),
            }
        }
    }

    pub fn a(&self) -> &DenseMatrix {
        &self.a
    }

    pub fn b(&self) -> &DenseMatrix {
        &self.b
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn rows(&self) -> usize {
        self.a.rows()
    }

    pub fn cols(&self) -> usize {
        self.b.cols()
    }

    pub fn param_count(&self) -> usize {
        self.rank() * (self.rows() + self.cols())
    }

    pub fn into_parts(self) -> (DenseMatrix, DenseMatrix) {
        (self.a, self.b)
    }

    /// `a · b`; evaluation only.
    pub fn product(&self) -> DenseMatrix {
        self.a
            .matmul(&self.b)
            .expect("factor shapes checked on construction")
    }
}

/// Validates `(w, gram, k)` and reports whether `k` asks for the full rank.
pub(crate) fn check_inputs(w: &DenseMatrix, gram: Option<&DenseMatrix>, k: usize) -> Result<bool> {
    if k == 0 {
        return Err(Error::InvalidRank {
            rank: 0,
            max: w.rows().min(w.cols()),
        });
    }
    if let Some(g) = gram {
        if !g.is_square() {
            return Err(Error::NotSquare {
                rows: g.rows(),
                cols: g.cols(),
            });
        }
        if g.rows() != w.cols() {
            return Err(Error::DimensionMismatch {
                context: "gram vs weight input dimension",
                expected: w.cols(),
                found: g.rows(),
            });
        }
    }
    Ok(k >= w.rows().min(w.cols()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_factors_reproduce() {
        let tall = DenseMatrix::from_fn(4, 2, |i, j| (i * 2 + j) as f64);
        let wide = tall.transpose();
        for w in [tall, wide] {
            let f = LowRankFactors::exact(&w);
            assert_eq!(f.product(), w);
            assert_eq!(f.rank(), 2);
        }
    }

    #[test]
    fn factor_validation() {
        assert!(LowRankFactors::new(DenseMatrix::zeros(3, 2), DenseMatrix::zeros(3, 3)).is_err());
        assert!(matches!(
            LowRankFactors::new(DenseMatrix::zeros(2, 3), DenseMatrix::zeros(3, 4)),
            Err(Error::InvalidRank { rank: 3, max: 2 })
        ));
        let f = LowRankFactors::new(DenseMatrix::zeros(5, 2), DenseMatrix::zeros(2, 3)).unwrap();
        assert_eq!(f.param_count(), 16);
    }
}
