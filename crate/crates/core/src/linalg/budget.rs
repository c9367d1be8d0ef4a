use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameter accounting for a rank-`k` factorization of an `m × n` matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankBudget {
    pub target_ratio: f64,
    pub resolved_rank: usize,
    pub dense_params: usize,
    pub factored_params: usize,
}

/// Largest rank whose factors `k·(m + n)` fit in `(1 − ratio)·m·n`
/// parameters, never below 1.
pub fn rank_for_ratio(rows: usize, cols: usize, ratio: f64) -> Result<RankBudget> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::RatioOutOfRange(ratio));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidShape { rows, cols, len: 0 });
    }
    let dense = rows * cols;
    let kept = (1.0 - ratio) * dense as f64 / (rows + cols) as f64;
    let rank = (libm::floor(kept) as usize).max(1);
    Ok(RankBudget {
        target_ratio: ratio,
        resolved_rank: rank,
        dense_params: dense,
        factored_params: rank * (rows + cols),
    })
}
