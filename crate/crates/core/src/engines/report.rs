use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::linalg::{svd, symmetric_part};
use crate::matrix::DenseMatrix;

/// Guard for dividing by a zero theoretical loss.
pub const DIV_EPS: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineKind {
    Plain,
    Cholesky,
    DoubleSvd,
    AdmmNoise,
}

impl EngineKind {
    pub const ALL: [EngineKind; 4] = [
        EngineKind::Plain,
        EngineKind::Cholesky,
        EngineKind::DoubleSvd,
        EngineKind::AdmmNoise,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EngineKind::Plain => "plain",
            EngineKind::Cholesky => "cholesky",
            EngineKind::DoubleSvd => "double_svd",
            EngineKind::AdmmNoise => "admm_noise",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.as_str() == s)
    }
}

impl fmt::Display for EngineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum SiteStatus {
    Ok,
    Failed { reason: String },
}

impl SiteStatus {
    pub fn is_ok(&self) -> bool {
        matches!(self, SiteStatus::Ok)
    }
}

/// Per-site outcome of one compression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationReport {
    pub site_id: String,
    pub engine: EngineKind,
    pub refined: bool,
    pub rank: usize,
    pub theoretical_loss: f64,
    /// `None` when the engine failed.
    pub achieved_loss: Option<f64>,
    pub normalized_loss: Option<f64>,
    /// Ratio of extreme singular values of the Gram; `None` when singular.
    pub gram_condition: Option<f64>,
    pub wall_time_ms: f64,
    pub status: SiteStatus,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl TruncationReport {
    pub fn succeeded(
        site_id: String,
        engine: EngineKind,
        rank: usize,
        theoretical_loss: f64,
        achieved_loss: f64,
        gram_condition: Option<f64>,
    ) -> Self {
        Self {
            site_id,
            engine,
            refined: false,
            rank,
            theoretical_loss,
            achieved_loss: Some(achieved_loss),
            normalized_loss: Some(normalized(achieved_loss, theoretical_loss)),
            gram_condition,
            wall_time_ms: 0.0,
            status: SiteStatus::Ok,
            warnings: Vec::new(),
        }
    }

    pub fn failed(
        site_id: String,
        engine: EngineKind,
        rank: usize,
        theoretical_loss: f64,
        gram_condition: Option<f64>,
        reason: String,
    ) -> Self {
        Self {
            site_id,
            engine,
            refined: false,
            rank,
            theoretical_loss,
            achieved_loss: None,
            normalized_loss: None,
            gram_condition,
            wall_time_ms: 0.0,
            status: SiteStatus::Failed { reason },
            warnings: Vec::new(),
        }
    }

    /// No engine may beat the Eckart-Young floor.
    pub fn respects_lower_bound(&self) -> bool {
        self.achieved_loss
            .is_none_or(|a| a >= self.theoretical_loss - 1e-9 * (1.0 + self.theoretical_loss))
    }
}

fn normalized(achieved: f64, theoretical: f64) -> f64 {
    (achieved / theoretical.max(DIV_EPS)).min(f64::MAX)
}

/// `σ_max / σ_min` of the Gram, `None` when the smallest is zero.
pub fn gram_condition(gram: &DenseMatrix) -> Result<Option<f64>> {
    let s = svd(&symmetric_part(gram)?)?;
    let smin = *s.sigma.last().expect("non-empty spectrum");
    if smin > 0.0 {
        Ok(Some(s.sigma[0] / smin))
    } else {
        Ok(None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalized_guards_zero() {
        let r = TruncationReport::succeeded("s".into(), EngineKind::Plain, 1, 0.0, 0.0, Some(1.0));
        assert_eq!(r.normalized_loss, Some(0.0));
        let r = TruncationReport::succeeded("s".into(), EngineKind::Plain, 1, 2.0, 3.0, None);
        assert_eq!(r.normalized_loss, Some(1.5));
        assert!(r.respects_lower_bound());
        let r = TruncationReport::succeeded("s".into(), EngineKind::Plain, 1, 2.0, 1.0, None);
        assert!(!r.respects_lower_bound());
    }

    #[test]
    fn engine_names_round_trip() {
        for e in EngineKind::ALL {
            assert_eq!(EngineKind::parse(e.as_str()), Some(e));
        }
    }

    #[test]
    fn condition_of_singular_gram() {
        assert_eq!(
            gram_condition(&DenseMatrix::from_diag(&[4.0, 0.0])).unwrap(),
            None
        );
        assert_eq!(
            gram_condition(&DenseMatrix::from_diag(&[4.0, 2.0])).unwrap(),
            Some(2.0)
        );
    }
}
