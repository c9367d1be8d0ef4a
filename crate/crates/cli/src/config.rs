//! Run configuration: one JSON document, every field optional.

use std::path::{Path, PathBuf};

use lrf_core::allocation::AllocationParams;
use lrf_core::calibration::{Activation, MatrixType, SampleDistribution};
use lrf_core::engines::{AdmmParams, EngineKind, LbfgsParams};
use lrf_core::synth::ModelSpec;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {}: {source}", path.display())]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocationMode {
    Homogeneous,
    Heterogeneous,
}

impl AllocationMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "homogeneous" => Some(Self::Homogeneous),
            "heterogeneous" => Some(Self::Heterogeneous),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibConfig {
    pub n_samples: usize,
    pub distribution: SampleDistribution,
    /// Size of the separately seeded batch used for end-to-end evaluation.
    pub holdout_samples: usize,
    /// Divide each Gram by its sample count before use.
    pub normalize_gram: bool,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            n_samples: 256,
            distribution: SampleDistribution::Gaussian,
            holdout_samples: 64,
            normalize_gram: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineParams {
    /// Relative diagonal shift for the Cholesky retry; 0 disables it.
    pub jitter: f64,
    /// Pseudo-inverse threshold for double-SVD; `None` picks `dim · ε`.
    pub pinv_tol: Option<f64>,
    pub admm: AdmmParams,
    pub lbfgs: LbfgsParams,
}

impl Default for EngineParams {
    fn default() -> Self {
        Self {
            jitter: 1e-6,
            pinv_tol: None,
            admm: AdmmParams::default(),
            lbfgs: LbfgsParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model_spec: ModelSpec,
    pub calib: CalibConfig,
    pub target_ratio: f64,
    pub allocation: AllocationMode,
    pub allocation_params: AllocationParams,
    pub engine: EngineKind,
    pub refine: bool,
    pub engine_params: EngineParams,
    pub output_dir: PathBuf,
    /// Worker count; `None` uses every logical core. `LRF_THREADS` wins.
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model_spec: ModelSpec {
                dims: vec![16; 9],
                matrix_types: vec![MatrixType::Q, MatrixType::K, MatrixType::V, MatrixType::O],
                decay: vec![0.5, 1.0, 1.5, 2.0, 0.75, 1.25],
                activation: Activation::Relu,
                weight_scale: 1.0,
                weight_rank: None,
            },
            calib: CalibConfig::default(),
            target_ratio: 0.2,
            allocation: AllocationMode::Heterogeneous,
            allocation_params: AllocationParams::default(),
            engine: EngineKind::DoubleSvd,
            refine: false,
            engine_params: EngineParams::default(),
            output_dir: PathBuf::from("out"),
            threads: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.into(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        self.model_spec
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(0.0..1.0).contains(&self.target_ratio) {
            return bad("target_ratio must lie in [0, 1)");
        }
        if self.calib.n_samples == 0 || self.calib.holdout_samples == 0 {
            return bad("calibration and holdout need at least one sample");
        }
        if let SampleDistribution::LowRank(r) = self.calib.distribution {
            if r == 0 || r > self.model_spec.dims[0] {
                return bad("low_rank calibration rank must lie in 1..=input dim");
            }
        }
        let p = &self.engine_params;
        if !(p.jitter >= 0.0) || p.pinv_tol.is_some_and(|t| !(t > 0.0)) {
            return bad("jitter must be non-negative and pinv_tol positive");
        }
        if !(p.admm.eps >= 0.0) || !(p.admm.rho > 0.0) || p.admm.max_iter == 0 {
            return bad("admm needs eps >= 0, rho > 0 and at least one iteration");
        }
        if !(p.lbfgs.lr > 0.0)
            || p.lbfgs.memory == 0
            || !(0.0 < p.lbfgs.c1 && p.lbfgs.c1 < p.lbfgs.c2 && p.lbfgs.c2 < 1.0)
        {
            return bad("lbfgs needs lr > 0, memory > 0 and 0 < c1 < c2 < 1");
        }
        if self.threads == Some(0) {
            return bad("threads must be positive");
        }
        Ok(())
    }

    /// Worker count after applying `LRF_THREADS`.
    pub fn worker_count(&self) -> Result<usize, ConfigError> {
        if let Ok(v) = std::env::var("LRF_THREADS") {
            return match v.trim().parse::<usize>() {
                Ok(n) if n > 0 => Ok(n),
                _ => Err(ConfigError::Invalid(format!(
                    "LRF_THREADS={v:?} is not a positive integer"
                ))),
            };
        }
        Ok(self
            .threads
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())))
    }

    /// Seeds for the model, the calibration batch and the holdout batch.
    pub fn stream_seeds(&self) -> (u64, u64, u64) {
        (
            self.seed,
            self.seed.wrapping_add(0x9E37_79B9),
            self.seed.wrapping_add(0x7F4A_7C15),
        )
    }
}
