//! Seeded generators for weights with planted spectra, spectrally
//! constructed Gram matrices and layered toy models.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::{gaussian_matrix, Activation, MatrixType, ToyModel, WeightSite};
use crate::error::{Error, Result};
use crate::linalg::svd;
use crate::matrix::DenseMatrix;

/// Random `n × k` matrix with orthonormal columns (`k ≤ n`).
pub fn random_orthonormal(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Result<DenseMatrix> {
    if k == 0 || k > n {
        return Err(Error::InvalidRank { rank: k, max: n });
    }
    Ok(svd(&gaussian_matrix(rng, n, k))?.u)
}

/// `U · diag(spectrum) · Vᵀ` with Haar-like random `U`, `V`. Entries past
/// `min(rows, cols)` in `spectrum` are ignored; missing ones are zero.
pub fn planted_matrix(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    spectrum: &[f64],
) -> Result<DenseMatrix> {
    let r = rows.min(cols);
    let mut sigma = spectrum.to_vec();
    sigma.resize(r, 0.0);
    let u = random_orthonormal(rng, rows, r)?;
    let v = random_orthonormal(rng, cols, r)?;
    u.scale_cols(&sigma).matmul_t(&v)
}

/// Power-law spectrum `scale · (i + 1)^(−decay)`, zeroed past `rank`.
pub fn power_law_spectrum(len: usize, scale: f64, decay: f64, rank: Option<usize>) -> Vec<f64> {
    (0..len)
        .map(|i| {
            if rank.is_some_and(|r| i >= r) {
                0.0
            } else {
                scale * libm::pow(i as f64 + 1.0, -decay)
            }
        })
        .collect()
}

/// Activations `X = U · diag(√λ) · Vᵀ` (`dim × n_samples`) whose Gram has
/// eigenvalues `λ`, log-spaced from 1 down to `1/condition`. With
/// `zero_tail > 0` that many trailing eigenvalues are exactly zero, making
/// the Gram singular.
pub fn spectral_activations(
    seed: u64,
    dim: usize,
    n_samples: usize,
    condition: f64,
    zero_tail: usize,
) -> Result<DenseMatrix> {
    if n_samples < dim || zero_tail >= dim || !(condition >= 1.0) {
        return Err(Error::InvalidParameter(
            "spectral activations need n_samples >= dim, zero_tail < dim, condition >= 1",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let live = dim - zero_tail;
    let sqrt_eigs: Vec<f64> = (0..dim)
        .map(|i| {
            if i >= live {
                0.0
            } else if live == 1 {
                1.0
            } else {
                let t = i as f64 / (live - 1) as f64;
                libm::pow(condition, -0.5 * t)
            }
        })
        .collect();
    let u = random_orthonormal(&mut rng, dim, dim)?;
    let v = random_orthonormal(&mut rng, n_samples, dim)?;
    u.scale_cols(&sqrt_eigs).matmul_t(&v)
}

/// Shape and spectral profile of a generated toy model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Layer widths; layer `i` maps `dims[i]` to `dims[i + 1]`.
    pub dims: Vec<usize>,
    /// Cycled over layers.
    pub matrix_types: Vec<MatrixType>,
    /// Power-law decay exponent per layer, cycled.
    pub decay: Vec<f64>,
    pub activation: Activation,
    #[serde(default = "default_weight_scale")]
    pub weight_scale: f64,
    /// Caps every weight's rank when set.
    #[serde(default)]
    pub weight_rank: Option<usize>,
}

fn default_weight_scale() -> f64 {
    1.0
}

impl ModelSpec {
    pub fn layer_count(&self) -> usize {
        self.dims.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_count() == 0 || self.dims.contains(&0) {
            return Err(Error::InvalidParameter(
                "model needs at least two positive dims",
            ));
        }
        if self.matrix_types.is_empty() || self.decay.is_empty() {
            return Err(Error::InvalidParameter(
                "model needs matrix types and decay rates",
            ));
        }
        if !(self.weight_scale > 0.0) || self.decay.iter().any(|d| !d.is_finite()) {
            return Err(Error::InvalidParameter(
                "weight scale must be positive and decay finite",
            ));
        }
        if self.weight_rank == Some(0) {
            return Err(Error::InvalidParameter("weight rank must be positive"));
        }
        Ok(())
    }
}

/// Site identifier used throughout reports and artifacts, e.g. `L03.Q`.
pub fn site_id(layer: usize, ty: MatrixType) -> alloc::string::String {
    format!("L{layer:02}.{ty}")
}

/// Builds the model described by `spec`. Each layer's spectrum is normalized
/// so its top singular value is `weight_scale`.
pub fn generate_model(spec: &ModelSpec, seed: u64) -> Result<ToyModel> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(spec.layer_count());
    for layer in 0..spec.layer_count() {
        let (cols, rows) = (spec.dims[layer], spec.dims[layer + 1]);
        let ty = spec.matrix_types[layer % spec.matrix_types.len()];
        let decay = spec.decay[layer % spec.decay.len()];
        let spectrum =
            power_law_spectrum(rows.min(cols), spec.weight_scale, decay, spec.weight_rank);
        layers.push(WeightSite {
            site_id: site_id(layer, ty),
            layer_index: layer,
            matrix_type: ty,
            weight: planted_matrix(&mut rng, rows, cols, &spectrum)?,
        });
    }
    ToyModel::new(layers, spec.activation)
}
