//! Toy feed-forward models, activation capture and Gram accumulation.

use alloc::collections::BTreeMap;
use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::SYMMETRY_TOL;
use crate::matrix::DenseMatrix;

/// Role of a weight matrix; allocation groups sites by this key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MatrixType {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
    Dense,
}

impl MatrixType {
    pub const ALL: [MatrixType; 8] = [
        MatrixType::Q,
        MatrixType::K,
        MatrixType::V,
        MatrixType::O,
        MatrixType::Gate,
        MatrixType::Up,
        MatrixType::Down,
        MatrixType::Dense,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MatrixType::Q => "Q",
            MatrixType::K => "K",
            MatrixType::V => "V",
            MatrixType::O => "O",
            MatrixType::Gate => "Gate",
            MatrixType::Up => "Up",
            MatrixType::Down => "Down",
            MatrixType::Dense => "Dense",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

impl fmt::Display for MatrixType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Gelu => 0.5 * x * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2)),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Activation::Identity, Activation::Relu, Activation::Gelu]
            .into_iter()
            .find(|a| a.as_str() == s)
    }
}

/// One named weight matrix inside a model. The weight is applied as `W·x`
/// with column-vector samples, so `weight.cols()` is the input dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSite {
    pub site_id: String,
    pub layer_index: usize,
    pub matrix_type: MatrixType,
    pub weight: DenseMatrix,
}

impl WeightSite {
    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// A plain chain `x ↦ W_L · f(… f(W_1 · x))`; the activation is applied
/// between layers, not after the last one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    layers: Vec<WeightSite>,
    activation: Activation,
}

impl ToyModel {
    pub fn new(layers: Vec<WeightSite>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidParameter("model has no layers"));
        }
        let mut seen = BTreeSet::new();
        for site in &layers {
            if !seen.insert(site.site_id.as_str()) {
                return Err(Error::DuplicateSite(site.site_id.clone()));
            }
        }
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::DimensionMismatch {
                    context: "model layer chain",
                    expected: pair[0].output_dim(),
                    found: pair[1].input_dim(),
                });
            }
        }
        Ok(Self { layers, activation })
    }

    pub fn layers(&self) -> &[WeightSite] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn site(&self, site_id: &str) -> Option<&WeightSite> {
        self.layers.iter().find(|s| s.site_id == site_id)
    }

    /// Same structure with each weight replaced by `replace(site)`.
    pub fn with_weights(
        &self,
        mut replace: impl FnMut(&WeightSite) -> DenseMatrix,
    ) -> Result<Self> {
        let layers = self
            .layers
            .iter()
            .map(|s| WeightSite {
                weight: replace(s),
                ..s.clone()
            })
            .collect();
        Self::new(layers, self.activation)
    }
}

/// Activations presented to every site plus the model output.
#[derive(Debug, Clone, PartialEq)]
pub struct Capture {
    pub activations: BTreeMap<String, DenseMatrix>,
    pub output: DenseMatrix,
}

/// Runs `batch` (features × samples) through the model and records the
/// exact input each weight sees.
pub fn forward_capture(model: &ToyModel, batch: &DenseMatrix) -> Result<Capture> {
    if batch.rows() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "forward_capture batch",
            expected: model.input_dim(),
            found: batch.rows(),
        });
    }
    let mut activations = BTreeMap::new();
    let mut h = batch.clone();
    let last = model.layers.len() - 1;
    for (i, site) in model.layers.iter().enumerate() {
        let z = site.weight.matmul(&h)?;
        activations.insert(site.site_id.clone(), h);
        h = if i == last {
            z
        } else {
            z.map(|v| model.activation.apply(v))
        };
    }
    Ok(Capture {
        activations,
        output: h,
    })
}

/// Model output only.
pub fn forward(model: &ToyModel, batch: &DenseMatrix) -> Result<DenseMatrix> {
    forward_capture(model, batch).map(|c| c.output)
}

/// Running sum of `X·Xᵀ` for one site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramAccumulator {
    pub site_id: String,
    gram: DenseMatrix,
    sample_count: u64,
}

impl GramAccumulator {
    pub fn new(site_id: impl Into<String>, dim: usize) -> Self {
        Self {
            site_id: site_id.into(),
            gram: DenseMatrix::zeros(dim, dim),
            sample_count: 0,
        }
    }

    /// Restores an accumulator from stored statistics.
    pub fn from_parts(
        site_id: impl Into<String>,
        gram: DenseMatrix,
        sample_count: u64,
    ) -> Result<Self> {
        if !gram.is_square() {
            return Err(Error::NotSquare {
                rows: gram.rows(),
                cols: gram.cols(),
            });
        }
        Ok(Self {
            site_id: site_id.into(),
            gram,
            sample_count,
        })
    }

    pub fn dim(&self) -> usize {
        self.gram.rows()
    }

    pub fn gram(&self) -> &DenseMatrix {
        &self.gram
    }

    pub fn sample_count(&self) -> u64 {
        self.sample_count
    }

    /// `gram / sample_count`, the sample second-moment matrix.
    pub fn normalized_gram(&self) -> DenseMatrix {
        if self.sample_count == 0 {
            return self.gram.clone();
        }
        self.gram.scale(1.0 / self.sample_count as f64)
    }

    /// Adds `x·xᵀ` for a `dim × n` block of samples.
    pub fn accumulate(&mut self, x: &DenseMatrix) -> Result<()> {
        if x.rows() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "gram accumulate",
                expected: self.dim(),
                found: x.rows(),
            });
        }
        let outer = x.matmul_t(x)?;
        self.gram = self.gram.add(&outer)?.symmetrized();
        self.sample_count += x.cols() as u64;
        Ok(())
    }

    /// Folds another accumulator for the same site into this one.
    pub fn merge(&mut self, other: &GramAccumulator) -> Result<()> {
        if other.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "gram merge",
                expected: self.dim(),
                found: other.dim(),
            });
        }
        self.gram = self.gram.add(&other.gram)?.symmetrized();
        self.sample_count += other.sample_count;
        Ok(())
    }

    pub fn is_symmetric(&self) -> bool {
        self.gram.relative_asymmetry() <= SYMMETRY_TOL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleDistribution {
    Gaussian,
    /// Student-t with 3 degrees of freedom.
    HeavyTailed,
    /// Columns confined to a random subspace of the given dimension.
    LowRank(usize),
}

/// Seeded synthetic calibration batch, `dim × n_samples`.
pub fn generate_calibration(
    seed: u64,
    n_samples: usize,
    dim: usize,
    distribution: SampleDistribution,
) -> Result<DenseMatrix> {
    if n_samples == 0 || dim == 0 {
        return Err(Error::InvalidParameter(
            "calibration needs at least one sample and dimension",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match distribution {
        SampleDistribution::Gaussian => Ok(gaussian_matrix(&mut rng, dim, n_samples)),
        SampleDistribution::HeavyTailed => {
            let t = StudentT::new(3.0).expect("valid degrees of freedom");
            Ok(DenseMatrix::from_fn(dim, n_samples, |_, _| {
                t.sample(&mut rng)
            }))
        }
        SampleDistribution::LowRank(r) => {
            if r == 0 || r > dim {
                return Err(Error::InvalidRank { rank: r, max: dim });
            }
            let basis = gaussian_matrix(&mut rng, dim, r);
            let coeffs = gaussian_matrix(&mut rng, r, n_samples);
            basis.matmul(&coeffs)
        }
    }
}

pub(crate) fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}
