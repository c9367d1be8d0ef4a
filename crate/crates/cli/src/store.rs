//! Typed artifacts on top of the raw manifest + blob format.

use std::collections::BTreeMap;
use std::path::Path;

use lrf_core::allocation::CompressionPlan;
use lrf_core::calibration::{Activation, GramAccumulator, MatrixType, ToyModel, WeightSite};
use lrf_core::engines::LowRankFactors;
use lrf_core::DenseMatrix;

use crate::artifact::{
    densify, read_json, write_json, Artifact, ArtifactError, ArtifactKind, Result,
};

fn invalid(msg: impl Into<String>) -> ArtifactError {
    ArtifactError::ManifestInvalid(msg.into())
}

fn expect_kind(a: &Artifact, kind: ArtifactKind) -> Result<()> {
    if a.manifest.kind == kind {
        Ok(())
    } else {
        Err(invalid(format!(
            "expected a {kind:?} artifact, found {:?}",
            a.manifest.kind
        )))
    }
}

fn required<'a>(a: &'a Artifact, key: &str) -> Result<&'a str> {
    a.meta(key)
        .ok_or_else(|| invalid(format!("missing metadata key {key}")))
}

fn parse_meta<T: std::str::FromStr>(a: &Artifact, key: &str) -> Result<T> {
    required(a, key)?
        .parse()
        .map_err(|_| invalid(format!("unparsable metadata value for {key}")))
}

fn site_meta(a: &Artifact, site: &str) -> Result<(usize, MatrixType)> {
    let layer = parse_meta(a, &format!("{site}.layer"))?;
    let ty = MatrixType::parse(required(a, &format!("{site}.type"))?)
        .ok_or_else(|| invalid(format!("unknown matrix type for {site}")))?;
    Ok((layer, ty))
}

fn set_site_meta(a: &mut Artifact, site: &WeightSite) {
    a.set_meta(format!("{}.layer", site.site_id), site.layer_index);
    a.set_meta(format!("{}.type", site.site_id), site.matrix_type);
}

pub fn model_artifact(model: &ToyModel) -> Artifact {
    let mut a = Artifact::new(ArtifactKind::Model);
    a.set_meta("activation", model.activation().as_str());
    for site in model.layers() {
        set_site_meta(&mut a, site);
        a.push(site.site_id.clone(), site.weight.clone());
    }
    a
}

pub fn model_from_artifact(a: Artifact) -> Result<ToyModel> {
    expect_kind(&a, ArtifactKind::Model)?;
    let activation = Activation::parse(required(&a, "activation")?)
        .ok_or_else(|| invalid("unknown activation"))?;
    let mut layers = Vec::with_capacity(a.tensors.len());
    for (entry, weight) in a.manifest.tensor_index.iter().zip(&a.tensors) {
        let (layer_index, matrix_type) = site_meta(&a, &entry.name)?;
        layers.push(WeightSite {
            site_id: entry.name.clone(),
            layer_index,
            matrix_type,
            weight: weight.clone(),
        });
    }
    layers.sort_by_key(|s| s.layer_index);
    ToyModel::new(layers, activation).map_err(|e| invalid(e.to_string()))
}

pub fn save_model(model: &ToyModel, path: &Path) -> Result<()> {
    model_artifact(model).save(path)
}

pub fn load_model(path: &Path) -> Result<ToyModel> {
    model_from_artifact(Artifact::load(path)?)
}

pub fn save_grams(grams: &[GramAccumulator], path: &Path) -> Result<()> {
    let mut a = Artifact::new(ArtifactKind::Grams);
    let mut sorted: Vec<&GramAccumulator> = grams.iter().collect();
    sorted.sort_by(|x, y| x.site_id.cmp(&y.site_id));
    for g in sorted {
        a.set_meta(format!("{}.samples", g.site_id), g.sample_count());
        a.push(g.site_id.clone(), g.gram().clone());
    }
    a.save(path)
}

pub fn load_grams(path: &Path) -> Result<Vec<GramAccumulator>> {
    let a = Artifact::load(path)?;
    expect_kind(&a, ArtifactKind::Grams)?;
    a.manifest
        .tensor_index
        .iter()
        .zip(&a.tensors)
        .map(|(entry, gram)| {
            let count = parse_meta(&a, &format!("{}.samples", entry.name))?;
            GramAccumulator::from_parts(entry.name.clone(), gram.clone(), count)
                .map_err(|e| invalid(e.to_string()))
        })
        .collect()
}

/// Plans are a standalone JSON document with no blob.
pub fn save_plan(plan: &CompressionPlan, path: &Path) -> Result<()> {
    write_json(path, plan)
}

pub fn load_plan(path: &Path) -> Result<CompressionPlan> {
    read_json(path)
}

pub fn save_calibration(
    batch: &DenseMatrix,
    metadata: &BTreeMap<String, String>,
    path: &Path,
) -> Result<()> {
    let mut a = Artifact::new(ArtifactKind::Calibration);
    a.manifest.metadata = metadata.clone();
    a.push("batch", batch.clone());
    a.save(path)
}

pub fn load_calibration(path: &Path) -> Result<DenseMatrix> {
    let a = Artifact::load(path)?;
    expect_kind(&a, ArtifactKind::Calibration)?;
    a.tensor("batch")
        .cloned()
        .ok_or_else(|| invalid("calibration artifact has no batch tensor"))
}

/// Storage form of one site after compression. Sites whose engine failed
/// keep their original dense weight.
#[derive(Debug, Clone, PartialEq)]
pub enum SiteWeights {
    Factored(LowRankFactors),
    Dense(DenseMatrix),
}

impl SiteWeights {
    pub fn to_dense(&self) -> DenseMatrix {
        match self {
            SiteWeights::Factored(f) => densify(f).expect("factors compose"),
            SiteWeights::Dense(w) => w.clone(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            SiteWeights::Factored(f) => f.param_count(),
            SiteWeights::Dense(w) => w.rows() * w.cols(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedSite {
    pub site_id: String,
    pub layer_index: usize,
    pub matrix_type: MatrixType,
    pub weights: SiteWeights,
}

/// Sites in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedModel {
    pub activation: Activation,
    pub sites: Vec<CompressedSite>,
}

impl CompressedModel {
    /// Dense model for evaluation.
    pub fn densified(&self) -> lrf_core::Result<ToyModel> {
        let layers = self
            .sites
            .iter()
            .map(|s| WeightSite {
                site_id: s.site_id.clone(),
                layer_index: s.layer_index,
                matrix_type: s.matrix_type,
                weight: s.weights.to_dense(),
            })
            .collect();
        ToyModel::new(layers, self.activation)
    }

    pub fn param_count(&self) -> usize {
        self.sites.iter().map(|s| s.weights.param_count()).sum()
    }

    pub fn to_artifact(&self) -> Artifact {
        let mut a = Artifact::new(ArtifactKind::CompressedModel);
        a.set_meta("activation", self.activation.as_str());
        for s in &self.sites {
            a.set_meta(format!("{}.layer", s.site_id), s.layer_index);
            a.set_meta(format!("{}.type", s.site_id), s.matrix_type);
            match &s.weights {
                SiteWeights::Factored(f) => {
                    a.set_meta(format!("{}.storage", s.site_id), "factored");
                    a.push(format!("{}.a", s.site_id), f.a().clone());
                    a.push(format!("{}.b", s.site_id), f.b().clone());
                }
                SiteWeights::Dense(w) => {
                    a.set_meta(format!("{}.storage", s.site_id), "dense");
                    a.push(format!("{}.w", s.site_id), w.clone());
                }
            }
        }
        a
    }

    pub fn from_artifact(a: Artifact) -> Result<Self> {
        expect_kind(&a, ArtifactKind::CompressedModel)?;
        let activation = Activation::parse(required(&a, "activation")?)
            .ok_or_else(|| invalid("unknown activation"))?;
        let mut order: Vec<String> = Vec::new();
        for entry in &a.manifest.tensor_index {
            let site = entry
                .name
                .rsplit_once('.')
                .map(|(s, _)| s.to_string())
                .ok_or_else(|| invalid(format!("tensor name {} has no suffix", entry.name)))?;
            if order.last() != Some(&site) {
                order.push(site);
            }
        }
        let tensor = |name: String| {
            a.tensor(&name)
                .cloned()
                .ok_or_else(|| invalid(format!("missing tensor {name}")))
        };
        let mut sites = Vec::with_capacity(order.len());
        for site_id in order {
            let (layer_index, matrix_type) = site_meta(&a, &site_id)?;
            let weights = match required(&a, &format!("{site_id}.storage"))? {
                "factored" => {
                    let f = LowRankFactors::new(
                        tensor(format!("{site_id}.a"))?,
                        tensor(format!("{site_id}.b"))?,
                    )
                    .map_err(|e| invalid(e.to_string()))?;
                    SiteWeights::Factored(f)
                }
                "dense" => SiteWeights::Dense(tensor(format!("{site_id}.w"))?),
                other => return Err(invalid(format!("unknown storage {other:?} for {site_id}"))),
            };
            sites.push(CompressedSite {
                site_id,
                layer_index,
                matrix_type,
                weights,
            });
        }
        sites.sort_by_key(|s| s.layer_index);
        Ok(Self { activation, sites })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_artifact().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_artifact(Artifact::load(path)?)
    }
}
