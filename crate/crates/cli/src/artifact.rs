//! Two-file artifact format: a JSON manifest plus a sibling `.bin` blob of
//! little-endian `f64` values, row-major, concatenated in index order.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use lrf_core::engines::LowRankFactors;
use lrf_core::DenseMatrix;
use serde::{Deserialize, Serialize};

pub const FORMAT_VERSION: &str = "1";

#[derive(Debug, thiserror::Error)]
pub enum ArtifactError {
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid manifest: {0}")]
    ManifestInvalid(String),
    #[error("corrupt blob {}: expected {expected} bytes, found {found}", path.display())]
    CorruptBlob {
        path: PathBuf,
        expected: u64,
        found: u64,
    },
    #[error("tensor {0} holds non-finite values")]
    NonFiniteTensor(String),
    #[error("unsupported format version {0:?}")]
    UnsupportedVersion(String),
}

pub type Result<T, E = ArtifactError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Model,
    Grams,
    Plan,
    CompressedModel,
    Calibration,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub byte_offset: u64,
    pub byte_length: u64,
}

impl TensorEntry {
    fn end(&self) -> u64 {
        self.byte_offset + self.byte_length
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactManifest {
    pub format_version: String,
    pub kind: ArtifactKind,
    pub tensor_index: Vec<TensorEntry>,
    pub metadata: BTreeMap<String, String>,
}

impl ArtifactManifest {
    pub fn new(kind: ArtifactKind) -> Self {
        Self {
            format_version: FORMAT_VERSION.into(),
            kind,
            tensor_index: Vec::new(),
            metadata: BTreeMap::new(),
        }
    }

    /// Bytes the blob must hold.
    pub fn payload_len(&self) -> u64 {
        self.tensor_index.last().map_or(0, TensorEntry::end)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(ArtifactError::UnsupportedVersion(
                self.format_version.clone(),
            ));
        }
        let mut names = BTreeSet::new();
        let mut cursor = 0u64;
        for e in &self.tensor_index {
            if e.name.is_empty() || !names.insert(e.name.as_str()) {
                return Err(ArtifactError::ManifestInvalid(format!(
                    "empty or duplicate tensor name {:?}",
                    e.name
                )));
            }
            if e.rows == 0 || e.cols == 0 {
                return Err(ArtifactError::ManifestInvalid(format!(
                    "tensor {} has an empty shape",
                    e.name
                )));
            }
            let expected = (e.rows as u64) * (e.cols as u64) * 8;
            if e.byte_length != expected {
                return Err(ArtifactError::ManifestInvalid(format!(
                    "tensor {} is {}x{} but spans {} bytes",
                    e.name, e.rows, e.cols, e.byte_length
                )));
            }
            if e.byte_offset < cursor {
                return Err(ArtifactError::ManifestInvalid(format!(
                    "tensor {} overlaps its predecessor",
                    e.name
                )));
            }
            cursor = e.end();
        }
        Ok(())
    }
}

/// A manifest together with its tensors, kept in index order.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub manifest: ArtifactManifest,
    pub tensors: Vec<DenseMatrix>,
}

impl Artifact {
    pub fn new(kind: ArtifactKind) -> Self {
        Self {
            manifest: ArtifactManifest::new(kind),
            tensors: Vec::new(),
        }
    }

    /// Appends a tensor directly after the previous one.
    pub fn push(&mut self, name: impl Into<String>, tensor: DenseMatrix) {
        let (rows, cols) = tensor.shape();
        self.manifest.tensor_index.push(TensorEntry {
            name: name.into(),
            rows,
            cols,
            byte_offset: self.manifest.payload_len(),
            byte_length: (rows * cols * 8) as u64,
        });
        self.tensors.push(tensor);
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.manifest.metadata.insert(key.into(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.manifest.metadata.get(key).map(String::as_str)
    }

    pub fn tensor(&self, name: &str) -> Option<&DenseMatrix> {
        let i = self
            .manifest
            .tensor_index
            .iter()
            .position(|e| e.name == name)?;
        self.tensors.get(i)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save(&self.manifest, &self.tensors, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (manifest, tensors) = load(path)?;
        Ok(Self { manifest, tensors })
    }
}

/// `model.json` ↦ `model.bin`.
pub fn blob_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

pub fn encode_blob(tensors: &[DenseMatrix]) -> Vec<u8> {
    let len: usize = tensors.iter().map(|t| t.as_slice().len() * 8).sum();
    let mut out = Vec::with_capacity(len);
    for t in tensors {
        for v in t.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Writes the blob and then the manifest, each through a temporary file
/// renamed into place.
pub fn save(manifest: &ArtifactManifest, tensors: &[DenseMatrix], path: &Path) -> Result<()> {
    manifest.validate()?;
    if manifest.tensor_index.len() != tensors.len() {
        return Err(ArtifactError::ManifestInvalid(format!(
            "index lists {} tensors, {} supplied",
            manifest.tensor_index.len(),
            tensors.len()
        )));
    }
    let mut cursor = 0u64;
    for (e, t) in manifest.tensor_index.iter().zip(tensors) {
        if (e.rows, e.cols) != t.shape() {
            return Err(ArtifactError::ManifestInvalid(format!(
                "tensor {} does not match its index shape",
                e.name
            )));
        }
        if e.byte_offset != cursor {
            return Err(ArtifactError::ManifestInvalid(format!(
                "tensor {} is not packed after its predecessor",
                e.name
            )));
        }
        cursor = e.end();
    }
    write_atomic(&blob_path(path), &encode_blob(tensors))?;
    write_atomic(path, canonical_json(manifest)?.as_bytes())
}

pub fn load(path: &Path) -> Result<(ArtifactManifest, Vec<DenseMatrix>)> {
    let text = fs::read_to_string(path).map_err(|source| ArtifactError::Io {
        path: path.into(),
        source,
    })?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| ArtifactError::ManifestInvalid(e.to_string()))?;
    if let Some(v) = value.get("format_version") {
        if v.as_str() != Some(FORMAT_VERSION) {
            return Err(ArtifactError::UnsupportedVersion(
                v.to_string().trim_matches('"').to_string(),
            ));
        }
    }
    let manifest: ArtifactManifest =
        serde_json::from_value(value).map_err(|e| ArtifactError::ManifestInvalid(e.to_string()))?;
    manifest.validate()?;

    let bpath = blob_path(path);
    let blob = fs::read(&bpath).map_err(|source| ArtifactError::Io {
        path: bpath.clone(),
        source,
    })?;
    let expected = manifest.payload_len();
    if blob.len() as u64 != expected {
        return Err(ArtifactError::CorruptBlob {
            path: bpath,
            expected,
            found: blob.len() as u64,
        });
    }
    let tensors = manifest
        .tensor_index
        .iter()
        .map(|e| {
            let bytes = &blob[e.byte_offset as usize..e.end() as usize];
            let data: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of eight")))
                .collect();
            DenseMatrix::new(e.rows, e.cols, data)
                .map_err(|_| ArtifactError::NonFiniteTensor(e.name.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, tensors))
}

/// `a · b`, for evaluation only; storage keeps the two factors.
pub fn densify(factors: &LowRankFactors) -> lrf_core::Result<DenseMatrix> {
    factors.a().matmul(factors.b())
}

/// Pretty JSON with object keys in sorted order and a trailing newline.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    // `serde_json::Value` keeps objects in a BTreeMap, which sorts keys.
    let v =
        serde_json::to_value(value).map_err(|e| ArtifactError::ManifestInvalid(e.to_string()))?;
    let mut s = serde_json::to_string_pretty(&v)
        .map_err(|e| ArtifactError::ManifestInvalid(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, canonical_json(value)?.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|source| ArtifactError::Io {
        path: path.into(),
        source,
    })?;
    serde_json::from_str(&text)
        .map_err(|e| ArtifactError::ManifestInvalid(format!("{}: {e}", path.display())))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| ArtifactError::Io {
        path: path.into(),
        source,
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(io)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}
