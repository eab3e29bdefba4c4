//! Checkpoint files and the deployable model package.
//!
//! `model.bin` layout, all integers little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 8 | magic `CSFMODEL` |
//! | 4 | format version |
//! | 4 | metadata length `m` |
//! | m | UTF-8 JSON metadata: config, precision, tensor table |
//! | p | packed payload, tensors in table order |
//! | 4 | CRC32 of the payload |

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use half::f16;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{Model, ModelConfig, ModelError, Predictor};
use crate::schema::{labels_json, verify_labels_json};
use crate::tensor::Tensor;
use crate::tokenizer::{TokenizerError, TokenizerModel};

pub const MAGIC: &[u8; 8] = b"CSFMODEL";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;
const TRAILER_LEN: usize = 4;

pub const MODEL_FILE: &str = "model.bin";
pub const TOKENIZER_FILE: &str = "tokenizer.json";
pub const CONFIG_FILE: &str = "config.json";
pub const LABELS_FILE: &str = "labels.json";
pub const MANIFEST_FILE: &str = "manifest.json";
/// Files covered by the manifest, in write order.
pub const COMPONENT_FILES: [&str; 4] = [MODEL_FILE, TOKENIZER_FILE, CONFIG_FILE, LABELS_FILE];

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint lacks tensor `{0}`")]
    MissingTensor(String),
    #[error("checkpoint has unexpected tensor `{0}`")]
    UnexpectedTensor(String),
    #[error("package file {file} does not match its manifest digest")]
    DigestMismatch { file: String },
    #[error("invalid package: {0}")]
    Package(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Storage precision of the payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    /// Half-precision payload; lossy, for size experiments only.
    F16,
}

impl Precision {
    pub fn bytes_per_value(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F16 => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMetadata {
    pub config: ModelConfig,
    pub precision: Precision,
    pub tensors: Vec<TensorEntry>,
}

/// Serializes every parameter in spec order.
pub fn encode_checkpoint(model: &Model, precision: Precision) -> Vec<u8> {
    let width = precision.bytes_per_value();
    let mut tensors = Vec::with_capacity(model.specs().len());
    let mut payload = Vec::with_capacity(model.num_params() * width);
    for (spec, tensor) in model.specs().iter().zip(model.params()) {
        tensors.push(TensorEntry {
            name: spec.name.clone(),
            shape: tensor.shape().to_vec(),
            offset: payload.len(),
        });
        match precision {
            Precision::F32 => tensor.data().iter().for_each(|v| payload.extend_from_slice(&v.to_le_bytes())),
            Precision::F16 => tensor
                .data()
                .iter()
                .for_each(|&v| payload.extend_from_slice(&f16::from_f32(v).to_le_bytes())),
        }
    }
    let meta = CheckpointMetadata {
        config: model.config().clone(),
        precision,
        tensors,
    };
    let meta = serde_json::to_vec(&meta).expect("metadata serializes");
    let mut out = Vec::with_capacity(HEADER_LEN + meta.len() + payload.len() + TRAILER_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Parses and fully validates a checkpoint, returning its metadata and model.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointMetadata, Model), StoreError> {
    if bytes.len() < HEADER_LEN + TRAILER_LEN {
        return Err(StoreError::Corrupt(format!("file is only {} bytes", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(StoreError::Corrupt("bad magic".into()));
    }
    let version = read_u32(bytes, 8);
    if version != CHECKPOINT_VERSION {
        return Err(StoreError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let meta_len = read_u32(bytes, 12) as usize;
    let payload_start = HEADER_LEN
        .checked_add(meta_len)
        .filter(|&end| end + TRAILER_LEN <= bytes.len())
        .ok_or_else(|| StoreError::Corrupt("metadata length exceeds file".into()))?;
    let meta: CheckpointMetadata = serde_json::from_slice(&bytes[HEADER_LEN..payload_start])
        .map_err(|e| StoreError::Corrupt(format!("metadata: {e}")))?;

    let width = meta.precision.bytes_per_value();
    let mut expected_offset = 0usize;
    for t in &meta.tensors {
        if t.offset != expected_offset {
            return Err(StoreError::Corrupt(format!(
                "tensor `{}` at offset {} (expected {expected_offset})",
                t.name, t.offset
            )));
        }
        let numel = t
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(width))
            .ok_or_else(|| StoreError::Corrupt(format!("tensor `{}` is too large", t.name)))?;
        expected_offset = expected_offset
            .checked_add(numel)
            .ok_or_else(|| StoreError::Corrupt("payload size overflows".into()))?;
    }
    let payload_end = bytes.len() - TRAILER_LEN;
    let payload = &bytes[payload_start..payload_end];
    if payload.len() != expected_offset {
        return Err(StoreError::Corrupt(format!(
            "payload is {} bytes, tensor table needs {expected_offset}",
            payload.len()
        )));
    }
    if crc32fast::hash(payload) != read_u32(bytes, payload_end) {
        return Err(StoreError::Corrupt("payload checksum mismatch".into()));
    }

    let mut by_name: BTreeMap<&str, &TensorEntry> = BTreeMap::new();
    for t in &meta.tensors {
        if by_name.insert(t.name.as_str(), t).is_some() {
            return Err(StoreError::Corrupt(format!("tensor `{}` appears twice", t.name)));
        }
    }
    let specs = meta.config.parameter_specs();
    for spec in &specs {
        if !by_name.contains_key(spec.name.as_str()) {
            return Err(StoreError::MissingTensor(spec.name.clone()));
        }
    }
    if by_name.len() != specs.len() {
        let known: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
        let extra = by_name.keys().find(|n| !known.contains(n)).expect("an extra name");
        return Err(StoreError::UnexpectedTensor(extra.to_string()));
    }

    let mut tensors = Vec::with_capacity(specs.len());
    for spec in &specs {
        let entry = by_name[spec.name.as_str()];
        let numel: usize = entry.shape.iter().product();
        let raw = &payload[entry.offset..entry.offset + numel * width];
        let data: Vec<f32> = match meta.precision {
            Precision::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
            Precision::F16 => raw
                .chunks_exact(2)
                .map(|c| f16::from_le_bytes(c.try_into().expect("2 bytes")).to_f32())
                .collect(),
        };
        let tensor = Tensor::new(entry.shape.clone(), data).map_err(|e| StoreError::Corrupt(e.to_string()))?;
        tensors.push((spec.name.clone(), tensor));
    }
    let model = Model::from_tensors(meta.config.clone(), tensors)?;
    Ok((meta, model))
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>, precision: Precision) -> Result<(), StoreError> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(model, precision)).map_err(io_err(path))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model, StoreError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(decode_checkpoint(&bytes)?.1)
}

/// Hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// What [`build_package`] wrote.
#[derive(Debug, Clone, PartialEq)]
pub struct PackageReport {
    pub dir: PathBuf,
    /// Every file in the package with its size in bytes, manifest last.
    pub files: Vec<(String, u64)>,
    pub precision: Precision,
}

impl PackageReport {
    pub fn total_bytes(&self) -> u64 {
        self.files.iter().map(|(_, n)| n).sum()
    }

    pub fn render_text(&self) -> String {
        let mut out = format!("package {}\n", self.dir.display());
        for (name, size) in &self.files {
            out.push_str(&format!("  {name:<16} {:>12.1} KB\n", *size as f64 / 1024.0));
        }
        out.push_str(&format!(
            "  {:<16} {:>12.1} KB ({:?} weights)\n",
            "total",
            self.total_bytes() as f64 / 1024.0,
            self.precision
        ));
        out
    }
}

fn package_contents(model: &Model, tokenizer: &TokenizerModel, precision: Precision) -> Vec<(&'static str, Vec<u8>)> {
    let config = serde_json::to_string_pretty(model.config()).expect("config serializes");
    vec![
        (MODEL_FILE, encode_checkpoint(model, precision)),
        (TOKENIZER_FILE, tokenizer.to_json().into_bytes()),
        (CONFIG_FILE, config.into_bytes()),
        (LABELS_FILE, labels_json().into_bytes()),
    ]
}

/// Writes the four component files and a SHA-256 manifest into `out_dir`,
/// which must be absent, empty, or an earlier package.
pub fn build_package(
    model: &Model,
    tokenizer: &TokenizerModel,
    out_dir: impl AsRef<Path>,
    precision: Precision,
) -> Result<PackageReport, StoreError> {
    let dir = out_dir.as_ref();
    if tokenizer.vocab_size() > model.config().vocab {
        return Err(ModelError::VocabMismatch {
            tokenizer: tokenizer.vocab_size(),
            model: model.config().vocab,
        }
        .into());
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let name = entry.map_err(io_err(dir))?.file_name();
        let name = name.to_string_lossy();
        if !COMPONENT_FILES.contains(&name.as_ref()) && name != MANIFEST_FILE {
            return Err(StoreError::Package(format!(
                "output directory {} contains unrelated entry `{name}`",
                dir.display()
            )));
        }
    }
    let mut manifest = BTreeMap::new();
    let mut files = Vec::new();
    for (name, bytes) in package_contents(model, tokenizer, precision) {
        let path = dir.join(name);
        fs::write(&path, &bytes).map_err(io_err(&path))?;
        manifest.insert(name.to_string(), sha256_hex(&bytes));
        files.push((name.to_string(), bytes.len() as u64));
    }
    let manifest = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, &manifest).map_err(io_err(&path))?;
    files.push((MANIFEST_FILE.to_string(), manifest.len() as u64));
    Ok(PackageReport {
        dir: dir.to_path_buf(),
        files,
        precision,
    })
}

/// Loads a package after checking its manifest, labels and config.
pub fn load_package(dir: impl AsRef<Path>) -> Result<Predictor, StoreError> {
    let dir = dir.as_ref();
    let read = |name: &str| -> Result<Vec<u8>, StoreError> {
        let path = dir.join(name);
        fs::read(&path).map_err(io_err(&path))
    };
    let manifest: BTreeMap<String, String> = serde_json::from_slice(&read(MANIFEST_FILE)?)
        .map_err(|e| StoreError::Package(format!("{MANIFEST_FILE}: {e}")))?;
    let listed: Vec<&str> = manifest.keys().map(String::as_str).collect();
    let mut expected = COMPONENT_FILES.to_vec();
    expected.sort_unstable();
    if listed != expected {
        return Err(StoreError::Package(format!(
            "manifest lists {listed:?}, expected {expected:?}"
        )));
    }
    let mut contents = BTreeMap::new();
    for name in COMPONENT_FILES {
        let bytes = read(name)?;
        if sha256_hex(&bytes) != manifest[name] {
            return Err(StoreError::DigestMismatch { file: name.to_string() });
        }
        contents.insert(name, bytes);
    }
    let text = |name: &str| {
        std::str::from_utf8(&contents[name]).map_err(|e| StoreError::Package(format!("{name}: {e}")))
    };
    verify_labels_json(text(LABELS_FILE)?).map_err(|e| StoreError::Package(format!("{LABELS_FILE}: {e}")))?;
    let config: ModelConfig =
        serde_json::from_str(text(CONFIG_FILE)?).map_err(|e| StoreError::Package(format!("{CONFIG_FILE}: {e}")))?;
    let (_, model) = decode_checkpoint(&contents[MODEL_FILE])?;
    if *model.config() != config {
        return Err(StoreError::Package(format!("{CONFIG_FILE} disagrees with {MODEL_FILE}")));
    }
    let tokenizer = TokenizerModel::from_json(text(TOKENIZER_FILE)?)?;
    Ok(Predictor::new(model, tokenizer)?)
}
