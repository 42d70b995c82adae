//! On-disk formats: JSONL/CSV datasets, SGW1 weight files, JSON reports and
//! run manifests. Every artifact is addressed by its SHA-256.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Dataset, Record, Split};
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::model::{EncoderWeights, ModelConfig};
use crate::real::{Precision, Real};
use crate::tensor::Tensor;
use crate::tokenizer::Vocab;

pub const WEIGHTS_FORMAT: &str = "SGW1";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// Hash of a value's canonical JSON encoding.
pub fn hash_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(value)?))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    Jsonl,
    Csv,
}

impl DatasetFormat {
    /// `.csv` files are CSV; everything else is read as JSON lines.
    pub fn from_path(path: impl AsRef<Path>) -> Self {
        match path.as_ref().extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => DatasetFormat::Csv,
            _ => DatasetFormat::Jsonl,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    #[serde(default)]
    id: String,
    text: String,
    label: usize,
    /// Space-separated word indices.
    #[serde(default)]
    rationale: String,
    #[serde(default)]
    split: Split,
}

fn parse_error(path: &Path, line: usize, detail: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        detail: detail.into(),
    }
}

/// Loads and validates a dataset. Records without an id get `line-<n>`.
/// Labels must be below `num_classes` when it is given.
pub fn load_dataset(path: impl AsRef<Path>, format: DatasetFormat, num_classes: Option<usize>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = read_string(path)?;
    let mut rows: Vec<(usize, Record)> = Vec::new();
    match format {
        DatasetFormat::Jsonl => {
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let rec: Record =
                    serde_json::from_str(line).map_err(|e| parse_error(path, i + 1, e.to_string()))?;
                rows.push((i + 1, rec));
            }
        }
        DatasetFormat::Csv => {
            let mut reader = csv::Reader::from_reader(text.as_bytes());
            let headers = reader.headers()?.clone();
            for raw in reader.records() {
                let raw = raw.map_err(|e| {
                    let line = e.position().map_or(0, |p| p.line() as usize);
                    parse_error(path, line, e.to_string())
                })?;
                let line = raw.position().map_or(0, |p| p.line() as usize);
                let row: CsvRow = raw
                    .deserialize(Some(&headers))
                    .map_err(|e| parse_error(path, line, e.to_string()))?;
                let rationale = row
                    .rationale
                    .split_whitespace()
                    .map(str::parse)
                    .collect::<std::result::Result<Vec<usize>, _>>()
                    .map_err(|e| parse_error(path, line, format!("rationale: {e}")))?;
                rows.push((
                    line,
                    Record {
                        id: row.id,
                        text: row.text,
                        label: row.label,
                        rationale,
                        split: row.split,
                    },
                ));
            }
        }
    }
    if rows.is_empty() {
        log::warn!("{} holds no records", path.display());
    }
    let mut seen = HashSet::new();
    let mut records = Vec::with_capacity(rows.len());
    for (line, mut rec) in rows {
        if rec.text.trim().is_empty() {
            return Err(parse_error(path, line, "empty text"));
        }
        if let Some(n) = num_classes {
            if rec.label >= n {
                return Err(parse_error(
                    path,
                    line,
                    format!("label {} outside 0..{n}", rec.label),
                ));
            }
        }
        if rec.id.is_empty() {
            rec.id = format!("line-{line}");
        }
        if !seen.insert(rec.id.clone()) {
            return Err(parse_error(path, line, format!("duplicate id {:?}", rec.id)));
        }
        records.push(rec);
    }
    Ok(Dataset::new(records))
}

pub fn save_dataset(path: impl AsRef<Path>, dataset: &Dataset, format: DatasetFormat) -> Result<()> {
    let path = path.as_ref();
    let bytes = match format {
        DatasetFormat::Jsonl => {
            let mut out = Vec::new();
            for r in &dataset.records {
                serde_json::to_writer(&mut out, r)?;
                out.push(b'\n');
            }
            out
        }
        DatasetFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in &dataset.records {
                w.serialize(CsvRow {
                    id: r.id.clone(),
                    text: r.text.clone(),
                    label: r.label,
                    rationale: r
                        .rationale
                        .iter()
                        .map(usize::to_string)
                        .collect::<Vec<_>>()
                        .join(" "),
                    split: r.split,
                })?;
            }
            w.into_inner().map_err(|e| Error::io(path, e.into_error()))?
        }
    };
    write_bytes(path, &bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

/// The JSON half of an SGW1 weight file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsManifest {
    pub format: String,
    pub config: ModelConfig,
    pub precision: Precision,
    pub blob: String,
    pub blob_bytes: usize,
    pub blob_sha256: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub vocab: Option<Vec<String>>,
}

fn encode_blob<T: Real>(weights: &EncoderWeights<T>) -> (Vec<u8>, Vec<TensorEntry>) {
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(weights.params().len());
    for (name, t) in weights.layout().names.iter().zip(weights.params()) {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: blob.len(),
        });
        for &v in t.data() {
            v.write_le(&mut blob);
        }
    }
    (blob, entries)
}

/// Content hash of a set of weights: configuration plus raw little-endian
/// values.
pub fn weights_hash<T: Real>(weights: &EncoderWeights<T>) -> Result<String> {
    let (blob, _) = encode_blob(weights);
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(weights.config())?);
    h.update(&blob);
    Ok(hex::encode(h.finalize()))
}

/// The blob path that pairs with a manifest path: `model.json` ↔ `model.bin`.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `<path>` (JSON manifest) and its `.bin` blob. Returns the blob hash.
pub fn save_weights<T: Real>(path: impl AsRef<Path>, weights: &EncoderWeights<T>, vocab: Option<&Vocab>) -> Result<String> {
    let path = path.as_ref();
    let (blob, tensors) = encode_blob(weights);
    let blob_file = blob_path(path);
    let blob_sha256 = sha256_hex(&blob);
    let manifest = WeightsManifest {
        format: WEIGHTS_FORMAT.into(),
        config: weights.config().clone(),
        precision: T::PRECISION,
        blob: blob_file
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Config(format!("bad weights path {}", path.display())))?
            .to_string(),
        blob_bytes: blob.len(),
        blob_sha256: blob_sha256.clone(),
        tensors,
        vocab: vocab.map(|v| v.tokens().to_vec()),
    };
    write_bytes(&blob_file, &blob)?;
    write_bytes(path, &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(blob_sha256)
}

fn decode_values<S: Real, T: Real>(bytes: &[u8]) -> Vec<T> {
    bytes
        .chunks_exact(S::PRECISION.bytes())
        .map(|c| T::of(S::read_le(c).as_f64()))
        .collect()
}

/// Reads an SGW1 file, checking the blob's size and hash before decoding.
/// Values stored at another precision are converted to `T`.
pub fn load_weights<T: Real>(path: impl AsRef<Path>) -> Result<(EncoderWeights<T>, Option<Vocab>)> {
    let path = path.as_ref();
    let manifest: WeightsManifest = serde_json::from_str(&read_string(path)?)?;
    if manifest.format != WEIGHTS_FORMAT {
        return Err(Error::Integrity(format!(
            "{} is not an {WEIGHTS_FORMAT} manifest",
            path.display()
        )));
    }
    let blob_file = path.with_file_name(&manifest.blob);
    let blob = fs::read(&blob_file).map_err(|e| Error::io(&blob_file, e))?;
    if blob.len() != manifest.blob_bytes {
        return Err(Error::Integrity(format!(
            "{} has {} bytes, manifest says {}",
            blob_file.display(),
            blob.len(),
            manifest.blob_bytes
        )));
    }
    let actual = sha256_hex(&blob);
    if actual != manifest.blob_sha256 {
        return Err(Error::Integrity(format!(
            "{} hash {actual} does not match manifest",
            blob_file.display()
        )));
    }
    let width = manifest.precision.bytes();
    let mut params = Vec::with_capacity(manifest.tensors.len());
    for (i, entry) in manifest.tensors.iter().enumerate() {
        let count: usize = entry.shape.iter().product();
        let end = manifest
            .tensors
            .get(i + 1)
            .map_or(blob.len(), |next| next.offset);
        if end < entry.offset || end - entry.offset != count * width || end > blob.len() {
            return Err(Error::Integrity(format!("tensor {} has a bad extent", entry.name)));
        }
        let bytes = &blob[entry.offset..end];
        let data = match manifest.precision {
            Precision::F32 => decode_values::<f32, T>(bytes),
            Precision::F64 => decode_values::<f64, T>(bytes),
        };
        params.push(Tensor::new(entry.shape.clone(), data)?);
    }
    let mut config = manifest.config;
    config.precision = T::PRECISION;
    let weights = EncoderWeights::from_params(config, params)?;
    if let Some((entry, name)) = manifest
        .tensors
        .iter()
        .zip(&weights.layout().names)
        .find(|(e, n)| &e.name != *n)
    {
        return Err(Error::Integrity(format!(
            "tensor {} found where {name} was expected",
            entry.name
        )));
    }
    let vocab = manifest.vocab.map(Vocab::from_tokens).transpose()?;
    Ok((weights, vocab))
}

/// Writes pretty JSON and returns the SHA-256 of the bytes written.
pub fn save_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<String> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_bytes(path.as_ref(), &bytes)?;
    Ok(sha256_hex(&bytes))
}

/// Reads JSON, first checking the file hash when one is expected.
pub fn load_json<T: DeserializeOwned>(path: impl AsRef<Path>, expected_sha256: Option<&str>) -> Result<T> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if let Some(expected) = expected_sha256 {
        let actual = sha256_hex(&bytes);
        if actual != expected {
            return Err(Error::Integrity(format!(
                "{} hash {actual} != expected {expected}",
                path.display()
            )));
        }
    }
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn save_report(path: impl AsRef<Path>, report: &EvalReport) -> Result<String> {
    save_json(path, report)
}

pub fn load_report(path: impl AsRef<Path>, expected_sha256: Option<&str>) -> Result<EvalReport> {
    let report: EvalReport = load_json(path, expected_sha256)?;
    report.verify()?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

impl Artifact {
    pub fn of(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Ok(Artifact {
            path: path.to_path_buf(),
            sha256: hash_file(path)?,
        })
    }
}

/// What a command read, what it wrote and the settings it ran with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    /// Seconds since the Unix epoch.
    pub started: u64,
    pub finished: u64,
    pub seeds: BTreeMap<String, u64>,
    /// Hashes of configuration values (model config, method list, masking
    /// specs and the like).
    pub config_hashes: BTreeMap<String, String>,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, Artifact>,
    pub outputs: BTreeMap<String, Artifact>,
}

pub fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        RunManifest {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            started: unix_now(),
            finished: 0,
            seeds: BTreeMap::new(),
            config_hashes: BTreeMap::new(),
            config: serde_json::Value::Null,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, role: &str, path: impl AsRef<Path>) -> Result<()> {
        self.inputs.insert(role.into(), Artifact::of(path)?);
        Ok(())
    }

    pub fn output(&mut self, role: &str, path: impl AsRef<Path>) -> Result<()> {
        self.outputs.insert(role.into(), Artifact::of(path)?);
        Ok(())
    }

    pub fn config_hash<T: Serialize>(&mut self, key: &str, value: &T) -> Result<()> {
        self.config_hashes.insert(key.into(), hash_json(value)?);
        Ok(())
    }

    /// Re-hashes every recorded file; any difference is an integrity error.
    pub fn verify(&self) -> Result<()> {
        for (role, a) in self.inputs.iter().chain(&self.outputs) {
            let actual = hash_file(&a.path)?;
            if actual != a.sha256 {
                return Err(Error::Integrity(format!(
                    "{role} {} changed: {actual} != {}",
                    a.path.display(),
                    a.sha256
                )));
            }
        }
        Ok(())
    }

    pub fn save(&mut self, path: impl AsRef<Path>) -> Result<String> {
        self.finished = unix_now();
        save_json(path, self)
    }
}
