//! On-disk formats.
//!
//! A dataset directory holds `meta.json`, `records.jsonl` (one record per
//! line), `descriptors.f32` (row-major little-endian f32, one row per record
//! in record order) and `labels.jsonl` (`{"query": id, "relevant": [ids]}`).
//!
//! A checkpoint is one line of JSON header followed by the parameters as
//! little-endian f32, tensor after tensor in the order listed in the header,
//! each row-major.
//!
//! A rankings file is a JSON header line followed by one
//! `{"query", "candidates", "scores"}` object per query.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use gcsa_core::dataset::{Dataset, Record, Split};
use gcsa_core::metrics::MetricsReport;
use gcsa_core::model::{Model, ModelConfig};
use gcsa_core::radio::EndpointRegistry;
use gcsa_core::rerank::Method;
use gcsa_core::retrieval::RetrievalContext;
use gcsa_core::synth::{Endpoint, WorldConfig};
use gcsa_core::tape::ParamStore;
use gcsa_core::tensor::Tensor2;
use gcsa_core::train::{TrainConfig, TrainReport};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const FORMAT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &str = "gcsa-checkpoint";
const RANKINGS_MAGIC: &str = "gcsa-rankings";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub descriptor_dim: usize,
    pub records: usize,
    pub registry: EndpointRegistry,
    /// Generator settings, for synthetic datasets.
    #[serde(default)]
    pub world: Option<WorldConfig>,
    #[serde(default)]
    pub endpoints: Vec<Endpoint>,
    /// Query and validation images without any relevant database image.
    #[serde(default)]
    pub unlabeled: Vec<u32>,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelLine {
    query: u32,
    relevant: BTreeSet<u32>,
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    Ok(BufWriter::new(
        fs::File::create(path).map_err(|e| CliError::io(path, e))?,
    ))
}

fn write_json_line<W: Write, S: Serialize>(w: &mut W, path: &Path, value: &S) -> Result<()> {
    serde_json::to_writer(&mut *w, value).map_err(|e| CliError::json(path, e))?;
    w.write_all(b"\n").map_err(|e| CliError::io(path, e))
}

fn read_json_lines<S: DeserializeOwned>(path: &Path) -> Result<Vec<S>> {
    let f = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

fn read_json<S: DeserializeOwned>(path: &Path) -> Result<S> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::json(path, e))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::json(path, e))?;
    w.write_all(b"\n")
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(path, e))
}

fn f32_bytes(values: &[f32], out: &mut Vec<u8>) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn f32_values(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub fn write_labels(path: &Path, labels: &BTreeMap<u32, BTreeSet<u32>>) -> Result<()> {
    let mut w = create(path)?;
    for (&query, relevant) in labels {
        write_json_line(
            &mut w,
            path,
            &LabelLine {
                query,
                relevant: relevant.clone(),
            },
        )?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Reads `labels.jsonl`, or the labels of a dataset directory.
pub fn read_labels(path: &Path) -> Result<BTreeMap<u32, BTreeSet<u32>>> {
    let file = if path.is_dir() {
        path.join("labels.jsonl")
    } else {
        path.to_path_buf()
    };
    let mut out = BTreeMap::new();
    for l in read_json_lines::<LabelLine>(&file)? {
        if out.insert(l.query, l.relevant).is_some() {
            return Err(CliError::Data(format!(
                "{}: query {} listed twice",
                file.display(),
                l.query
            )));
        }
    }
    Ok(out)
}

pub fn write_dataset(dir: &Path, ds: &Dataset, meta: &DatasetMeta) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    write_json(&dir.join("meta.json"), meta)?;
    let path = dir.join("records.jsonl");
    let mut w = create(&path)?;
    for r in &ds.records {
        write_json_line(&mut w, &path, r)?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    let mut bytes = Vec::new();
    f32_bytes(ds.descriptors.data(), &mut bytes);
    let path = dir.join("descriptors.f32");
    fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
    write_labels(&dir.join("labels.jsonl"), &ds.labels)
}

pub fn read_dataset(dir: &Path) -> Result<(Dataset, DatasetMeta)> {
    let meta: DatasetMeta = read_json(&dir.join("meta.json"))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(CliError::Data(format!(
            "{}: unsupported format version {}",
            dir.display(),
            meta.format_version
        )));
    }
    let records: Vec<Record> = read_json_lines(&dir.join("records.jsonl"))?;
    let path = dir.join("descriptors.f32");
    let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
    let d = meta.descriptor_dim;
    if records.len() != meta.records || bytes.len() != records.len() * d * 4 {
        return Err(CliError::Data(format!(
            "{}: expected {} records of dimension {d}, found {} records and {} descriptor bytes",
            dir.display(),
            meta.records,
            records.len(),
            bytes.len()
        )));
    }
    let descriptors = Tensor2::from_vec(records.len(), d, f32_values(&bytes))?;
    let ds = Dataset {
        records,
        descriptors,
        registry: meta.registry.clone(),
        labels: read_labels(&dir.join("labels.jsonl"))?,
    };
    ds.validate()?;
    Ok((ds, meta))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub params: Vec<ParamInfo>,
    /// Schedule the parameters were trained with.
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub report: Option<TrainReport>,
    pub config_hash: String,
    pub seed: u64,
}

impl CheckpointHeader {
    pub fn new(
        model: &Model<f32>,
        train: Option<TrainConfig>,
        report: Option<TrainReport>,
        config_hash: &str,
        seed: u64,
    ) -> Self {
        Self {
            format: CHECKPOINT_MAGIC.into(),
            version: FORMAT_VERSION,
            model: model.config().clone(),
            params: model
                .store
                .entries()
                .iter()
                .map(|e| ParamInfo {
                    name: e.name.clone(),
                    rows: e.value.rows(),
                    cols: e.value.cols(),
                })
                .collect(),
            train,
            report,
            config_hash: config_hash.into(),
            seed,
        }
    }
}

pub fn encode_checkpoint(header: &CheckpointHeader, store: &ParamStore<f32>) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec(header).map_err(|e| CliError::Data(e.to_string()))?;
    out.push(b'\n');
    for (info, e) in header.params.iter().zip(store.entries()) {
        if info.name != e.name || (info.rows, info.cols) != e.value.shape() {
            return Err(CliError::Data(format!(
                "header entry {} does not describe parameter {}",
                info.name, e.name
            )));
        }
        f32_bytes(e.value.data(), &mut out);
    }
    if header.params.len() != store.len() {
        return Err(CliError::Data(
            "header and store list different parameter counts".into(),
        ));
    }
    Ok(out)
}

/// Parses a checkpoint and checks it against the model layout its header
/// declares.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, Model<f32>)> {
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CliError::Data("checkpoint has no header line".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..split])
        .map_err(|e| CliError::Data(format!("checkpoint header: {e}")))?;
    if header.format != CHECKPOINT_MAGIC || header.version != FORMAT_VERSION {
        return Err(CliError::Data(format!(
            "not a version {FORMAT_VERSION} checkpoint"
        )));
    }
    let blob = &bytes[split + 1..];
    let expected: usize = header.params.iter().map(|p| p.rows * p.cols * 4).sum();
    if blob.len() != expected {
        return Err(CliError::Data(format!(
            "checkpoint blob has {} bytes, header describes {expected}",
            blob.len()
        )));
    }
    let mut store = ParamStore::new();
    let mut at = 0;
    for p in &header.params {
        let n = p.rows * p.cols * 4;
        store.add(
            p.name.clone(),
            Tensor2::from_vec(p.rows, p.cols, f32_values(&blob[at..at + n]))?,
        );
        at += n;
    }
    let model = Model::from_store(header.model.clone(), store)?;
    Ok((header, model))
}

pub fn write_checkpoint(path: &Path, header: &CheckpointHeader, model: &Model<f32>) -> Result<()> {
    let bytes = encode_checkpoint(header, &model.store)?;
    let mut w = create(path)?;
    w.write_all(&bytes)
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, Model<f32>)> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankingsHeader {
    pub format: String,
    pub version: u32,
    pub method: Method,
    pub split: Split,
    pub config_hash: String,
    pub seed: u64,
}

impl RankingsHeader {
    pub fn new(method: Method, split: Split, config_hash: &str, seed: u64) -> Self {
        Self {
            format: RANKINGS_MAGIC.into(),
            version: FORMAT_VERSION,
            method,
            split,
            config_hash: config_hash.into(),
            seed,
        }
    }
}

pub fn write_rankings(
    path: &Path,
    header: &RankingsHeader,
    contexts: &[RetrievalContext],
) -> Result<()> {
    let mut w = create(path)?;
    write_json_line(&mut w, path, header)?;
    for c in contexts {
        write_json_line(&mut w, path, c)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_rankings(path: &Path) -> Result<(RankingsHeader, Vec<RetrievalContext>)> {
    let f = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = BufReader::new(f).lines();
    let first = lines
        .next()
        .ok_or_else(|| CliError::Data(format!("{}: empty rankings file", path.display())))?
        .map_err(|e| CliError::io(path, e))?;
    let header: RankingsHeader =
        serde_json::from_str(&first).map_err(|e| CliError::json(path, e))?;
    if header.format != RANKINGS_MAGIC {
        return Err(CliError::Data(format!(
            "{}: not a rankings file",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let c: RetrievalContext = serde_json::from_str(&line)
            .map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), i + 2)))?;
        if c.candidates.len() != c.scores.len() {
            return Err(CliError::Data(format!(
                "{}:{}: candidates and scores differ in length",
                path.display(),
                i + 2
            )));
        }
        out.push(c);
    }
    Ok((header, out))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub config_hash: String,
    pub seed: u64,
    pub method: Method,
    pub split: Split,
    #[serde(flatten)]
    pub report: MetricsReport,
}

pub fn write_metrics(path: &Path, metrics: &MetricsFile) -> Result<()> {
    write_json(path, metrics)
}

pub fn read_metrics(path: &Path) -> Result<MetricsFile> {
    read_json(path)
}
