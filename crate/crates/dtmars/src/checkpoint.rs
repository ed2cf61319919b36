//! Versioned binary checkpoints and line-delimited logs.
//!
//! File layout: `DTMARSCK`, u32 version, u64 header length, JSON header,
//! then every parameter tensor as little-endian f32 in header order.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use dtmars_core::detector::{Detector, DetectorConfig};
use dtmars_core::gan::{Discriminator, DiscriminatorConfig, GanBundle, Generator, GeneratorConfig, LossWeights};
use dtmars_core::nn::{Module, ParamSet};
use dtmars_core::tensor::Tensor;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result, Stage, StageExt};

pub const MAGIC: &[u8; 8] = b"DTMARSCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub name: String,
    pub tensors: Vec<TensorSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Detector,
    Gan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: CheckpointKind,
    /// Architecture settings needed to rebuild the networks.
    pub architecture: serde_json::Value,
    /// Training hyperparameters that produced the weights.
    pub hyper: serde_json::Value,
    pub seed: u64,
    /// Content hash of the training dataset.
    pub dataset_hash: String,
    pub step: u64,
    pub nets: Vec<NetSpec>,
}

fn ck_err(path: &Path, msg: impl std::fmt::Display) -> PipelineError {
    PipelineError::runtime(Stage::Checkpoint, format!("{}: {msg}", path.display()))
}

fn spec(name: &str, ps: &ParamSet<f32>) -> NetSpec {
    NetSpec {
        name: name.into(),
        tensors: ps
            .names()
            .iter()
            .zip(ps.tensors())
            .map(|(n, t)| TensorSpec { name: n.clone(), shape: t.shape().to_vec() })
            .collect(),
    }
}

/// Writes a checkpoint; the file appears atomically.
pub fn write_checkpoint(path: &Path, mut header: CheckpointHeader, nets: &[(&str, &ParamSet<f32>)]) -> Result<()> {
    header.nets = nets.iter().map(|(n, ps)| spec(n, ps)).collect();
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::with_capacity(json.len() + 20);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, ps) in nets {
        for t in ps.tensors() {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| PipelineError::io(Stage::Checkpoint, dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf).map_err(|e| PipelineError::io(Stage::Checkpoint, &tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| PipelineError::io(Stage::Checkpoint, path, e))
}

/// Reads a checkpoint into its header and one parameter set per network.
pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, Vec<ParamSet<f32>>)> {
    let mut f = fs::File::open(path).map_err(|e| PipelineError::io(Stage::Checkpoint, path, e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| PipelineError::io(Stage::Checkpoint, path, e))?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(ck_err(path, "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(ck_err(path, format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| ck_err(path, "truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| ck_err(path, e))?;
    let mut payload = bytes[20 + hlen..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let mut sets = Vec::with_capacity(header.nets.len());
    for net in &header.nets {
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for t in &net.tensors {
            let n: usize = t.shape.iter().product();
            let data: Vec<f32> = payload.by_ref().take(n).collect();
            if data.len() != n {
                return Err(ck_err(path, "truncated payload"));
            }
            names.push(t.name.clone());
            tensors.push(Tensor::from_vec(&t.shape, data));
        }
        sets.push(ParamSet::from_parts(names, tensors));
    }
    if payload.next().is_some() || (bytes.len() - 20 - hlen) % 4 != 0 {
        return Err(ck_err(path, "trailing bytes after payload"));
    }
    Ok((header, sets))
}

fn restore<M: Module<f32>>(mut net: M, saved: &ParamSet<f32>, path: &Path) -> Result<M> {
    net.params_mut().load(saved).map_err(|e| ck_err(path, e))?;
    Ok(net)
}

pub fn save_detector(
    path: &Path,
    det: &Detector<f32>,
    hyper: &impl Serialize,
    seed: u64,
    dataset_hash: &str,
) -> Result<()> {
    let header = CheckpointHeader {
        kind: CheckpointKind::Detector,
        architecture: serde_json::to_value(det.config).expect("config serializes"),
        hyper: serde_json::to_value(hyper).expect("hyper serializes"),
        seed,
        dataset_hash: dataset_hash.into(),
        step: 0,
        nets: Vec::new(),
    };
    write_checkpoint(path, header, &[("detector", det.params())])
}

pub fn load_detector(path: &Path) -> Result<(Detector<f32>, CheckpointHeader)> {
    let (header, sets) = read_checkpoint(path)?;
    if header.kind != CheckpointKind::Detector || sets.len() != 1 {
        return Err(ck_err(path, "not a detector checkpoint"));
    }
    let config: DetectorConfig = serde_json::from_value(header.architecture.clone()).map_err(|e| ck_err(path, e))?;
    let det = restore(Detector::new(config, 0), &sets[0], path)?;
    Ok((det, header))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct GanArchitecture {
    generator: GeneratorConfig,
    discriminator: DiscriminatorConfig,
    weights: LossWeights,
}

/// Saves all four networks, loss weights and step count. Replay pools are
/// not persisted.
pub fn save_gan(path: &Path, bundle: &GanBundle<f32>, schedule: &impl Serialize, seed: u64, dataset_hash: &str) -> Result<()> {
    let arch = GanArchitecture {
        generator: bundle.g_r.config,
        discriminator: bundle.d_r.config,
        weights: bundle.weights,
    };
    let header = CheckpointHeader {
        kind: CheckpointKind::Gan,
        architecture: serde_json::to_value(arch).expect("architecture serializes"),
        hyper: serde_json::to_value(schedule).expect("schedule serializes"),
        seed,
        dataset_hash: dataset_hash.into(),
        step: bundle.step,
        nets: Vec::new(),
    };
    write_checkpoint(
        path,
        header,
        &[("g_r", bundle.g_r.params()), ("g_s", bundle.g_s.params()), ("d_r", bundle.d_r.params()), ("d_s", bundle.d_s.params())],
    )
}

pub fn load_gan(path: &Path, pool_capacity: usize) -> Result<(GanBundle<f32>, CheckpointHeader)> {
    let (header, sets) = read_checkpoint(path)?;
    if header.kind != CheckpointKind::Gan || sets.len() != 4 {
        return Err(ck_err(path, "not a GAN checkpoint"));
    }
    let arch: GanArchitecture = serde_json::from_value(header.architecture.clone()).map_err(|e| ck_err(path, e))?;
    let mut bundle = GanBundle::new(arch.generator, arch.discriminator, arch.weights, pool_capacity, 0);
    bundle.g_r = restore(Generator::new(arch.generator, 0), &sets[0], path)?;
    bundle.g_s = restore(Generator::new(arch.generator, 0), &sets[1], path)?;
    bundle.d_r = restore(Discriminator::new(arch.discriminator, 0), &sets[2], path)?;
    bundle.d_s = restore(Discriminator::new(arch.discriminator, 0), &sets[3], path)?;
    bundle.step = header.step;
    bundle.weights.validate().stage(Stage::Checkpoint)?;
    Ok((bundle, header))
}

/// Appends records to a line-delimited JSON log.
pub fn append_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| PipelineError::io(Stage::Report, path, e))?;
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    f.write_all(out.as_bytes()).map_err(|e| PipelineError::io(Stage::Report, path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| PipelineError::io(Stage::Load, path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| PipelineError::io(Stage::Load, path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| PipelineError::Validation(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}
