//! Model checkpoints and pipeline checkpoint directories.
//!
//! A checkpoint file is `b"OSCK"`, a `u8` version, a `u32` length-prefixed JSON
//! header (graph, head, seed, config echo), a `u32` tensor count, and then each
//! parameter tensor as `u32` rank, `u32` extents and little-endian `f32` values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gan::GeneratorConfig;
use crate::nn::{Head, InputSpec, LayerSpec, Model, Tensor};
use crate::pipeline::{PipelineModels, StageModel};
use crate::volume::Orientation;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"OSCK";
pub const CHECKPOINT_VERSION: u8 = 1;
pub const PIPELINE_MANIFEST: &str = "manifest.json";
pub const PIPELINE_FORMAT: &str = "orthosynth-pipeline/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    input: InputSpec,
    head: Head,
    seed: u64,
    layers: Vec<LayerSpec>,
    config: serde_json::Value,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

fn put_u32(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Format(format!("{n} does not fit in u32")))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

pub fn encode_model(m: &Model<f32>) -> Result<Vec<u8>> {
    let header = Header {
        input: m.input_spec(),
        head: m.head(),
        seed: m.seed(),
        layers: m.specs(),
        config: m.config.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    put_u32(&mut out, json.len())?;
    out.extend_from_slice(&json);
    let params = m.params();
    put_u32(&mut out, params.len())?;
    for t in params {
        put_u32(&mut out, t.shape().len())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_model(bytes: &[u8]) -> Result<Model<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(&CHECKPOINT_MAGIC[..]) {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.take(1)?[0];
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32()?;
    let header: Header = serde_json::from_slice(r.take(len)?)?;
    let count = r.u32()?;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint",
            bytes.len() - r.pos
        )));
    }
    let mut m = Model::new(header.input, header.layers, header.head, header.seed)?;
    m.set_params(tensors)?;
    m.config = header.config;
    Ok(m)
}

pub fn save_model(m: &Model<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_model(m)?).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<Model<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub orientation: Orientation,
    pub file: String,
    pub seed: u64,
    pub epochs: usize,
    pub config: GeneratorConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub format: String,
    pub refine_with_sources: bool,
    pub stages: Vec<StageEntry>,
}

pub fn stage_file(o: Orientation) -> String {
    format!("g_{}.ckpt", o.name())
}

/// Writes one checkpoint per stage plus a manifest into `dir`.
pub fn save_pipeline(m: &PipelineModels, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut stages = Vec::new();
    for s in &m.stages {
        let file = stage_file(s.orientation);
        save_model(&s.generator, &dir.join(&file))?;
        stages.push(StageEntry {
            orientation: s.orientation,
            file,
            seed: s.seed,
            epochs: s.epochs,
            config: s.config,
        });
    }
    let manifest = PipelineManifest {
        format: PIPELINE_FORMAT.into(),
        refine_with_sources: m.refine_with_sources,
        stages,
    };
    let p = dir.join(PIPELINE_MANIFEST);
    std::fs::write(&p, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&p, e))
}

pub fn load_pipeline(dir: &Path) -> Result<PipelineModels> {
    let p = dir.join(PIPELINE_MANIFEST);
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let manifest: PipelineManifest = serde_json::from_str(&text)?;
    if manifest.format != PIPELINE_FORMAT {
        return Err(Error::Format(format!("unknown pipeline format '{}'", manifest.format)));
    }
    let stages = manifest
        .stages
        .into_iter()
        .map(|e| {
            Ok(StageModel {
                orientation: e.orientation,
                generator: load_model(&dir.join(&e.file))?,
                config: e.config,
                seed: e.seed,
                epochs: e.epochs,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if stages.is_empty() {
        return Err(Error::Format("pipeline manifest lists no stages".into()));
    }
    Ok(PipelineModels {
        stages,
        refine_with_sources: manifest.refine_with_sources,
    })
}
