//! Comparison methods: the cross-sectional 2D-GAN (the pipeline's axial stage
//! on its own) and a small volumetric 3D-GAN.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gan::{
    build_patch_discriminator, build_unet, train_models, DiscriminatorConfig, GeneratorConfig,
    SlicePair, StageTrainConfig, TrainHistory,
};
use crate::metrics::psnr;
use crate::nn::{Model, Tensor};
use crate::pipeline::{synthesize_stage1, train_synthesis_stage, PipelineConfig, SubjectVolumes};
use crate::volume::Volume;

/// Largest extent per axis the volumetric baseline accepts.
pub const MAX_3D_EXTENT: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineHistory {
    pub train: TrainHistory,
    pub val_psnr: Option<f64>,
}

fn mean_val_psnr(val: &[SubjectVolumes], f: impl Fn(&SubjectVolumes) -> Result<Volume>) -> Result<Option<f64>> {
    if val.is_empty() {
        return Ok(None);
    }
    let mut sum = 0.0;
    for s in val {
        sum += psnr(s.target()?, &f(s)?, 1.0)?;
    }
    Ok(Some(sum / val.len() as f64))
}

/// Cross-sectional baseline: exactly the pipeline's first stage.
pub fn train_2dgan(
    train: &[SubjectVolumes],
    val: &[SubjectVolumes],
    cfg: &PipelineConfig,
) -> Result<(Model<f32>, BaselineHistory)> {
    let (stage, history, _) = train_synthesis_stage(train, cfg)?;
    let g = stage.generator;
    let val_psnr = mean_val_psnr(val, |s| synthesize_stage1(&g, s))?;
    Ok((g, BaselineHistory { train: history, val_psnr }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baseline3DConfig {
    pub base_channels: usize,
    pub depth: usize,
    pub discriminator_layers: usize,
    pub discriminator_base_channels: usize,
    pub train: StageTrainConfig,
}

impl Default for Baseline3DConfig {
    fn default() -> Self {
        Baseline3DConfig {
            base_channels: 8,
            depth: 2,
            discriminator_layers: 3,
            discriminator_base_channels: 8,
            train: StageTrainConfig {
                batch_size: 1,
                ..StageTrainConfig::default()
            },
        }
    }
}

impl Baseline3DConfig {
    pub fn generator_config(&self, sources: usize) -> GeneratorConfig {
        GeneratorConfig {
            in_channels: sources,
            out_channels: 1,
            base_channels: self.base_channels,
            depth: self.depth,
            residual_mode: false,
        }
    }

    pub fn discriminator_config(&self, sources: usize) -> DiscriminatorConfig {
        DiscriminatorConfig {
            in_channels: sources + 1,
            layers: self.discriminator_layers,
            base_channels: self.discriminator_base_channels,
        }
    }
}

fn volume_tensor(vols: &[&Volume]) -> Tensor<f32> {
    let d = vols[0].dims();
    let mut data = Vec::with_capacity(vols.len() * d.len());
    for v in vols {
        data.extend_from_slice(v.data());
    }
    Tensor::new(vec![vols.len(), d.nz, d.ny, d.nx], data).expect("volume tensor shape")
}

fn source_tensor(s: &SubjectVolumes) -> Result<Tensor<f32>> {
    let d = s.dims();
    if d.nz.max(d.ny).max(d.nx) > MAX_3D_EXTENT {
        return Err(Error::InvalidVolume(format!(
            "{d} exceeds the {MAX_3D_EXTENT}^3 bound of the volumetric baseline"
        )));
    }
    Ok(volume_tensor(&s.sources.values().collect::<Vec<_>>()))
}

/// Volumetric baseline trained on whole volumes in one shot.
pub fn train_3dgan(
    train: &[SubjectVolumes],
    val: &[SubjectVolumes],
    cfg: &Baseline3DConfig,
) -> Result<(Model<f32>, BaselineHistory)> {
    let sources = train
        .first()
        .ok_or_else(|| Error::EmptyDataset("training split is empty".into()))?
        .sources
        .len();
    let pairs = train
        .iter()
        .map(|s| {
            Ok(SlicePair {
                condition: source_tensor(s)?,
                target: volume_tensor(&[s.target()?]),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let g = build_unet(3, &cfg.generator_config(sources), cfg.train.generator_seed())?;
    let d = build_patch_discriminator(3, &cfg.discriminator_config(sources), cfg.train.discriminator_seed())?;
    let (g, _, history) = train_models(&pairs, &cfg.train, g, d)?;
    let val_psnr = mean_val_psnr(val, |s| synthesize_3dgan(&g, s))?;
    Ok((g, BaselineHistory { train: history, val_psnr }))
}

/// One forward pass over the stacked source volumes.
pub fn synthesize_3dgan(m: &Model<f32>, s: &SubjectVolumes) -> Result<Volume> {
    let x = source_tensor(s)?;
    if m.input_spec().rank != 3 || m.input_spec().channels != x.channels() {
        return Err(Error::Shape(format!(
            "volumetric model expects {} channels of rank {}, subject has {} sources",
            m.input_spec().channels,
            m.input_spec().rank,
            x.channels()
        )));
    }
    let y = m.forward(&x)?;
    let n = s.dims().len();
    Volume::new(s.dims(), y.data()[..n].iter().map(|v| v.clamp(0.0, 1.0)).collect())
}
