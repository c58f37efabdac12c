//! The progressive pipeline: an axial synthesis generator followed by coronal
//! and sagittal refinement generators, trained one after another.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gan::{
    build_discriminator, build_generator, train_models, DiscriminatorConfig, GeneratorConfig,
    SlicePair, StageTrainConfig, TrainHistory,
};
use crate::metrics::psnr;
use crate::nn::{Model, Tensor};
use crate::volume::{extract_slice, stack_slices, Dims, Orientation, Slice, SliceStack, Volume};

/// MRI contrasts. Variant order fixes the source channel order (PD, then T2).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Contrast {
    Pd,
    T2,
    T1,
}

impl Contrast {
    pub fn name(self) -> &'static str {
        match self {
            Contrast::Pd => "pd",
            Contrast::T2 => "t2",
            Contrast::T1 => "t1",
        }
    }
}

impl fmt::Display for Contrast {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Contrast {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pd" => Ok(Contrast::Pd),
            "t2" => Ok(Contrast::T2),
            "t1" => Ok(Contrast::T1),
            other => Err(Error::Config(format!("unknown contrast '{other}'"))),
        }
    }
}

/// Co-registered source volumes of one subject and, for training/evaluation, its target.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectVolumes {
    pub id: String,
    pub sources: BTreeMap<Contrast, Volume>,
    pub target: Option<Volume>,
}

impl SubjectVolumes {
    pub fn new(id: &str, sources: BTreeMap<Contrast, Volume>, target: Option<Volume>) -> Result<Self> {
        let dims = sources
            .values()
            .next()
            .ok_or_else(|| Error::InvalidVolume(format!("subject {id} has no source volumes")))?
            .dims();
        for (c, v) in &sources {
            if v.dims() != dims {
                return Err(Error::DimMismatch(format!(
                    "subject {id}: {c} is {}, expected {dims}",
                    v.dims()
                )));
            }
        }
        if let Some(t) = &target {
            if t.dims() != dims {
                return Err(Error::DimMismatch(format!(
                    "subject {id}: target is {}, sources are {dims}",
                    t.dims()
                )));
            }
        }
        Ok(SubjectVolumes {
            id: id.to_string(),
            sources,
            target,
        })
    }

    pub fn dims(&self) -> Dims {
        self.sources.values().next().expect("non-empty sources").dims()
    }

    pub fn target(&self) -> Result<&Volume> {
        self.target
            .as_ref()
            .ok_or_else(|| Error::MissingTarget(self.id.clone()))
    }

    /// Source slices along `o` as a `[n_sources, rows, cols]` tensor.
    pub fn source_tensor(&self, o: Orientation, index: usize) -> Tensor<f32> {
        let slices: Vec<Slice> = self.sources.values().map(|v| extract_slice(v, o, index)).collect();
        slices_to_tensor(&slices)
    }
}

pub(crate) fn slices_to_tensor(slices: &[Slice]) -> Tensor<f32> {
    let (rows, cols) = (slices[0].rows, slices[0].cols);
    let mut data = Vec::with_capacity(slices.len() * rows * cols);
    for s in slices {
        data.extend_from_slice(&s.data);
    }
    Tensor::new(vec![slices.len(), rows, cols], data).expect("slice tensor shape")
}

fn tensor_to_slice(t: &Tensor<f32>) -> Slice {
    let shape = t.shape();
    let n = shape[1] * shape[2];
    Slice {
        rows: shape[1],
        cols: shape[2],
        data: t.data()[..n].iter().map(|v| v.clamp(0.0, 1.0)).collect(),
    }
}

fn check_channels(g: &Model<f32>, channels: usize, what: &str) -> Result<()> {
    let want = g.input_spec().channels;
    if want != channels {
        return Err(Error::Shape(format!(
            "{what}: generator expects {want} input channels, got {channels}"
        )));
    }
    Ok(())
}

/// Applies `g` slice-by-slice along `o` to per-slice input tensors and restacks.
fn slicewise(
    g: &Model<f32>,
    o: Orientation,
    dims: Dims,
    input: impl Fn(usize) -> Tensor<f32>,
) -> Result<Volume> {
    let n = o.slice_count(dims);
    let slices = (0..n)
        .map(|i| g.forward(&input(i)).map(|y| tensor_to_slice(&y)))
        .collect::<Result<Vec<_>>>()?;
    stack_slices(&SliceStack::new(o, slices)?, o)
}

/// Synthesizes the target along `o` from the source contrasts, one slice at a time.
pub fn synthesize_from_sources(g: &Model<f32>, s: &SubjectVolumes, o: Orientation) -> Result<Volume> {
    check_channels(g, s.sources.len(), "synthesis")?;
    slicewise(g, o, s.dims(), |i| s.source_tensor(o, i))
}

/// Stage 1: axial synthesis, stacked back into a volume.
pub fn synthesize_stage1(g_axial: &Model<f32>, s: &SubjectVolumes) -> Result<Volume> {
    synthesize_from_sources(g_axial, s, Orientation::Axial)
}

/// Refines `v` slice-by-slice along `o`.
pub fn refine_stage(g: &Model<f32>, v: &Volume, o: Orientation) -> Result<Volume> {
    check_channels(g, 1, "refinement")?;
    slicewise(g, o, v.dims(), |i| slices_to_tensor(&[extract_slice(v, o, i)]))
}

/// Refinement that also sees the source contrasts as extra channels.
pub fn refine_stage_with_sources(
    g: &Model<f32>,
    v: &Volume,
    s: &SubjectVolumes,
    o: Orientation,
) -> Result<Volume> {
    check_channels(g, 1 + s.sources.len(), "refinement with sources")?;
    if v.dims() != s.dims() {
        return Err(Error::DimMismatch(format!("volume {} vs sources {}", v.dims(), s.dims())));
    }
    slicewise(g, o, v.dims(), |i| refinement_input(v, s, o, i, true))
}

fn refinement_input(v: &Volume, s: &SubjectVolumes, o: Orientation, i: usize, with_sources: bool) -> Tensor<f32> {
    let mut slices = vec![extract_slice(v, o, i)];
    if with_sources {
        slices.extend(s.sources.values().map(|src| extract_slice(src, o, i)));
    }
    slices_to_tensor(&slices)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub master_seed: u64,
    /// First entry is the synthesis orientation, the rest are refinements.
    pub stages: Vec<Orientation>,
    pub epochs_per_stage: Vec<usize>,
    pub synthesis: GeneratorConfig,
    /// Width/depth of refinement generators; channel counts are derived.
    pub refinement: GeneratorConfig,
    pub discriminator_layers: usize,
    pub discriminator_base_channels: usize,
    /// Template for every stage; `epochs` and `seed` are overridden per stage.
    pub train: StageTrainConfig,
    /// Feed the source contrasts to refinement generators as extra channels.
    pub refine_with_sources: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            master_seed: 7,
            stages: Orientation::ALL.to_vec(),
            epochs_per_stage: vec![2, 1, 1],
            synthesis: GeneratorConfig::synthesis(2),
            refinement: GeneratorConfig::refinement(),
            discriminator_layers: 3,
            discriminator_base_channels: 16,
            train: StageTrainConfig::default(),
            refine_with_sources: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("pipeline needs at least one stage".into()));
        }
        for (i, o) in self.stages.iter().enumerate() {
            if self.stages[..i].contains(o) {
                return Err(Error::Config(format!("orientation {o} appears twice")));
            }
        }
        if self.epochs_per_stage.len() != self.stages.len() {
            return Err(Error::Config(format!(
                "{} stages but {} epoch counts",
                self.stages.len(),
                self.epochs_per_stage.len()
            )));
        }
        self.synthesis.validate()?;
        self.refinement_config(2).validate()?;
        self.train.validate()
    }

    /// Seed of stage `index`: `master_seed + index`.
    pub fn stage_seed(&self, index: usize) -> u64 {
        self.master_seed.wrapping_add(index as u64)
    }

    pub fn stage_train(&self, index: usize) -> StageTrainConfig {
        StageTrainConfig {
            epochs: self.epochs_per_stage[index],
            seed: self.stage_seed(index),
            ..self.train
        }
    }

    pub fn refinement_config(&self, sources: usize) -> GeneratorConfig {
        GeneratorConfig {
            in_channels: if self.refine_with_sources { 1 + sources } else { 1 },
            out_channels: 1,
            residual_mode: true,
            ..self.refinement
        }
    }

    pub fn discriminator_config(&self, condition_channels: usize) -> DiscriminatorConfig {
        DiscriminatorConfig {
            in_channels: condition_channels + 1,
            layers: self.discriminator_layers,
            base_channels: self.discriminator_base_channels,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageModel {
    pub orientation: Orientation,
    pub generator: Model<f32>,
    pub config: GeneratorConfig,
    pub seed: u64,
    pub epochs: usize,
}

/// The trained generators in stage order.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineModels {
    pub stages: Vec<StageModel>,
    pub refine_with_sources: bool,
}

impl PipelineModels {
    pub fn synthesis(&self) -> &StageModel {
        &self.stages[0]
    }

    pub fn stage(&self, o: Orientation) -> Option<&StageModel> {
        self.stages.iter().find(|s| s.orientation == o)
    }

    /// G_A
    pub fn g_axial(&self) -> Option<&Model<f32>> {
        self.stage(Orientation::Axial).map(|s| &s.generator)
    }

    /// G_C
    pub fn g_coronal(&self) -> Option<&Model<f32>> {
        self.stage(Orientation::Coronal).map(|s| &s.generator)
    }

    /// G_S
    pub fn g_sagittal(&self) -> Option<&Model<f32>> {
        self.stage(Orientation::Sagittal).map(|s| &s.generator)
    }

    pub fn validate(&self, sources: usize) -> Result<()> {
        let first = self
            .stages
            .first()
            .ok_or_else(|| Error::Config("pipeline has no stages".into()))?;
        if first.generator.input_spec().channels != sources {
            return Err(Error::Config(format!(
                "synthesis generator takes {} channels, subject has {sources} sources",
                first.generator.input_spec().channels
            )));
        }
        for s in &self.stages[1..] {
            if !s.config.residual_mode {
                return Err(Error::Config(format!("{} stage is not residual", s.orientation)));
            }
        }
        Ok(())
    }
}

fn apply_refinement(stage: &StageModel, v: &Volume, s: &SubjectVolumes, with_sources: bool) -> Result<Volume> {
    if with_sources {
        refine_stage_with_sources(&stage.generator, v, s, stage.orientation)
    } else {
        refine_stage(&stage.generator, v, stage.orientation)
    }
}

/// Runs every stage; returns the final volume and the output after each stage.
pub fn run_pipeline(m: &PipelineModels, s: &SubjectVolumes) -> Result<(Volume, Vec<Volume>)> {
    m.validate(s.sources.len())?;
    let first = m.synthesis();
    let mut current = synthesize_from_sources(&first.generator, s, first.orientation)?;
    let mut intermediates = vec![current.clone()];
    for stage in &m.stages[1..] {
        current = apply_refinement(stage, &current, s, m.refine_with_sources)?;
        intermediates.push(current.clone());
    }
    Ok((current, intermediates))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub orientation: Orientation,
    pub seed: u64,
    pub epochs: usize,
    pub pairs: usize,
    pub history: TrainHistory,
    /// Mean validation PSNR (dB) of the pipeline output after this stage.
    pub val_psnr: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineHistory {
    pub stages: Vec<StageRecord>,
}

fn mean_psnr(volumes: &[Volume], subjects: &[SubjectVolumes]) -> Result<Option<f64>> {
    if subjects.is_empty() {
        return Ok(None);
    }
    let mut sum = 0.0;
    for (v, s) in volumes.iter().zip(subjects) {
        sum += psnr(s.target()?, v, 1.0)?;
    }
    Ok(Some(sum / subjects.len() as f64))
}

/// Slice pairs for the synthesis stage: source slices -> target slice.
pub fn synthesis_pairs(subjects: &[SubjectVolumes], o: Orientation) -> Result<Vec<SlicePair>> {
    let mut pairs = Vec::new();
    for s in subjects {
        let target = s.target()?;
        for i in 0..o.slice_count(s.dims()) {
            pairs.push(SlicePair {
                condition: s.source_tensor(o, i),
                target: slices_to_tensor(&[extract_slice(target, o, i)]),
            });
        }
    }
    Ok(pairs)
}

fn refinement_pairs(
    current: &[Volume],
    subjects: &[SubjectVolumes],
    o: Orientation,
    with_sources: bool,
) -> Result<Vec<SlicePair>> {
    let mut pairs = Vec::new();
    for (v, s) in current.iter().zip(subjects) {
        let target = s.target()?;
        for i in 0..o.slice_count(v.dims()) {
            pairs.push(SlicePair {
                condition: refinement_input(v, s, o, i, with_sources),
                target: slices_to_tensor(&[extract_slice(target, o, i)]),
            });
        }
    }
    Ok(pairs)
}

fn check_split(name: &str, subjects: &[SubjectVolumes], sources: usize) -> Result<()> {
    for s in subjects {
        s.target()?;
        if s.sources.len() != sources {
            return Err(Error::DimMismatch(format!(
                "{name} subject {} has {} sources, expected {sources}",
                s.id,
                s.sources.len()
            )));
        }
    }
    Ok(())
}

/// Trains the synthesis stage alone. Shared with the cross-sectional baseline.
pub fn train_synthesis_stage(
    train: &[SubjectVolumes],
    cfg: &PipelineConfig,
) -> Result<(StageModel, TrainHistory, usize)> {
    cfg.validate()?;
    let first = train
        .first()
        .ok_or_else(|| Error::EmptyDataset("training split is empty".into()))?;
    let sources = first.sources.len();
    check_split("train", train, sources)?;
    let o = cfg.stages[0];
    let gcfg = GeneratorConfig {
        in_channels: sources,
        ..cfg.synthesis
    };
    let tcfg = cfg.stage_train(0);
    let pairs = synthesis_pairs(train, o)?;
    let g = build_generator(&gcfg, tcfg.generator_seed())?;
    let d = build_discriminator(&cfg.discriminator_config(sources), tcfg.discriminator_seed())?;
    let (g, _, history) = train_models(&pairs, &tcfg, g, d)?;
    let stage = StageModel {
        orientation: o,
        generator: g,
        config: gcfg,
        seed: tcfg.seed,
        epochs: tcfg.epochs,
    };
    Ok((stage, history, pairs.len()))
}

/// Trains the stages in order, freezing each before the next one starts.
pub fn train_pipeline(
    train: &[SubjectVolumes],
    val: &[SubjectVolumes],
    cfg: &PipelineConfig,
) -> Result<(PipelineModels, PipelineHistory)> {
    cfg.validate()?;
    let sources = train
        .first()
        .ok_or_else(|| Error::EmptyDataset("training split is empty".into()))?
        .sources
        .len();
    check_split("train", train, sources)?;
    check_split("val", val, sources)?;

    let (first, history, n_pairs) = train_synthesis_stage(train, cfg)?;
    let mut current: Vec<Volume> = train
        .iter()
        .map(|s| synthesize_from_sources(&first.generator, s, first.orientation))
        .collect::<Result<_>>()?;
    let mut val_current: Vec<Volume> = val
        .iter()
        .map(|s| synthesize_from_sources(&first.generator, s, first.orientation))
        .collect::<Result<_>>()?;
    let mut records = vec![StageRecord {
        orientation: first.orientation,
        seed: first.seed,
        epochs: first.epochs,
        pairs: n_pairs,
        history,
        val_psnr: mean_psnr(&val_current, val)?,
    }];
    let mut stages = vec![first];

    for (index, &o) in cfg.stages.iter().enumerate().skip(1) {
        let tcfg = cfg.stage_train(index);
        let gcfg = cfg.refinement_config(sources);
        let pairs = refinement_pairs(&current, train, o, cfg.refine_with_sources)?;
        let g = build_generator(&gcfg, tcfg.generator_seed())?;
        let d = build_discriminator(
            &cfg.discriminator_config(gcfg.in_channels),
            tcfg.discriminator_seed(),
        )?;
        let (g, _, history) = train_models(&pairs, &tcfg, g, d)?;
        let stage = StageModel {
            orientation: o,
            generator: g,
            config: gcfg,
            seed: tcfg.seed,
            epochs: tcfg.epochs,
        };
        current = current
            .iter()
            .zip(train)
            .map(|(v, s)| apply_refinement(&stage, v, s, cfg.refine_with_sources))
            .collect::<Result<_>>()?;
        val_current = val_current
            .iter()
            .zip(val)
            .map(|(v, s)| apply_refinement(&stage, v, s, cfg.refine_with_sources))
            .collect::<Result<_>>()?;
        records.push(StageRecord {
            orientation: o,
            seed: tcfg.seed,
            epochs: tcfg.epochs,
            pairs: pairs.len(),
            history,
            val_psnr: mean_psnr(&val_current, val)?,
        });
        stages.push(stage);
    }
    Ok((
        PipelineModels {
            stages,
            refine_with_sources: cfg.refine_with_sources,
        },
        PipelineHistory { stages: records },
    ))
}

/// Untrained pipeline whose refinement stages are exact identities.
pub fn identity_refinement_pipeline(synthesis: StageModel, cfg: &PipelineConfig) -> Result<PipelineModels> {
    let sources = synthesis.generator.input_spec().channels;
    let mut stages = vec![synthesis];
    for (index, &o) in cfg.stages.iter().enumerate().skip(1) {
        let gcfg = cfg.refinement_config(sources);
        stages.push(StageModel {
            orientation: o,
            generator: build_generator(&gcfg, cfg.stage_seed(index))?,
            config: gcfg,
            seed: cfg.stage_seed(index),
            epochs: 0,
        });
    }
    Ok(PipelineModels {
        stages,
        refine_with_sources: cfg.refine_with_sources,
    })
}
