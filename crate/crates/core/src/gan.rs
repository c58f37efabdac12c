//! Generators, conditional patch discriminators, LSGAN + L1 objectives and the
//! single-stage adversarial training loop shared by every stage and baseline.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    lsgan, AdamConfig, AdamState, Gradients, Head, InputSpec, LayerSpec, LossSpec, Model, Tensor,
    LEAKY_RELU_SLOPE,
};

/// Scale of the `tanh` correction added by residual generators.
pub const RESIDUAL_SCALE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    /// Output `clamp01(input[0] + 0.5 * tanh(head))` with a zero-initialized head.
    pub residual_mode: bool,
}

impl GeneratorConfig {
    /// Stage-1 synthesis generator over `sources` input contrasts.
    pub fn synthesis(sources: usize) -> Self {
        GeneratorConfig {
            in_channels: sources,
            out_channels: 1,
            base_channels: 16,
            depth: 3,
            residual_mode: false,
        }
    }

    /// Single-channel residual refinement generator.
    pub fn refinement() -> Self {
        GeneratorConfig {
            in_channels: 1,
            out_channels: 1,
            base_channels: 16,
            depth: 3,
            residual_mode: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("generator needs at least one input and output channel".into()));
        }
        if self.base_channels < 4 {
            return Err(Error::Config(format!("base_channels must be >= 4, got {}", self.base_channels)));
        }
        if self.depth == 0 {
            return Err(Error::Config("generator depth must be >= 1".into()));
        }
        // Extra input channels (e.g. concatenated sources) are allowed; the
        // residual path always uses the leading channels.
        if self.residual_mode && self.in_channels < self.out_channels {
            return Err(Error::Config(
                "residual generators need in_channels >= out_channels".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    /// Condition channels plus one candidate channel.
    pub in_channels: usize,
    pub layers: usize,
    pub base_channels: usize,
}

impl DiscriminatorConfig {
    pub fn conditional(condition_channels: usize) -> Self {
        DiscriminatorConfig {
            in_channels: condition_channels + 1,
            layers: 3,
            base_channels: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels < 2 {
            return Err(Error::Config(
                "conditional discriminator needs condition and candidate channels".into(),
            ));
        }
        if self.layers == 0 || self.base_channels == 0 {
            return Err(Error::Config("discriminator needs >= 1 layer and channel".into()));
        }
        Ok(())
    }
}

/// Layer list of a U-Net with `depth` stride-2 levels, for 2D or 3D inputs.
pub(crate) fn unet_specs(rank: usize, cfg: &GeneratorConfig) -> Vec<LayerSpec> {
    let conv = |i: usize, o: usize, k: usize, s: usize, bias: bool| {
        if rank == 3 {
            LayerSpec::Conv3d { in_channels: i, out_channels: o, kernel: k, stride: s, padding: k / 2, bias }
        } else {
            LayerSpec::Conv2d { in_channels: i, out_channels: o, kernel: k, stride: s, padding: k / 2, bias }
        }
    };
    let up = |i: usize, o: usize| {
        if rank == 3 {
            LayerSpec::UpsampleConv3d { in_channels: i, out_channels: o, kernel: 3, bias: false }
        } else {
            LayerSpec::UpsampleConv2d { in_channels: i, out_channels: o, kernel: 3, bias: false }
        }
    };
    let lrelu = LayerSpec::LeakyRelu { slope: LEAKY_RELU_SLOPE };
    let width = |level: usize| cfg.base_channels << level.min(3);

    let mut specs = vec![conv(cfg.in_channels, width(0), 3, 1, true), lrelu.clone()];
    // (layer id, channels) of each encoder level output.
    let mut skips = vec![(specs.len() - 1, width(0))];
    for level in 1..=cfg.depth {
        specs.push(conv(width(level - 1), width(level), 3, 2, false));
        specs.push(LayerSpec::InstanceNorm { channels: width(level) });
        specs.push(lrelu.clone());
        skips.push((specs.len() - 1, width(level)));
    }
    let mut ch = width(cfg.depth);
    for level in (0..cfg.depth).rev() {
        let (source, skip_ch) = skips[level];
        specs.push(up(ch, skip_ch));
        specs.push(LayerSpec::InstanceNorm { channels: skip_ch });
        specs.push(LayerSpec::Relu);
        specs.push(LayerSpec::SkipConcat { source, channels: skip_ch });
        ch = 2 * skip_ch;
    }
    specs.push(conv(ch, cfg.out_channels, 3, 1, true));
    specs.push(if cfg.residual_mode { LayerSpec::Tanh } else { LayerSpec::Sigmoid });
    specs
}

pub(crate) fn build_unet(rank: usize, cfg: &GeneratorConfig, seed: u64) -> Result<Model<f32>> {
    cfg.validate()?;
    let input = InputSpec {
        channels: cfg.in_channels,
        rank,
        spatial_multiple: 1 << cfg.depth,
    };
    let head = if cfg.residual_mode {
        Head::Residual { scale: RESIDUAL_SCALE }
    } else {
        Head::Plain
    };
    let mut model = Model::new(input, unet_specs(rank, cfg), head, seed)?;
    if cfg.residual_mode {
        zero_output_head(&mut model);
    }
    model.config = serde_json::json!({ "generator": cfg, "rank": rank });
    Ok(model)
}

/// Zeroes the final convolution, turning a residual generator into the identity map.
pub fn zero_output_head(model: &mut Model<f32>) {
    if let Some(layer) = model.layers_mut().iter_mut().rev().find(|l| l.weight.is_some()) {
        layer.weight.iter_mut().chain(layer.bias.iter_mut()).for_each(|t| t.data_mut().fill(0.0));
    }
}

/// 2D U-Net generator.
pub fn build_generator(cfg: &GeneratorConfig, seed: u64) -> Result<Model<f32>> {
    build_unet(2, cfg, seed)
}

pub(crate) fn patch_specs(rank: usize, cfg: &DiscriminatorConfig) -> Vec<LayerSpec> {
    let conv = |i: usize, o: usize, bias: bool| {
        if rank == 3 {
            LayerSpec::Conv3d { in_channels: i, out_channels: o, kernel: 3, stride: 2, padding: 1, bias }
        } else {
            LayerSpec::Conv2d { in_channels: i, out_channels: o, kernel: 3, stride: 2, padding: 1, bias }
        }
    };
    let mut specs = Vec::new();
    let mut ch = cfg.in_channels;
    for i in 0..cfg.layers - 1 {
        let out = cfg.base_channels << i.min(3);
        specs.push(conv(ch, out, i == 0));
        if i > 0 {
            specs.push(LayerSpec::InstanceNorm { channels: out });
        }
        specs.push(LayerSpec::LeakyRelu { slope: LEAKY_RELU_SLOPE });
        ch = out;
    }
    specs.push(conv(ch, 1, true));
    specs
}

pub(crate) fn build_patch_discriminator(
    rank: usize,
    cfg: &DiscriminatorConfig,
    seed: u64,
) -> Result<Model<f32>> {
    cfg.validate()?;
    let input = InputSpec {
        channels: cfg.in_channels,
        rank,
        spatial_multiple: 1 << cfg.layers,
    };
    let mut model = Model::new(input, patch_specs(rank, cfg), Head::Plain, seed)?;
    model.config = serde_json::json!({ "discriminator": cfg, "rank": rank });
    Ok(model)
}

/// Conditional 2D patch discriminator; each stride-2 layer halves the score map.
pub fn build_discriminator(cfg: &DiscriminatorConfig, seed: u64) -> Result<Model<f32>> {
    build_patch_discriminator(2, cfg, seed)
}

/// `0.5 * mean((d_fake - 1)^2) + lambda_pix * mean|fake - target|`
pub fn generator_loss(
    d_fake: &Tensor<f32>,
    fake: &Tensor<f32>,
    target: &Tensor<f32>,
    lambda_pix: f64,
) -> Result<f64> {
    let (l1, _) = LossSpec::L1.eval(fake, target)?;
    Ok(lsgan(d_fake, 1.0).0 + lambda_pix * l1)
}

/// `0.5 * mean((d_real - 1)^2) + 0.5 * mean(d_fake^2)`
pub fn discriminator_loss(d_real: &Tensor<f32>, d_fake: &Tensor<f32>) -> Result<f64> {
    if d_real.shape() != d_fake.shape() {
        return Err(Error::Shape(format!(
            "discriminator outputs differ: {:?} vs {:?}",
            d_real.shape(),
            d_fake.shape()
        )));
    }
    Ok(lsgan(d_real, 1.0).0 + lsgan(d_fake, 0.0).0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda_pix: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Stop after this many optimizer steps, even mid-epoch.
    pub max_iterations: Option<usize>,
}

impl Default for StageTrainConfig {
    fn default() -> Self {
        StageTrainConfig {
            epochs: 1,
            batch_size: 8,
            lambda_pix: 100.0,
            adam: AdamConfig::default(),
            seed: 0,
            max_iterations: None,
        }
    }
}

impl StageTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lambda_pix.is_finite() && self.lambda_pix >= 0.0) {
            return Err(Error::Config(format!("lambda_pix must be >= 0, got {}", self.lambda_pix)));
        }
        self.adam.validate()
    }

    pub fn generator_seed(&self) -> u64 {
        self.seed
    }

    pub fn discriminator_seed(&self) -> u64 {
        self.seed ^ 0xD15C_0000
    }

    fn shuffle_seed(&self) -> u64 {
        self.seed ^ 0x5A0F_F1E5
    }
}

/// One training example: condition channels and the target.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicePair {
    pub condition: Tensor<f32>,
    pub target: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub iterations: usize,
    /// Mean L1 between generator output and target, measured before each G update.
    pub mean_l1: f64,
    /// Mean generator-side adversarial term.
    pub mean_adv: f64,
    pub mean_d_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub l1: f64,
    pub adv: f64,
    pub d_loss: f64,
}

/// Generator/discriminator pair with their optimizer states.
pub struct AdversarialTrainer {
    pub generator: Model<f32>,
    pub discriminator: Model<f32>,
    g_opt: AdamState<f32>,
    d_opt: AdamState<f32>,
    lambda_pix: f64,
}

fn check_pairs(pairs: &[SlicePair]) -> Result<()> {
    let first = pairs
        .first()
        .ok_or_else(|| Error::EmptyDataset("no training pairs".into()))?;
    for (i, p) in pairs.iter().enumerate() {
        if p.condition.shape() != first.condition.shape() || p.target.shape() != first.target.shape() {
            return Err(Error::Shape(format!(
                "pair {i} has condition {:?} / target {:?}, expected {:?} / {:?}",
                p.condition.shape(),
                p.target.shape(),
                first.condition.shape(),
                first.target.shape()
            )));
        }
        if p.condition.shape()[1..] != p.target.shape()[1..] {
            return Err(Error::Shape(format!("pair {i}: condition and target extents differ")));
        }
    }
    Ok(())
}

impl AdversarialTrainer {
    pub fn new(
        generator: Model<f32>,
        discriminator: Model<f32>,
        adam: AdamConfig,
        lambda_pix: f64,
    ) -> Result<Self> {
        Ok(AdversarialTrainer {
            g_opt: AdamState::for_model(&generator, adam)?,
            d_opt: AdamState::for_model(&discriminator, adam)?,
            generator,
            discriminator,
            lambda_pix,
        })
    }

    pub fn into_models(self) -> (Model<f32>, Model<f32>) {
        (self.generator, self.discriminator)
    }

    fn disc_input(p: &SlicePair, candidate: &Tensor<f32>) -> Result<Tensor<f32>> {
        Tensor::concat_channels(&[&p.condition, candidate])
    }

    /// Discriminator update against the given fakes.
    fn update_discriminator(&mut self, batch: &[&SlicePair], fakes: &[&Tensor<f32>]) -> Result<f64> {
        let d = &self.discriminator;
        let mut grads = Gradients::zeros_like(d);
        let mut total = 0.0;
        for (p, fake) in batch.iter().zip(fakes) {
            for (candidate, label) in [(&p.target, 1.0), (*fake, 0.0)] {
                let cache = d.forward_cached(&Self::disc_input(p, candidate)?)?;
                let (v, g) = lsgan(cache.output(), label);
                total += v;
                let (gr, _) = d.backward(&cache, &g, false)?;
                grads.accumulate(&gr);
            }
        }
        let n = batch.len() as f32;
        grads.scale(1.0 / n);
        self.discriminator.apply_adam(&grads, &mut self.d_opt)?;
        Ok(total / batch.len() as f64)
    }

    /// Generator update through the current discriminator. Returns mean (L1, adversarial).
    fn update_generator(
        &mut self,
        batch: &[&SlicePair],
        caches: &[crate::nn::ForwardCache<f32>],
    ) -> Result<(f64, f64)> {
        let g = &self.generator;
        let mut grads = Gradients::zeros_like(g);
        let (mut l1_sum, mut adv_sum) = (0.0, 0.0);
        for (p, cache) in batch.iter().zip(caches) {
            let fake = cache.output();
            let (l1, gl1) = LossSpec::L1.eval(fake, &p.target)?;
            let adv = LossSpec::Adversarial {
                discriminator: &self.discriminator,
                condition: &p.condition,
            };
            let (a, ga) = adv.eval(fake, &p.target)?;
            if !(l1.is_finite() && a.is_finite()) {
                return Err(Error::NonFinite {
                    layer: g.layers().len(),
                    kind: "generator loss".into(),
                });
            }
            l1_sum += l1;
            adv_sum += a;
            let mut grad = ga;
            let w = self.lambda_pix as f32;
            grad.data_mut().iter_mut().zip(gl1.data()).for_each(|(x, &y)| *x += w * y);
            let (gr, _) = g.backward(cache, &grad, false)?;
            grads.accumulate(&gr);
        }
        let n = batch.len() as f32;
        grads.scale(1.0 / n);
        self.generator.apply_adam(&grads, &mut self.g_opt)?;
        let n = batch.len() as f64;
        Ok((l1_sum / n, adv_sum / n))
    }

    /// One D step followed by one G step on `batch`.
    pub fn step(&mut self, batch: &[&SlicePair]) -> Result<StepStats> {
        let caches = batch
            .iter()
            .map(|p| self.generator.forward_cached(&p.condition))
            .collect::<Result<Vec<_>>>()?;
        let fakes: Vec<&Tensor<f32>> = caches.iter().map(|c| c.output()).collect();
        let d_loss = self.update_discriminator(batch, &fakes)?;
        if !d_loss.is_finite() {
            return Err(Error::NonFinite {
                layer: self.discriminator.layers().len(),
                kind: "discriminator loss".into(),
            });
        }
        let (l1, adv) = self.update_generator(batch, &caches)?;
        Ok(StepStats { l1, adv, d_loss })
    }

    /// A generator-only update (no discriminator step).
    pub fn generator_step(&mut self, batch: &[&SlicePair]) -> Result<(f64, f64)> {
        let caches = batch
            .iter()
            .map(|p| self.generator.forward_cached(&p.condition))
            .collect::<Result<Vec<_>>>()?;
        self.update_generator(batch, &caches)
    }

    /// Mean L1 of the current generator on `batch`.
    pub fn l1(&self, batch: &[&SlicePair]) -> Result<f64> {
        let mut sum = 0.0;
        for p in batch {
            let y = self.generator.forward(&p.condition)?;
            sum += LossSpec::L1.eval(&y, &p.target)?.0;
        }
        Ok(sum / batch.len() as f64)
    }
}

/// Trains the given generator/discriminator pair on `pairs`.
///
/// Each epoch visits the pairs in a seeded shuffled order; each batch runs a
/// discriminator step and then a generator step.
pub fn train_models(
    pairs: &[SlicePair],
    cfg: &StageTrainConfig,
    generator: Model<f32>,
    discriminator: Model<f32>,
) -> Result<(Model<f32>, Model<f32>, TrainHistory)> {
    cfg.validate()?;
    check_pairs(pairs)?;
    let mut trainer = AdversarialTrainer::new(generator, discriminator, cfg.adam, cfg.lambda_pix)?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.shuffle_seed());
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut history = TrainHistory::default();
    let mut iterations = 0usize;
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut rec = EpochRecord {
            epoch,
            iterations: 0,
            mean_l1: 0.0,
            mean_adv: 0.0,
            mean_d_loss: 0.0,
        };
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_iterations.is_some_and(|m| iterations >= m) {
                break;
            }
            let batch: Vec<&SlicePair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let s = trainer.step(&batch)?;
            rec.mean_l1 += s.l1;
            rec.mean_adv += s.adv;
            rec.mean_d_loss += s.d_loss;
            rec.iterations += 1;
            iterations += 1;
        }
        if rec.iterations == 0 {
            break 'epochs;
        }
        let n = rec.iterations as f64;
        rec.mean_l1 /= n;
        rec.mean_adv /= n;
        rec.mean_d_loss /= n;
        history.epochs.push(rec);
    }
    let (g, d) = trainer.into_models();
    Ok((g, d, history))
}

/// Builds 2D models from the configs and trains them on slice pairs.
pub fn train_stage(
    pairs: &[SlicePair],
    cfg: &StageTrainConfig,
    gcfg: &GeneratorConfig,
    dcfg: &DiscriminatorConfig,
) -> Result<(Model<f32>, Model<f32>, TrainHistory)> {
    check_pairs(pairs)?;
    let g = build_generator(gcfg, cfg.generator_seed())?;
    let d = build_discriminator(dcfg, cfg.discriminator_seed())?;
    train_models(pairs, cfg, g, d)
}
