use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use super::layer::{self, LayerSpec};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// What the model expects as input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub channels: usize,
    /// 2 for `[C, H, W]` inputs, 3 for `[C, D, H, W]`.
    pub rank: usize,
    /// Every spatial extent must be a positive multiple of this.
    pub spatial_multiple: usize,
}

/// Transform applied after the last layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Head {
    Plain,
    /// `clamp01(input[c] + scale * y[c])` for each output channel `c`.
    Residual { scale: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub spec: LayerSpec,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

/// A sequential network with optional skip connections.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    input: InputSpec,
    layers: Vec<Layer<T>>,
    head: Head,
    seed: u64,
    /// Free-form configuration echoed into checkpoints.
    pub config: serde_json::Value,
}

/// Parameter gradients, one tensor per parameter in [`Model::params`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(model: &Model<T>) -> Self {
        Gradients {
            tensors: model.params().iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn accumulate(&mut self, other: &Gradients<T>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, factor: T) {
        self.tensors.iter_mut().for_each(|t| t.scale(factor));
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter())
            .fold(0.0, |m, x| m.max(x.as_f64().abs()))
    }
}

/// Per-layer auxiliary data kept for the backward pass.
#[derive(Debug, Clone)]
enum Aux<T> {
    None,
    InvStd(Vec<T>),
    Upsampled(Tensor<T>),
}

/// Activations recorded by [`Model::forward_cached`].
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    input: Tensor<T>,
    acts: Vec<Tensor<T>>,
    aux: Vec<Aux<T>>,
    output: Tensor<T>,
}

impl<T> ForwardCache<T> {
    pub fn output(&self) -> &Tensor<T> {
        &self.output
    }
}

impl<T: Real> Model<T> {
    /// Builds a model with He-normal weights (std `sqrt(2 / fan_in)`) and zero biases,
    /// drawn from xoshiro256++ seeded with `seed`.
    pub fn new(input: InputSpec, specs: Vec<LayerSpec>, head: Head, seed: u64) -> Result<Self> {
        if input.channels == 0 || !matches!(input.rank, 2 | 3) || input.spatial_multiple == 0 {
            return Err(Error::Config(format!("invalid input spec {input:?}")));
        }
        let mut channels_at = Vec::with_capacity(specs.len());
        let mut ch = input.channels;
        for (i, spec) in specs.iter().enumerate() {
            ch = spec.check(i, ch, input.rank, &channels_at)?;
            channels_at.push(ch);
        }
        if let Head::Residual { scale } = head {
            if specs.is_empty() {
                return Err(Error::Config("residual head needs at least one layer".into()));
            }
            if !scale.is_finite() {
                return Err(Error::Config("residual scale must be finite".into()));
            }
            if ch > input.channels {
                return Err(Error::Config(format!(
                    "residual head needs at least {ch} input channels, model has {}",
                    input.channels
                )));
            }
        }
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let layers = specs
            .into_iter()
            .map(|spec| {
                let (weight, bias) = match spec.conv_geom() {
                    Some(g) => {
                        let std = (2.0 / g.fan_in() as f64).sqrt();
                        let mut wshape = vec![g.out_channels, g.in_channels];
                        if g.rank == 3 {
                            wshape.push(g.kernel.0);
                        }
                        wshape.extend([g.kernel.1, g.kernel.2]);
                        let n: usize = wshape.iter().product();
                        let data = (0..n)
                            .map(|_| {
                                let z: f64 = StandardNormal.sample(&mut rng);
                                T::from_f64(z * std)
                            })
                            .collect();
                        let w = Tensor::new(wshape, data).expect("weight shape");
                        let b = g.bias.then(|| Tensor::zeros(&[g.out_channels]));
                        (Some(w), b)
                    }
                    None => (None, None),
                };
                Layer { spec, weight, bias }
            })
            .collect();
        Ok(Model {
            input,
            layers,
            head,
            seed,
            config: serde_json::Value::Null,
        })
    }

    pub fn input_spec(&self) -> InputSpec {
        self.input
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    pub fn output_channels(&self) -> usize {
        let mut ch = self.input.channels;
        let mut at = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            ch = l.spec.check(i, ch, self.input.rank, &at).expect("validated at construction");
            at.push(ch);
        }
        ch
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Replaces all parameters, in [`Model::params`] order.
    pub fn set_params(&mut self, tensors: Vec<Tensor<T>>) -> Result<()> {
        let mut slots = self.params_mut();
        if slots.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "model has {} parameter tensors, got {}",
                slots.len(),
                tensors.len()
            )));
        }
        for (i, (slot, t)) in slots.iter().zip(&tensors).enumerate() {
            if slot.shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "parameter {i}: expected shape {:?}, got {:?}",
                    slot.shape(),
                    t.shape()
                )));
            }
        }
        for (slot, t) in slots.iter_mut().zip(tensors) {
            **slot = t;
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            input: self.input,
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    spec: l.spec.clone(),
                    weight: l.weight.as_ref().map(Tensor::cast),
                    bias: l.bias.as_ref().map(Tensor::cast),
                })
                .collect(),
            head: self.head,
            seed: self.seed,
            config: self.config.clone(),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let shape = x.shape();
        let ok_rank = shape.len() == self.input.rank + 1;
        let ok_ch = ok_rank && shape[0] == self.input.channels;
        let m = self.input.spatial_multiple;
        let ok_spatial = ok_rank && shape[1..].iter().all(|&n| n >= m && n % m == 0);
        if !(ok_rank && ok_ch && ok_spatial) {
            return Err(Error::Shape(format!(
                "model expects {} channels, rank {}, spatial multiple of {}; got shape {shape:?}",
                self.input.channels, self.input.rank, self.input.spatial_multiple
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.run(x, false)?.output)
    }

    pub fn forward_cached(&self, x: &Tensor<T>) -> Result<ForwardCache<T>> {
        self.run(x, true)
    }

    fn run(&self, x: &Tensor<T>, keep: bool) -> Result<ForwardCache<T>> {
        self.check_input(x)?;
        let rank = self.input.rank;
        let mut acts: Vec<Tensor<T>> = Vec::with_capacity(self.layers.len());
        let mut aux = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let cur = if i == 0 { x } else { &acts[i - 1] };
            let (y, a) = match &layer.spec {
                spec if spec.conv_geom().is_some() => {
                    let g = spec.conv_geom().expect("conv");
                    let w = layer.weight.as_ref().expect("conv weight");
                    if g.upsample {
                        let up = layer::upsample2(cur, rank);
                        let y = layer::conv_forward(&up, &g, w, layer.bias.as_ref())?;
                        (y, if keep { Aux::Upsampled(up) } else { Aux::None })
                    } else {
                        (layer::conv_forward(cur, &g, w, layer.bias.as_ref())?, Aux::None)
                    }
                }
                LayerSpec::InstanceNorm { .. } => {
                    let (y, inv) = layer::instance_norm_forward(cur);
                    (y, Aux::InvStd(inv))
                }
                LayerSpec::SkipConcat { source, .. } => {
                    let src = &acts[*source];
                    let y = Tensor::concat_channels(&[cur, src]).map_err(|e| {
                        Error::Shape(format!("layer {i} skip from {source}: {e}"))
                    })?;
                    (y, Aux::None)
                }
                spec => (layer::activation_forward(spec, cur), Aux::None),
            };
            if !y.all_finite() {
                return Err(Error::NonFinite {
                    layer: i,
                    kind: layer.spec.name().into(),
                });
            }
            // Without caching we still need earlier outputs for skip sources.
            acts.push(y);
            aux.push(a);
        }
        let last = acts.last().cloned().unwrap_or_else(|| x.clone());
        let output = match self.head {
            Head::Plain => last,
            Head::Residual { scale } => {
                let s = T::from_f64(scale);
                let n = last.len();
                let mut out = last;
                out.data_mut()
                    .iter_mut()
                    .zip(&x.data()[..n])
                    .for_each(|(y, &x0)| *y = (x0 + s * *y).max(T::zero()).min(T::one()));
                out
            }
        };
        if !output.all_finite() {
            return Err(Error::NonFinite {
                layer: self.layers.len(),
                kind: "head".into(),
            });
        }
        Ok(ForwardCache {
            input: x.clone(),
            acts: if keep { acts } else { Vec::new() },
            aux: if keep { aux } else { Vec::new() },
            output,
        })
    }

    /// Back-propagates `grad_output` (same shape as the output) through a cached pass.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        grad_output: &Tensor<T>,
        need_input_grad: bool,
    ) -> Result<(Gradients<T>, Option<Tensor<T>>)> {
        if grad_output.shape() != cache.output.shape() {
            return Err(Error::Shape(format!(
                "output gradient {:?} does not match output {:?}",
                grad_output.shape(),
                cache.output.shape()
            )));
        }
        if cache.acts.len() != self.layers.len() {
            return Err(Error::Shape("cache was not recorded by forward_cached".into()));
        }
        let rank = self.input.rank;
        let mut input_grad: Option<Tensor<T>> = None;
        let mut grad = grad_output.clone();
        if let Head::Residual { scale } = self.head {
            let s = T::from_f64(scale);
            let n = grad.len();
            let pre_ok: Vec<bool> = cache
                .acts
                .last()
                .map(|y| {
                    y.data()
                        .iter()
                        .zip(&cache.input.data()[..n])
                        .map(|(&y, &x0)| {
                            let v = x0 + s * y;
                            v >= T::zero() && v <= T::one()
                        })
                        .collect()
                })
                .unwrap_or_default();
            let mut gx = Tensor::zeros(cache.input.shape());
            for (i, g) in grad.data_mut().iter_mut().enumerate() {
                if !pre_ok[i] {
                    *g = T::zero();
                }
                gx.data_mut()[i] = *g;
                *g *= s;
            }
            input_grad = Some(gx);
        }

        // Pending gradients for each layer output (skip connections add to these).
        let mut pending: Vec<Option<Tensor<T>>> = vec![None; self.layers.len()];
        if let Some(last) = pending.last_mut() {
            *last = Some(grad);
        } else if let Some(g) = input_grad.as_mut() {
            // No layers: output = head(input).
            g.add_assign(&grad);
        } else {
            input_grad = Some(grad);
        }

        let mut param_grads: Vec<Vec<Tensor<T>>> = vec![Vec::new(); self.layers.len()];
        for i in (0..self.layers.len()).rev() {
            let Some(g) = pending[i].take() else { continue };
            let layer = &self.layers[i];
            let x = if i == 0 { &cache.input } else { &cache.acts[i - 1] };
            let want_dx = i > 0 || need_input_grad;
            let dx: Option<Tensor<T>> = match &layer.spec {
                spec if spec.conv_geom().is_some() => {
                    let geom = spec.conv_geom().expect("conv");
                    let w = layer.weight.as_ref().expect("conv weight");
                    let conv_in = match &cache.aux[i] {
                        Aux::Upsampled(u) => u,
                        _ => x,
                    };
                    let (dw, db, dx) = layer::conv_backward(conv_in, &geom, w, &g, want_dx);
                    param_grads[i].push(dw);
                    param_grads[i].extend(db);
                    match (geom.upsample, dx) {
                        (true, Some(du)) => Some(layer::upsample2_backward(&du, x.shape(), rank)),
                        (_, dx) => dx,
                    }
                }
                LayerSpec::InstanceNorm { .. } => {
                    let Aux::InvStd(inv) = &cache.aux[i] else {
                        unreachable!("instance norm cache")
                    };
                    Some(layer::instance_norm_backward(&cache.acts[i], inv, &g))
                }
                LayerSpec::SkipConcat { source, .. } => {
                    let own = x.channels();
                    let src_grad = g.channel_range(own, g.channels());
                    match pending[*source].as_mut() {
                        Some(p) => p.add_assign(&src_grad),
                        None => pending[*source] = Some(src_grad),
                    }
                    Some(g.channel_range(0, own))
                }
                spec => Some(layer::activation_backward(spec, x, &cache.acts[i], &g)),
            };
            if let Some(dx) = dx {
                if i == 0 {
                    if need_input_grad {
                        match input_grad.as_mut() {
                            Some(acc) => acc.add_assign(&dx),
                            None => input_grad = Some(dx),
                        }
                    }
                } else {
                    match pending[i - 1].as_mut() {
                        Some(p) => p.add_assign(&dx),
                        None => pending[i - 1] = Some(dx),
                    }
                }
            }
        }

        // Layers that received no gradient (unreachable from the output) get zeros.
        let mut tensors = Vec::new();
        for (layer, grads) in self.layers.iter().zip(param_grads) {
            if grads.is_empty() {
                tensors.extend(layer.weight.iter().map(|w| Tensor::zeros(w.shape())));
                tensors.extend(layer.bias.iter().map(|b| Tensor::zeros(b.shape())));
            } else {
                tensors.extend(grads);
            }
        }
        let grads = Gradients { tensors };
        if let Some(bad) = grads.tensors.iter().position(|t| !t.all_finite()) {
            return Err(Error::NonFinite {
                layer: self.layer_of_param(bad),
                kind: "gradient".into(),
            });
        }
        Ok((grads, if need_input_grad { input_grad } else { None }))
    }

    fn layer_of_param(&self, index: usize) -> usize {
        let mut seen = 0;
        for (i, l) in self.layers.iter().enumerate() {
            seen += l.weight.is_some() as usize + l.bias.is_some() as usize;
            if index < seen {
                return i;
            }
        }
        self.layers.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_relu() -> Model<f64> {
        Model::new(
            InputSpec { channels: 1, rank: 2, spatial_multiple: 1 },
            vec![
                LayerSpec::Conv2d { in_channels: 1, out_channels: 4, kernel: 3, stride: 1, padding: 1, bias: true },
                LayerSpec::Relu,
            ],
            Head::Plain,
            3,
        )
        .unwrap()
    }

    #[test]
    fn stride2_conv_shape() {
        let m: Model<f32> = Model::new(
            InputSpec { channels: 1, rank: 2, spatial_multiple: 1 },
            vec![LayerSpec::Conv2d { in_channels: 1, out_channels: 16, kernel: 3, stride: 2, padding: 1, bias: true }],
            Head::Plain,
            0,
        )
        .unwrap();
        let y = m.forward(&Tensor::zeros(&[1, 32, 32])).unwrap();
        assert_eq!(y.shape(), &[16, 16, 16]);
    }

    #[test]
    fn zero_weights_give_relu_of_bias() {
        let mut m = conv_relu();
        for layer in m.layers_mut() {
            if let Some(w) = layer.weight.as_mut() {
                w.data_mut().fill(0.0);
            }
            if let Some(b) = layer.bias.as_mut() {
                b.data_mut().copy_from_slice(&[0.5, -0.25, 2.0, 0.0]);
            }
        }
        let x = Tensor::new(vec![1, 5, 5], (0..25).map(|v| v as f64).collect()).unwrap();
        let y = m.forward(&x).unwrap();
        for (c, want) in [0.5, 0.0, 2.0, 0.0].iter().enumerate() {
            assert!(y.data()[c * 25..(c + 1) * 25].iter().all(|v| v == want));
        }
    }

    #[test]
    fn channel_chain_is_validated() {
        let err = Model::<f32>::new(
            InputSpec { channels: 2, rank: 2, spatial_multiple: 1 },
            vec![LayerSpec::Conv2d { in_channels: 3, out_channels: 4, kernel: 3, stride: 1, padding: 1, bias: true }],
            Head::Plain,
            0,
        );
        assert!(matches!(err, Err(Error::Config(_))));
        let err = Model::<f32>::new(
            InputSpec { channels: 1, rank: 2, spatial_multiple: 1 },
            vec![LayerSpec::Conv2d { in_channels: 1, out_channels: 4, kernel: 3, stride: 3, padding: 1, bias: true }],
            Head::Plain,
            0,
        );
        assert!(err.is_err());
    }

    #[test]
    fn input_shape_is_checked() {
        let m = conv_relu();
        assert!(matches!(m.forward(&Tensor::zeros(&[2, 4, 4])), Err(Error::Shape(_))));
        assert!(m.forward(&Tensor::zeros(&[1, 4, 4, 4])).is_err());
    }

    #[test]
    fn same_seed_same_params() {
        let a = conv_relu();
        let b = conv_relu();
        assert_eq!(a, b);
        let c: Model<f64> = Model::new(a.input_spec(), a.specs(), Head::Plain, 4).unwrap();
        assert_ne!(a.params()[0], c.params()[0]);
    }

    #[test]
    fn non_finite_reports_layer() {
        let mut m = conv_relu();
        m.layers_mut()[0].bias.as_mut().unwrap().data_mut()[0] = f64::NAN;
        match m.forward(&Tensor::zeros(&[1, 4, 4])) {
            Err(Error::NonFinite { layer, .. }) => assert_eq!(layer, 0),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }
}
