use serde::{Deserialize, Serialize};

use super::model::{Gradients, Model};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !(self.lr.is_finite() && self.lr >= 0.0)
            || !in_unit(self.beta1)
            || !in_unit(self.beta2)
            || !(self.eps.is_finite() && self.eps > 0.0)
        {
            return Err(Error::Config(format!("invalid Adam hyper-parameters {self:?}")));
        }
        Ok(())
    }
}

/// First/second moment estimates for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
    pub config: AdamConfig,
}

impl<T: Real> AdamState<T> {
    pub fn new(shapes: &[&[usize]], config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(AdamState {
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: 0,
            config,
        })
    }

    pub fn for_model(model: &Model<T>, config: AdamConfig) -> Result<Self> {
        let params = model.params();
        let shapes: Vec<&[usize]> = params.iter().map(|p| p.shape()).collect();
        AdamState::new(&shapes, config)
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
) -> Result<()> {
    if params.len() != grads.tensors.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.tensors.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(&grads.tensors).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::Shape(format!(
                "adam: parameter {i} shape {:?}, grad {:?}, moment {:?}",
                p.shape(),
                g.shape(),
                state.m[i].shape()
            )));
        }
    }
    state.t += 1;
    let c = state.config;
    let t = state.t as i32;
    let b1 = T::from_f64(c.beta1);
    let b2 = T::from_f64(c.beta2);
    let one = T::one();
    let bc1 = T::from_f64(1.0 - c.beta1.powi(t));
    let bc2 = T::from_f64(1.0 - c.beta2.powi(t));
    let lr = T::from_f64(c.lr);
    let eps = T::from_f64(c.eps);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads.tensors[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (one - b1) * g[j];
            v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

impl<T: Real> Model<T> {
    pub fn apply_adam(&mut self, grads: &Gradients<T>, state: &mut AdamState<T>) -> Result<()> {
        let mut params = self.params_mut();
        adam_step(&mut params, grads, state)
    }
}
