use super::model::{Gradients, Model};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// A differentiable scalar objective on a model output.
#[derive(Debug, Clone)]
pub enum LossSpec<'a, T> {
    /// `mean|y - target|`
    L1,
    /// `mean (y - target)^2`
    L2,
    /// Least-squares "real" side: `0.5 * mean (y - 1)^2`.
    LsganReal,
    /// Least-squares "fake" side: `0.5 * mean y^2`.
    LsganFake,
    /// Generator-side adversarial term through a frozen conditional discriminator:
    /// `0.5 * mean (D(condition ++ y) - 1)^2`.
    Adversarial {
        discriminator: &'a Model<T>,
        condition: &'a Tensor<T>,
    },
    Weighted(Vec<(f64, LossSpec<'a, T>)>),
}

fn check_same(a: &Tensor<impl Real>, b: &Tensor<impl Real>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "loss operands differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl<T: Real> LossSpec<'_, T> {
    /// Loss value and its gradient with respect to `y`.
    pub fn eval(&self, y: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
        let n = y.len().max(1) as f64;
        match self {
            LossSpec::L1 => {
                check_same(y, target)?;
                let inv = T::from_f64(1.0 / n);
                let mut value = 0.0;
                let mut g = Tensor::zeros(y.shape());
                for ((gi, &a), &b) in g.data_mut().iter_mut().zip(y.data()).zip(target.data()) {
                    let d = a - b;
                    value += d.as_f64().abs();
                    *gi = if d > T::zero() {
                        inv
                    } else if d < T::zero() {
                        -inv
                    } else {
                        T::zero()
                    };
                }
                Ok((value / n, g))
            }
            LossSpec::L2 => {
                check_same(y, target)?;
                let scale = T::from_f64(2.0 / n);
                let mut value = 0.0;
                let mut g = Tensor::zeros(y.shape());
                for ((gi, &a), &b) in g.data_mut().iter_mut().zip(y.data()).zip(target.data()) {
                    let d = a - b;
                    value += (d * d).as_f64();
                    *gi = scale * d;
                }
                Ok((value / n, g))
            }
            LossSpec::LsganReal => Ok(lsgan(y, 1.0)),
            LossSpec::LsganFake => Ok(lsgan(y, 0.0)),
            LossSpec::Adversarial {
                discriminator,
                condition,
            } => {
                let d_in = Tensor::concat_channels(&[condition, y])?;
                let cache = discriminator.forward_cached(&d_in)?;
                let (value, g_d) = lsgan(cache.output(), 1.0);
                let (_, dx) = discriminator.backward(&cache, &g_d, true)?;
                let dx = dx.expect("input gradient requested");
                Ok((value, dx.channel_range(condition.channels(), dx.channels())))
            }
            LossSpec::Weighted(terms) => {
                let mut value = 0.0;
                let mut g = Tensor::zeros(y.shape());
                for (w, term) in terms {
                    if !(w.is_finite() && *w >= 0.0) {
                        return Err(Error::Config(format!("loss weight {w} must be finite and >= 0")));
                    }
                    if *w == 0.0 {
                        continue;
                    }
                    let (v, gt) = term.eval(y, target)?;
                    value += w * v;
                    let wt = T::from_f64(*w);
                    g.data_mut()
                        .iter_mut()
                        .zip(gt.data())
                        .for_each(|(a, &b)| *a += wt * b);
                }
                Ok((value, g))
            }
        }
    }
}

/// `0.5 * mean (y - label)^2` and its gradient.
pub fn lsgan<T: Real>(y: &Tensor<T>, label: f64) -> (f64, Tensor<T>) {
    let n = y.len().max(1) as f64;
    let l = T::from_f64(label);
    let inv = T::from_f64(1.0 / n);
    let mut value = 0.0;
    let mut g = Tensor::zeros(y.shape());
    for (gi, &v) in g.data_mut().iter_mut().zip(y.data()) {
        let d = v - l;
        value += (d * d).as_f64();
        *gi = d * inv;
    }
    (0.5 * value / n, g)
}

/// Loss value and parameter gradients of `loss(model(input), target)`.
pub fn compute_gradients<T: Real>(
    model: &Model<T>,
    loss: &LossSpec<'_, T>,
    input: &Tensor<T>,
    target: &Tensor<T>,
) -> Result<(f64, Gradients<T>)> {
    let cache = model.forward_cached(input)?;
    let (value, g) = loss.eval(cache.output(), target)?;
    if !value.is_finite() {
        return Err(Error::NonFinite {
            layer: model.layers().len(),
            kind: "loss".into(),
        });
    }
    let (grads, _) = model.backward(&cache, &g, false)?;
    Ok((value, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![1, 1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn l1_value_and_sign_gradient() {
        let (v, g) = LossSpec::L1.eval(&t(&[1.0, 0.0, 0.5]), &t(&[0.0, 1.0, 0.5])).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(g.data(), &[1.0 / 3.0, -1.0 / 3.0, 0.0]);
    }

    #[test]
    fn lsgan_sides() {
        assert_eq!(lsgan(&t(&[1.0, 1.0]), 1.0).0, 0.0);
        assert_eq!(lsgan(&t(&[0.0, 0.0]), 1.0).0, 0.5);
        assert_eq!(lsgan(&t(&[0.5]), 0.0).0, 0.125);
    }

    #[test]
    fn weighted_rejects_negative() {
        let l = LossSpec::Weighted(vec![(-1.0, LossSpec::L1)]);
        assert!(l.eval(&t(&[0.0]), &t(&[1.0])).is_err());
    }

    #[test]
    fn shape_mismatch() {
        assert!(LossSpec::L2.eval(&t(&[0.0, 1.0]), &t(&[1.0])).is_err());
    }
}
