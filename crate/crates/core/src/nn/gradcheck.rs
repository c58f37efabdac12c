use rand::seq::index;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use super::loss::{compute_gradients, LossSpec};
use super::model::Model;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares analytic parameter gradients against central differences.
///
/// Checks every parameter when there are at most `max_samples` of them, otherwise a
/// seeded random subset. Returns the largest
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`; a model without
/// parameters returns 0.
pub fn finite_diff_check(
    model: &Model<f64>,
    loss: &LossSpec<'_, f64>,
    input: &Tensor<f64>,
    target: &Tensor<f64>,
    eps: f64,
    max_samples: usize,
) -> Result<f64> {
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::Config(format!("finite-difference eps {eps} outside [1e-6, 1e-4]")));
    }
    let (_, analytic) = compute_gradients(model, loss, input, target)?;
    let sizes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Ok(0.0);
    }
    let picks: Vec<usize> = if total <= max_samples {
        (0..total).collect()
    } else {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(0x6AD);
        let mut v = index::sample(&mut rng, total, max_samples).into_vec();
        v.sort_unstable();
        v
    };

    let eval = |m: &Model<f64>| -> Result<f64> {
        let y = m.forward(input)?;
        Ok(loss.eval(&y, target)?.0)
    };

    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for flat in picks {
        let (mut tensor, mut offset) = (0, flat);
        while offset >= sizes[tensor] {
            offset -= sizes[tensor];
            tensor += 1;
        }
        let original = model.params()[tensor].data()[offset];
        probe.params_mut()[tensor].data_mut()[offset] = original + eps;
        let plus = eval(&probe)?;
        probe.params_mut()[tensor].data_mut()[offset] = original - eps;
        let minus = eval(&probe)?;
        probe.params_mut()[tensor].data_mut()[offset] = original;

        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.tensors[tensor].data()[offset];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
