//! A small differentiable computation substrate: dense tensors, the layers the
//! generators and discriminators need, reverse-mode gradients and Adam.

mod adam;
mod gradcheck;
mod layer;
mod loss;
mod model;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::finite_diff_check;
pub use layer::{LayerSpec, INSTANCE_NORM_EPS, LEAKY_RELU_SLOPE};
pub use loss::{compute_gradients, lsgan, LossSpec};
pub use model::{ForwardCache, Gradients, Head, InputSpec, Layer, Model};
pub use tensor::{Real, Tensor};
