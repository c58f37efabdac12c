//! Progressive multi-orientation volume synthesis.
//!
//! Three conditional GAN generators are trained one after another: an axial
//! generator synthesizes the target contrast slice by slice from the source
//! contrasts, then a coronal and a sagittal generator each refine the stacked
//! volume along their own orientation.

pub mod baselines;
pub mod cli;
pub mod error;
pub mod gan;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod volume;

pub use error::{Error, Result};
