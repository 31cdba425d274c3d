//! Point-to-point sequence generation.
//!
//! A sequence VAE with a learned prior that is conditioned on a targeted
//! end-frame and a time counter, trained with a control-point-consistency
//! term on the prior, skip-frame training, and a latent alignment loss.

pub mod autodiff;
pub mod checkpoint;
pub mod curves;
pub mod datasets;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objective;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
