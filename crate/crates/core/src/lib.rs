//! Unpaired voice transformation: mel featurization and inversion, the
//! generator/discriminator/controller networks, adversarial training,
//! conversion and evaluation.

pub mod audio;
pub mod autograd;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod io;
pub mod models;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
