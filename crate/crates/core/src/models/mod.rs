//! Generator, discriminator and controller networks.
//!
//! All three operate on mel segments of `seg_frames × N_MELS`. The
//! discriminator sees the five-channel delta augmentation of its input and,
//! unless the input skip is disabled, concatenates a max-pooled copy of that
//! input onto every hidden layer.

mod controller;
mod discriminator;
mod generator;
mod params;

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::N_MELS;
use crate::error::{Error, Result};

pub use controller::Controller;
pub use discriminator::{Discriminator, DiscriminatorOutput, DiscriminatorResponse, SpectralState};
pub use generator::Generator;
pub use params::{Bound, Params};

/// Output scale `c` of the generator's `c·tanh` activation.
pub const OUTPUT_SCALE: f64 = crate::audio::CLIP;
pub const ELU_ALPHA: f64 = 1.0;
/// Power iterations used to seed the spectral-norm estimates at init.
pub const SPECTRAL_WARMUP_ITERS: usize = 500;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Frames per segment.
    pub seg_frames: usize,
    /// Condition vector dimension.
    pub cond_dim: usize,
    /// Channel widths of the strided stacks, shallowest first.
    pub widths: Vec<usize>,
    pub kernel: usize,
    /// Concatenate pooled discriminator input onto each hidden layer.
    pub input_skip: bool,
    pub spectral_norm: bool,
    pub keep_prob_controller: f64,
    pub keep_prob_discriminator: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            seg_frames: 128,
            cond_dim: 128,
            widths: vec![32, 64, 128, 256],
            kernel: 5,
            input_skip: true,
            spectral_norm: true,
            keep_prob_controller: 0.9,
            keep_prob_discriminator: 0.8,
        }
    }
}

impl ModelConfig {
    pub fn layers(&self) -> usize {
        self.widths.len()
    }

    /// Spatial size after all strided layers.
    pub fn bottleneck(&self) -> (usize, usize) {
        let f = 1 << self.layers();
        (self.seg_frames / f, N_MELS / f)
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.layers();
        if l == 0 || self.widths.contains(&0) {
            return Err(Error::Config("widths must be a nonempty list of positive sizes".into()));
        }
        let f = 1usize << l;
        if self.seg_frames == 0 || !self.seg_frames.is_multiple_of(f) || !N_MELS.is_multiple_of(f) {
            return Err(Error::Config(format!(
                "seg_frames ({}) and band count ({N_MELS}) must be divisible by 2^layers = {f}",
                self.seg_frames
            )));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel must be odd, got {}", self.kernel)));
        }
        if self.cond_dim == 0 {
            return Err(Error::Config("cond_dim must be positive".into()));
        }
        for (name, p) in [
            ("keep_prob_controller", self.keep_prob_controller),
            ("keep_prob_discriminator", self.keep_prob_discriminator),
        ] {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

/// Latent control input of the generator.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionVector(pub Vec<f64>);

impl ConditionVector {
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// `c / max(‖c‖₂, 1)`.
pub fn project_unit_ball(c: &ConditionVector) -> Result<ConditionVector> {
    if c.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("condition vector".into()));
    }
    let div = c.norm().max(1.0);
    Ok(ConditionVector(c.0.iter().map(|v| v / div).collect()))
}

/// Forward-pass mode. Dropout is active only in `Train`.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// The three networks of one model.
#[derive(Clone, Debug)]
pub struct Networks {
    pub config: ModelConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub controller: Controller,
}

impl Networks {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Ok(Self {
            generator: Generator::new(&config, &mut stream(1)),
            discriminator: Discriminator::new(&config, &mut stream(2)),
            controller: Controller::new(&config, &mut stream(3)),
            config,
        })
    }

    /// `(network, scalar parameter count)` for each network.
    pub fn parameter_report(&self) -> Vec<(&'static str, usize)> {
        vec![
            ("generator", self.generator.params.scalar_count()),
            ("discriminator", self.discriminator.params.scalar_count()),
            ("controller", self.controller.params.scalar_count()),
        ]
    }
}
