use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::Curvature;
use crate::losses::LossWeights;
use crate::model::DenoiserConfig;
use crate::optim::AdamConfig;

/// Fraction of the epochs spent in the stabilization phase when `e1` is unset.
pub const DEFAULT_E1_RATIO: f64 = 0.4;

/// Default tangent-norm clip for decoder embeddings.
pub const DEFAULT_EMBED_CLIP: f64 = 1.0;

/// Whether training switches objectives at `E1` or optimizes everything jointly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Optimization {
    #[default]
    TwoStep,
    /// All losses from the first epoch, prototypes trainable throughout.
    OneStep,
}

impl fmt::Display for Optimization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimization::TwoStep => "two_step",
            Optimization::OneStep => "one_step",
        })
    }
}

impl FromStr for Optimization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_step" => Ok(Optimization::TwoStep),
            "one_step" => Ok(Optimization::OneStep),
            _ => Err(Error::InvalidArgument(format!(
                "unknown optimization '{s}' (expected two_step or one_step)"
            ))),
        }
    }
}

/// Everything that controls a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub weights: LossWeights,
    pub curvature: Curvature,
    pub epochs: usize,
    /// First guidance-phase epoch; `None` means `round(0.4 · epochs)`.
    pub e1: Option<usize>,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Prototype learning rate; `None` reuses `adam.lr`.
    pub proto_lr: Option<f64>,
    pub diffusion_steps: usize,
    pub infer_steps: usize,
    pub seed: u64,
    pub optimization: Optimization,
    /// Cross-entropy on the encoder's auxiliary head, weighted by `λ_ce`.
    pub aux_head: bool,
    /// Condition masking during training.
    pub masking: bool,
    pub embed_dim: usize,
    pub enc_channels: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub kernel: usize,
    pub step_dim: usize,
    /// Evaluate every this many epochs; `None` means `max(1, epochs / 20)`.
    pub eval_every: Option<usize>,
    /// Decoder embeddings longer than this are scaled down before `exp_0`;
    /// `None` disables the clip.
    pub embed_clip: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            weights: LossWeights::default(),
            curvature: Curvature::default(),
            epochs: 60,
            e1: None,
            batch_size: 4,
            adam: AdamConfig::default(),
            proto_lr: None,
            diffusion_steps: 1000,
            infer_steps: 25,
            seed: 0,
            optimization: Optimization::TwoStep,
            aux_head: true,
            masking: true,
            embed_dim: 16,
            enc_channels: 48,
            enc_layers: 4,
            dec_layers: 4,
            kernel: 3,
            step_dim: 64,
            eval_every: None,
            embed_clip: Some(DEFAULT_EMBED_CLIP),
        }
    }
}

impl RunConfig {
    pub fn e1(&self) -> usize {
        self.e1
            .unwrap_or_else(|| (DEFAULT_E1_RATIO * self.epochs as f64).round() as usize)
    }

    pub fn eval_every(&self) -> usize {
        self.eval_every.unwrap_or((self.epochs / 20).max(1))
    }

    pub fn proto_lr(&self) -> f64 {
        self.proto_lr.unwrap_or(self.adam.lr)
    }

    pub fn model_config(&self, feature_dim: usize, classes: usize) -> DenoiserConfig {
        DenoiserConfig {
            feature_dim,
            classes,
            embed_dim: self.embed_dim,
            enc_layers: self.enc_layers,
            enc_channels: self.enc_channels,
            dec_layers: self.dec_layers,
            kernel: self.kernel,
            step_dim: self.step_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.adam.validate()?;
        let range = |m: String| Err(Error::OutOfRange(m));
        if self.epochs == 0 {
            return range("epochs must be positive".into());
        }
        if self.e1() > self.epochs {
            return range(format!("e1 = {} exceeds epochs = {}", self.e1(), self.epochs));
        }
        if self.batch_size == 0 {
            return range("batch_size must be positive".into());
        }
        if self.diffusion_steps == 0 {
            return range("diffusion_steps must be positive".into());
        }
        if self.infer_steps == 0 || self.infer_steps > self.diffusion_steps {
            return range(format!(
                "infer_steps must be in 1..={}, got {}",
                self.diffusion_steps, self.infer_steps
            ));
        }
        if let Some(lr) = self.proto_lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return range(format!("proto_lr must be > 0, got {lr}"));
            }
        }
        if let Some(r) = self.embed_clip {
            if !(r > 0.0 && r.is_finite()) {
                return range(format!("embed_clip must be > 0, got {r}"));
            }
        }
        if self.eval_every == Some(0) {
            return range("eval_every must be positive".into());
        }
        self.model_config(1, 2).validate()
    }
}
