//! Optimizer, pre-training loop, checkpoints and the linear probe.

mod checkpoint;
mod data;
mod gradcheck;
mod optim;
mod probe;
mod step;
mod trainer;

use std::str::FromStr;

use ecamp_autodiff::AutodiffError;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CorpusError;
use crate::losses::{LossError, DEFAULT_LAMBDA_NEG};
use crate::masking::MaskError;
use crate::model::{ModelConfig, ModelError};
use crate::synthgen::SynthError;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use data::{build_dataset, Dataset, TrainExample};
pub use gradcheck::{composite_gradcheck, tiny_config, CompositeCheck};
pub use optim::{AdamW, OptimizerConfig};
pub use probe::{linear_probe, ProbeOptions, ProbeResult};
pub use step::{pretrain_loss, ForwardLoss, StepInput};
pub use trainer::{MlmAccuracy, SamplePlan, StepMetrics, Trainer};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("step {step}: loss term {term} is not finite ({value})")]
    NonFiniteLoss { step: u64, term: &'static str, value: f64 },
    #[error("gradient of `{param}` is not finite at element {index}")]
    NonFiniteGradient { param: String, index: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
}

/// Switches that each remove one mechanism.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Ablation {
    /// Drop the super-resolution head and its loss.
    pub no_sr: bool,
    /// Use `lambda_neg = lambda_oth = 1`.
    pub no_rebalance: bool,
    /// Treat descriptor tokens as ordinary random-mask candidates.
    pub no_descriptor_mask: bool,
    /// Train on the original report only.
    pub no_distill: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optim: OptimizerConfig,
    /// Step budget; 0 derives it from `optim.epochs`.
    pub steps: usize,
    pub lambda_neg: f64,
    pub ablation: Ablation,
    /// Save a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optim: OptimizerConfig::default(),
            steps: 0,
            lambda_neg: DEFAULT_LAMBDA_NEG,
            ablation: Ablation::default(),
            checkpoint_every: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, TrainError> {
    value
        .parse()
        .map_err(|_| TrainError::Config(format!("bad value `{value}` for `{key}`")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        self.optim.validate()?;
        if !(self.lambda_neg.is_finite() && self.lambda_neg >= 0.0) {
            return Err(TrainError::Config(format!("lambda_neg {} must be >= 0", self.lambda_neg)));
        }
        Ok(())
    }

    /// Samples consumed per optimizer step.
    pub fn samples_per_step(&self) -> usize {
        self.optim.batch_size * self.optim.grad_accum_steps
    }

    pub fn total_steps(&self, n_examples: usize) -> usize {
        if self.steps > 0 {
            self.steps
        } else {
            self.optim.epochs * n_examples.div_ceil(self.samples_per_step())
        }
    }

    /// Set one field by its flat name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        let m = &mut self.model;
        let o = &mut self.optim;
        let a = &mut self.ablation;
        match key {
            "image_size_low" => m.image_size_low = parse(key, value)?,
            "image_size_high" => m.image_size_high = parse(key, value)?,
            "patch_size" => m.patch_size = parse(key, value)?,
            "embed_dim" => m.embed_dim = parse(key, value)?,
            "encoder_depth" => m.encoder_depth = parse(key, value)?,
            "decoder_depth" => m.decoder_depth = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "vocab_size" => m.vocab_size = parse(key, value)?,
            "max_text_len" => m.max_text_len = parse(key, value)?,
            "text_decoder_depth" => m.text_decoder_depth = parse(key, value)?,
            "mask_ratio_img" => m.mask_ratio_img = parse(key, value)?,
            "mask_ratio_text" => m.mask_ratio_text = parse(key, value)?,
            "sr_channels" => m.sr_channels = parse(key, value)?,
            "lr" => o.lr = parse(key, value)?,
            "weight_decay" => o.weight_decay = parse(key, value)?,
            "beta1" => o.beta1 = parse(key, value)?,
            "beta2" => o.beta2 = parse(key, value)?,
            "eps" => o.eps = parse(key, value)?,
            "grad_accum_steps" => o.grad_accum_steps = parse(key, value)?,
            "epochs" => o.epochs = parse(key, value)?,
            "batch_size" => o.batch_size = parse(key, value)?,
            "seed" => o.seed = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "lambda_neg" => self.lambda_neg = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "no_sr" => a.no_sr = parse(key, value)?,
            "no_rebalance" => a.no_rebalance = parse(key, value)?,
            "no_descriptor_mask" => a.no_descriptor_mask = parse(key, value)?,
            "no_distill" => a.no_distill = parse(key, value)?,
            _ => return Err(TrainError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Apply a flat `key = value` file; `#` starts a comment.
    pub fn apply_kv_text(&mut self, text: &str) -> Result<(), TrainError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TrainError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| TrainError::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }
}
