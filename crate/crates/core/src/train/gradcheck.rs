use ecamp_autodiff::{grad_check_sampled_with, AutodiffError, CheckOptions, Tensor};
use serde::{Deserialize, Serialize};

use super::{build_dataset, pretrain_loss, StepInput, TrainError};
use crate::corpus::{EntityLexicon, Vocab};
use crate::losses::compute_rebalance;
use crate::masking::{apply_text_mask, plan_patch_mask, plan_text_mask};
use crate::model::{Bound, Model, ModelConfig};
use crate::rng::{derive_rng, STREAM_IMAGE, STREAM_PROBE, STREAM_SYNTH, STREAM_TEXT};
use crate::synthgen::{gen_sample, GroundTruthAttention, SynthSpec};

pub const COMPOSITE_EPS: f64 = 1e-3;
/// Gradients below this magnitude are compared absolutely.
pub const COMPOSITE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompositeCheck {
    pub trials: usize,
    pub checked: usize,
    pub max_rel_error: f64,
}

/// A model small enough to finite-difference every parameter tensor.
pub fn tiny_config(vocab_size: usize, max_text_len: usize) -> ModelConfig {
    ModelConfig {
        image_size_low: 8,
        image_size_high: 16,
        patch_size: 4,
        embed_dim: 8,
        encoder_depth: 1,
        decoder_depth: 1,
        heads: 2,
        vocab_size,
        max_text_len,
        text_decoder_depth: 1,
        mask_ratio_img: 0.5,
        mask_ratio_text: 0.5,
        sr_channels: 2,
    }
}

/// Finite-difference check of the full pre-training loss (MIM + re-balanced
/// MLM + SR) with respect to every parameter tensor of a tiny model, at
/// 64-bit precision. Each trial draws a fresh sample, masks and init.
pub fn composite_gradcheck(trials: usize, seed: u64, coords_per_param: usize) -> Result<CompositeCheck, TrainError> {
    let lexicon = EntityLexicon::default();
    let spec = SynthSpec {
        canvas: 16,
        p_positive: 0.5,
        seed,
        ..Default::default()
    };
    let max_len = 48;
    let mut out = CompositeCheck {
        trials,
        checked: 0,
        max_rel_error: 0.0,
    };
    for t in 0..trials as u64 {
        let sample = gen_sample(&spec, "g", &mut derive_rng(seed, &[STREAM_SYNTH, t]));
        let data = build_dataset(&[sample], None, &lexicon, &GroundTruthAttention, 4, max_len, None)?;
        let ex = &data.examples[0];
        let config = tiny_config(data.vocab.len(), max_len);
        let (model, params) = Model::new(&config, seed.wrapping_add(t))?;
        let text = &ex.concatenated;
        let text_plan = plan_text_mask(&text.seq, &text.spans, 0.5, &mut derive_rng(seed, &[STREAM_TEXT, t]))?;
        let patch_plan = plan_patch_mask(config.n_patches(), 0.5, &mut derive_rng(seed, &[STREAM_IMAGE, t]))?;
        let input_ids = apply_text_mask(&text.seq, &text_plan, Vocab::MASK)?.ids();
        let targets = text.seq.ids();
        let factors = compute_rebalance(40, 2, 0.05)?;
        let input = StepInput {
            patches: &ex.patches,
            image_high: &ex.image_high,
            attention: &ex.attention,
            patch_plan: &patch_plan,
            input_ids: &input_ids,
            targets: &targets,
            text_plan: &text_plan,
        };
        let inputs: Vec<Tensor<f64>> = params.values().iter().map(|v| v.cast()).collect();
        let report = grad_check_sampled_with(
            |g, vars| {
                let p = Bound::from_vars(vars.to_vec());
                pretrain_loss(g, &model, &p, &input, &factors, true)
                    .map(|o| o.total)
                    .map_err(|e| AutodiffError::Invalid {
                        op: "pretrain_loss",
                        detail: e.to_string(),
                    })
            },
            &inputs,
            coords_per_param,
            crate::rng::derive_seed(seed, &[STREAM_PROBE, t]),
            CheckOptions {
                eps: COMPOSITE_EPS,
                floor: COMPOSITE_FLOOR,
                five_point: true,
            },
        )?;
        out.checked += report.checked;
        out.max_rel_error = out.max_rel_error.max(report.max_rel_error);
    }
    Ok(out)
}
