use ecamp_autodiff::{Graph, Scalar, Tensor, Var};

use super::TrainError;
use crate::losses::{loss_mim, loss_mlm, loss_sr, RebalanceFactors};
use crate::masking::{PatchMaskPlan, TextMaskPlan};
use crate::model::{Bound, FusionBundle, Model};

/// Everything one sample contributes to a pre-training step.
#[derive(Debug, Clone, Copy)]
pub struct StepInput<'a> {
    /// `[n_patches, P*P]`, also the reconstruction target.
    pub patches: &'a Tensor<f32>,
    /// `[1, 2H, 2W]`
    pub image_high: &'a Tensor<f32>,
    /// `[1, 2H, 2W]`
    pub attention: &'a Tensor<f32>,
    pub patch_plan: &'a PatchMaskPlan,
    /// Text ids after masking.
    pub input_ids: &'a [usize],
    /// Original ids.
    pub targets: &'a [usize],
    pub text_plan: &'a TextMaskPlan,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardLoss {
    pub l_mim: Var,
    pub l_mlm: Var,
    pub l_sr: Option<Var>,
    pub total: Var,
    pub logits: Var,
    pub fusion: FusionBundle,
}

/// The full pre-training forward pass for one sample, ending in
/// `L_MIM + L_MLM + L_SR` (the last term omitted when `use_sr` is false).
pub fn pretrain_loss<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model,
    p: &Bound,
    input: &StepInput<'_>,
    factors: &RebalanceFactors,
    use_sr: bool,
) -> Result<ForwardLoss, TrainError> {
    let plan = input.patch_plan;
    let width = input.patches.shape()[1];
    let visible: Vec<T> = plan
        .visible_indices
        .iter()
        .flat_map(|&i| input.patches.row(i).iter().map(|&v| T::from_f64_lossy(v as f64)))
        .collect();
    let visible = g.constant(Tensor::new(vec![plan.visible_indices.len(), width], visible)?);
    let f_v = model.encode_image(g, p, visible, &plan.visible_indices)?;
    let pred = model.decode_image(g, p, f_v, plan)?;
    let l_mim = loss_mim(g, pred, &input.patches.cast(), plan)?;
    let l_sr = if use_sr {
        let low = model.unpatchify(g, pred)?;
        let high = model.sr_head(g, p, low)?;
        Some(loss_sr(g, high, &input.image_high.cast(), &input.attention.cast())?)
    } else {
        None
    };
    let e_t = model.embed_text(g, p, input.input_ids)?;
    let fusion = model.mscf_fuse(g, p, f_v, e_t, None)?;
    let logits = model.decode_text(g, p, fusion.f_f, None)?;
    let l_mlm = loss_mlm(g, logits, input.targets, input.text_plan, factors)?;
    let mut total = g.add(l_mim, l_mlm)?;
    if let Some(sr) = l_sr {
        total = g.add(total, sr)?;
    }
    Ok(ForwardLoss {
        l_mim,
        l_mlm,
        l_sr,
        total,
        logits,
        fusion,
    })
}
