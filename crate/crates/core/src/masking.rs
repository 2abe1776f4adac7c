//! Mask plans for both branches (exact-count sampling) and patch layout.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::corpus::{DescriptorSpan, Polarity, Token, TokenSeq, Vocab, MASK_TOKEN};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MaskError {
    #[error("mask ratio {0} outside [0, 1]")]
    Ratio(f64),
    #[error("patch mask needs at least one patch")]
    NoPatches,
    #[error("plan covers {plan} positions but the sequence has {seq}")]
    LengthMismatch { plan: usize, seq: usize },
    #[error("image {h}x{w} is not divisible into {p}x{p} patches")]
    Indivisible { h: usize, w: usize, p: usize },
}

/// `round(ratio * count)`, halves rounded up.
pub fn mask_count(ratio: f64, count: usize) -> usize {
    (ratio * count as f64).round() as usize
}

fn check_ratio(ratio: f64) -> Result<(), MaskError> {
    if (0.0..=1.0).contains(&ratio) {
        Ok(())
    } else {
        Err(MaskError::Ratio(ratio))
    }
}

/// Role of each non-pad position. The four sets are disjoint and cover all
/// non-pad positions.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TextMaskPlan {
    pub descriptor_neg_positions: BTreeSet<usize>,
    pub descriptor_oth_positions: BTreeSet<usize>,
    pub random_positions: BTreeSet<usize>,
    pub visible_positions: BTreeSet<usize>,
    /// Sequence length the plan was made for, pads included.
    pub len: usize,
}

impl TextMaskPlan {
    pub fn is_masked(&self, i: usize) -> bool {
        self.descriptor_neg_positions.contains(&i)
            || self.descriptor_oth_positions.contains(&i)
            || self.random_positions.contains(&i)
    }

    pub fn masked_count(&self) -> usize {
        self.descriptor_neg_positions.len() + self.descriptor_oth_positions.len() + self.random_positions.len()
    }

    /// Masked positions in ascending order.
    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.len).filter(|&i| self.is_masked(i)).collect()
    }
}

/// All span positions are masked by polarity; `round(ratio * c)` of the `c`
/// remaining non-pad, non-separator positions are drawn uniformly without
/// replacement. Pass no spans to disable descriptor masking.
pub fn plan_text_mask<R: Rng + ?Sized>(
    seq: &TokenSeq,
    spans: &[DescriptorSpan],
    ratio: f64,
    rng: &mut R,
) -> Result<TextMaskPlan, MaskError> {
    check_ratio(ratio)?;
    let mut plan = TextMaskPlan {
        len: seq.len(),
        ..Default::default()
    };
    for span in spans {
        let set = match span.polarity {
            Polarity::Negative => &mut plan.descriptor_neg_positions,
            Polarity::Other => &mut plan.descriptor_oth_positions,
        };
        set.extend(span.token_indices.iter().copied().filter(|&i| !seq.is_pad(i)));
    }
    let mut candidates: Vec<usize> = Vec::new();
    for (i, t) in seq.tokens.iter().enumerate() {
        if t.vocab_id == Vocab::PAD
            || plan.descriptor_neg_positions.contains(&i)
            || plan.descriptor_oth_positions.contains(&i)
        {
            continue;
        }
        if t.vocab_id == Vocab::SEP {
            plan.visible_positions.insert(i);
        } else {
            candidates.push(i);
        }
    }
    let k = mask_count(ratio, candidates.len());
    candidates.shuffle(rng);
    plan.random_positions.extend(candidates[..k].iter().copied());
    plan.visible_positions.extend(candidates[k..].iter().copied());
    Ok(plan)
}

/// Masked copy of `seq`; the original ids remain the targets.
pub fn apply_text_mask(seq: &TokenSeq, plan: &TextMaskPlan, mask_id: usize) -> Result<TokenSeq, MaskError> {
    if plan.len != seq.len() {
        return Err(MaskError::LengthMismatch {
            plan: plan.len,
            seq: seq.len(),
        });
    }
    let tokens = seq
        .tokens
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if plan.is_masked(i) && t.vocab_id != Vocab::PAD {
                Token {
                    surface: MASK_TOKEN.to_string(),
                    vocab_id: mask_id,
                    position: t.position,
                }
            } else {
                t.clone()
            }
        })
        .collect();
    Ok(TokenSeq {
        tokens,
        source: seq.source,
        boundary: seq.boundary,
    })
}

/// Sorted masked and visible patch indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchMaskPlan {
    pub masked_indices: Vec<usize>,
    pub visible_indices: Vec<usize>,
    pub n_patches: usize,
}

impl PatchMaskPlan {
    pub fn none(n_patches: usize) -> Self {
        Self {
            masked_indices: Vec::new(),
            visible_indices: (0..n_patches).collect(),
            n_patches,
        }
    }

    /// For each patch index, its row in `[visible rows, masked rows]`.
    pub fn restore_order(&self) -> Vec<usize> {
        let mut order = vec![0; self.n_patches];
        for (row, &p) in self.visible_indices.iter().chain(&self.masked_indices).enumerate() {
            order[p] = row;
        }
        order
    }
}

pub fn plan_patch_mask<R: Rng + ?Sized>(n_patches: usize, ratio: f64, rng: &mut R) -> Result<PatchMaskPlan, MaskError> {
    check_ratio(ratio)?;
    if n_patches == 0 {
        return Err(MaskError::NoPatches);
    }
    let mut idx: Vec<usize> = (0..n_patches).collect();
    idx.shuffle(rng);
    let k = mask_count(ratio, n_patches);
    let mut masked_indices = idx[..k].to_vec();
    let mut visible_indices = idx[k..].to_vec();
    masked_indices.sort_unstable();
    visible_indices.sort_unstable();
    Ok(PatchMaskPlan {
        masked_indices,
        visible_indices,
        n_patches,
    })
}

/// `out[k]` is the pixel index (row-major in `h x w`) stored at flat position
/// `k` of the `[n_patches, p*p]` patch matrix.
pub fn patch_pixel_indices(h: usize, w: usize, p: usize) -> Result<Vec<usize>, MaskError> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(MaskError::Indivisible { h, w, p });
    }
    let mut out = Vec::with_capacity(h * w);
    for py in 0..h / p {
        for px in 0..w / p {
            for y in 0..p {
                for x in 0..p {
                    out.push((py * p + y) * w + px * p + x);
                }
            }
        }
    }
    Ok(out)
}

/// Row-major patches, each flattened row-major.
pub fn patchify<T: Copy>(image: &[T], h: usize, w: usize, p: usize) -> Result<Vec<T>, MaskError> {
    assert_eq!(image.len(), h * w, "image buffer does not match {h}x{w}");
    Ok(patch_pixel_indices(h, w, p)?.into_iter().map(|i| image[i]).collect())
}

pub fn unpatchify<T: Copy + Default>(patches: &[T], h: usize, w: usize, p: usize) -> Result<Vec<T>, MaskError> {
    assert_eq!(patches.len(), h * w, "patch buffer does not match {h}x{w}");
    let mut out = vec![T::default(); h * w];
    for (k, i) in patch_pixel_indices(h, w, p)?.into_iter().enumerate() {
        out[i] = patches[k];
    }
    Ok(out)
}

/// Inverse of [`patch_pixel_indices`]: for each pixel, its flat patch position.
pub fn unpatchify_indices(h: usize, w: usize, p: usize) -> Result<Vec<usize>, MaskError> {
    let fwd = patch_pixel_indices(h, w, p)?;
    let mut inv = vec![0; fwd.len()];
    for (k, i) in fwd.into_iter().enumerate() {
        inv[i] = k;
    }
    Ok(inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SeqSource;
    use crate::rng::derive_rng;

    fn seq(n: usize) -> TokenSeq {
        let vocab = Vocab::build(["a"], []);
        TokenSeq::from_surfaces(&vec!["a"; n], &vocab, SeqSource::Original)
    }

    fn span(idx: &[usize], polarity: Polarity) -> DescriptorSpan {
        DescriptorSpan {
            mention_index: idx.last().map_or(0, |i| i + 1),
            token_indices: idx.to_vec(),
            polarity,
        }
    }

    #[test]
    fn counts_follow_the_rule() {
        let s = seq(12);
        let plan = plan_text_mask(&s, &[span(&[1, 2], Polarity::Other)], 0.75, &mut derive_rng(1, &[])).unwrap();
        assert_eq!(plan.random_positions.len(), 8);
        assert_eq!(plan.visible_positions.len(), 2);
        assert_eq!(plan.descriptor_oth_positions, BTreeSet::from([1, 2]));
        let masked = apply_text_mask(&s, &plan, Vocab::MASK).unwrap();
        assert_eq!(masked.ids().iter().filter(|&&i| i == Vocab::MASK).count(), 10);

        let plan = plan_text_mask(&seq(8), &[], 0.75, &mut derive_rng(1, &[])).unwrap();
        assert_eq!((plan.masked_count(), plan.visible_positions.len()), (6, 2));
    }

    #[test]
    fn pads_are_never_planned_or_masked() {
        let s = seq(5).padded(9);
        let plan = plan_text_mask(&s, &[], 1.0, &mut derive_rng(2, &[])).unwrap();
        assert_eq!(plan.masked_count(), 5);
        let masked = apply_text_mask(&s, &plan, Vocab::MASK).unwrap();
        assert!(masked.ids()[5..].iter().all(|&i| i == Vocab::PAD));
        assert!(masked.ids()[..5].iter().all(|&i| i == Vocab::MASK));
    }

    #[test]
    fn empty_plan_is_identity_and_lengths_are_checked() {
        let s = seq(4);
        let plan = plan_text_mask(&s, &[], 0.0, &mut derive_rng(3, &[])).unwrap();
        assert_eq!(apply_text_mask(&s, &plan, Vocab::MASK).unwrap(), s);
        assert!(matches!(
            apply_text_mask(&seq(5), &plan, Vocab::MASK),
            Err(MaskError::LengthMismatch { plan: 4, seq: 5 })
        ));
    }

    #[test]
    fn patch_plans() {
        let p = plan_patch_mask(64, 0.75, &mut derive_rng(4, &[])).unwrap();
        assert_eq!(p.masked_indices.len(), 48);
        assert_eq!(plan_patch_mask(16, 0.0, &mut derive_rng(4, &[])).unwrap(), PatchMaskPlan::none(16));
        assert_eq!(plan_patch_mask(4, 1.5, &mut derive_rng(4, &[])), Err(MaskError::Ratio(1.5)));
        let order = p.restore_order();
        let rows: Vec<usize> = p.visible_indices.iter().chain(&p.masked_indices).copied().collect();
        for (i, &r) in order.iter().enumerate() {
            assert_eq!(rows[r], i);
        }
    }

    #[test]
    fn patch_layout() {
        let img: Vec<u32> = (0..16).collect();
        let p = patchify(&img, 4, 4, 2).unwrap();
        assert_eq!(&p[..4], &[0, 1, 4, 5]);
        assert_eq!(&p[12..], &[10, 11, 14, 15]);
        assert_eq!(unpatchify(&p, 4, 4, 2).unwrap(), img);
        assert!(patchify(&img, 4, 4, 3).is_err());
        let inv = unpatchify_indices(4, 4, 2).unwrap();
        assert_eq!(inv.iter().map(|&k| p[k]).collect::<Vec<_>>(), img);
    }
}
