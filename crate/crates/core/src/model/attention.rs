use ecamp_autodiff::Graph;

use super::{bind_constants, FeatureMode, Model, ParamStore};
use crate::corpus::{annotate, tokenize, EntityLexicon, Polarity, Vocab, DEFAULT_BETA};
use crate::synthgen::{AttentionMapProvider, SynthSample};

/// Word-to-patch cosine similarity from frozen parameters: for each patch,
/// the best match between its encoder feature and the token embedding of
/// any entity the report asserts, clipped at zero, peak-normalized and
/// spread over the patch's pixels.
pub struct ModelAttention<'a> {
    pub model: &'a Model,
    pub params: &'a ParamStore,
    pub vocab: &'a Vocab,
    pub lexicon: &'a EntityLexicon,
}

fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let dot: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f32>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f32>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

impl ModelAttention<'_> {
    fn patch_scores(&self, sample: &SynthSample) -> Option<Vec<f32>> {
        let seq = tokenize(&sample.report_text, self.vocab, self.model.config.max_text_len).ok()?;
        let ann = annotate(&sample.id, seq, self.lexicon, DEFAULT_BETA);
        let ids: Vec<usize> = ann
            .spans
            .iter()
            .filter(|s| s.polarity == Polarity::Other && !s.token_indices.is_empty())
            .map(|s| ann.seq.tokens[s.mention_index].vocab_id)
            .collect();
        if ids.is_empty() {
            return None;
        }
        let mut g = Graph::<f32>::new();
        let p = bind_constants(self.params, &mut g);
        let local = self
            .model
            .forward_finetune(&mut g, &p, &sample.image_low, FeatureMode::Local)
            .ok()?;
        let local = g.value(local);
        let table = self.params.get(self.model.token_embed);
        let scores: Vec<f32> = (0..local.shape()[0])
            .map(|n| {
                ids.iter()
                    .map(|&id| cosine(local.row(n), table.row(id)))
                    .fold(0.0f32, f32::max)
            })
            .collect();
        let peak = scores.iter().copied().fold(0.0f32, f32::max);
        (peak > 0.0).then(|| scores.iter().map(|s| s / peak).collect())
    }
}

impl AttentionMapProvider for ModelAttention<'_> {
    fn attention_map(&self, sample: &SynthSample) -> Vec<f32> {
        let side = sample.canvas;
        let Some(scores) = self.patch_scores(sample) else {
            return vec![0.0; side * side];
        };
        let grid = self.model.config.grid();
        let cell = side / grid;
        (0..side * side)
            .map(|i| {
                let (y, x) = (i / side / cell, i % side / cell);
                scores[y.min(grid - 1) * grid + x.min(grid - 1)]
            })
            .collect()
    }
}
