use std::collections::HashMap;

use ecamp_autodiff::Tensor;

use super::TrainError;
use crate::corpus::{annotate, compute_stats, tokenize, AnnotatedSeq, CorpusStats, EntityLexicon, Vocab, DEFAULT_BETA};
use crate::distill::{concat_input, distill_rule_based};
use crate::masking::patchify;
use crate::synthgen::{AttentionMapProvider, SynthSample};

/// One paired training example with its text fully annotated.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub id: String,
    /// `[n_patches, P*P]` patches of the low-resolution image.
    pub patches: Tensor<f32>,
    /// `[1, 2H, 2W]`
    pub image_high: Tensor<f32>,
    /// `[1, 2H, 2W]` super-resolution weighting.
    pub attention: Tensor<f32>,
    pub image_low: Vec<f32>,
    /// Original report only.
    pub original: AnnotatedSeq,
    /// `[original, distilled]`.
    pub concatenated: AnnotatedSeq,
}

impl TrainExample {
    pub fn text(&self, use_distill: bool) -> &AnnotatedSeq {
        if use_distill {
            &self.concatenated
        } else {
            &self.original
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab: Vocab,
    pub examples: Vec<TrainExample>,
    pub patch_size: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Descriptor statistics of the text the model will actually see.
    pub fn stats(&self, use_distill: bool) -> Result<CorpusStats, TrainError> {
        let docs: Vec<AnnotatedSeq> = self.examples.iter().map(|e| e.text(use_distill).clone()).collect();
        Ok(compute_stats(&docs)?)
    }
}

/// Tokenize, annotate and distill every sample. `distilled` maps sample ids
/// to externally distilled text; missing ids fall back to the rule-based
/// distiller. The vocabulary covers originals and distilled text alike, so
/// it does not depend on whether distillation is used for training.
pub fn build_dataset(
    samples: &[SynthSample],
    distilled: Option<&HashMap<String, String>>,
    lexicon: &EntityLexicon,
    attention: &dyn AttentionMapProvider,
    patch_size: usize,
    max_text_len: usize,
    vocab: Option<Vocab>,
) -> Result<Dataset, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::Config("no training samples".into()));
    }
    let specials = Vocab::specials();
    let mut originals = Vec::with_capacity(samples.len());
    let mut distilled_texts = Vec::with_capacity(samples.len());
    for s in samples {
        let seq = tokenize(&s.report_text, &specials, max_text_len)?;
        let ann = annotate(&s.id, seq, lexicon, DEFAULT_BETA);
        let text = match distilled.and_then(|m| m.get(&s.id)) {
            Some(t) => t.clone(),
            None => distill_rule_based(&ann).text(),
        };
        originals.push(s.report_text.clone());
        distilled_texts.push(text);
    }
    let vocab = vocab.unwrap_or_else(|| {
        Vocab::build(
            originals.iter().chain(&distilled_texts).map(String::as_str),
            lexicon.entities().iter().map(String::as_str),
        )
    });
    let mut examples = Vec::with_capacity(samples.len());
    for ((s, orig_text), dist_text) in samples.iter().zip(&originals).zip(&distilled_texts) {
        let original = tokenize(orig_text, &vocab, max_text_len)?;
        let concat = match tokenize(dist_text, &vocab, max_text_len) {
            Ok(d) => concat_input(&original, &d, max_text_len),
            Err(_) => concat_input(&original, &original.truncated(0), max_text_len),
        };
        let side = s.canvas;
        let low = side / 2;
        let patches = patchify(&s.image_low, low, low, patch_size)?;
        let n = (low / patch_size).pow(2);
        examples.push(TrainExample {
            id: s.id.clone(),
            patches: Tensor::new(vec![n, patch_size * patch_size], patches)?,
            image_high: Tensor::new(vec![1, side, side], s.image_high.clone())?,
            attention: Tensor::new(vec![1, side, side], attention.attention_map(s))?,
            image_low: s.image_low.clone(),
            original: annotate(&s.id, original, lexicon, DEFAULT_BETA),
            concatenated: annotate(&s.id, concat, lexicon, DEFAULT_BETA),
        });
    }
    Ok(Dataset {
        vocab,
        examples,
        patch_size,
    })
}
