use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ecamp_autodiff::Graph;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{load_checkpoint, pretrain_loss, save_checkpoint, AdamW, Checkpoint, Dataset, StepInput, TrainConfig, TrainError};
use crate::corpus::Vocab;
use crate::losses::{compute_rebalance, loss_total, RebalanceFactors};
use crate::masking::{apply_text_mask, plan_patch_mask, plan_text_mask, PatchMaskPlan, TextMaskPlan};
use crate::model::{bind_constants, Model, ParamStore};
use crate::rng::{derive_rng, STREAM_BATCH, STREAM_IMAGE, STREAM_PROBE, STREAM_TEXT};

const RUNNING_DECAY: f64 = 0.9;

/// One logged step. `wall_ms` is the only field that varies between runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub l_mim: f64,
    pub l_mlm: f64,
    pub l_sr: f64,
    pub total: f64,
    pub wall_ms: u64,
}

impl StepMetrics {
    /// Loss values as raw bits, for exact comparisons.
    pub fn loss_bits(&self) -> [u64; 4] {
        [self.l_mim, self.l_mlm, self.l_sr, self.total].map(f64::to_bits)
    }
}

/// Masks drawn for one sample slot of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePlan {
    pub example: usize,
    pub patch_plan: PatchMaskPlan,
    pub text_plan: TextMaskPlan,
    pub input_ids: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Masked-token accuracy split by the role of the masked position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MlmAccuracy {
    pub oth_correct: u64,
    pub oth_total: u64,
    pub neg_correct: u64,
    pub neg_total: u64,
    pub random_correct: u64,
    pub random_total: u64,
}

fn rate(c: u64, n: u64) -> f64 {
    if n == 0 {
        0.0
    } else {
        c as f64 / n as f64
    }
}

impl MlmAccuracy {
    pub fn oth(&self) -> f64 {
        rate(self.oth_correct, self.oth_total)
    }

    pub fn neg(&self) -> f64 {
        rate(self.neg_correct, self.neg_total)
    }

    pub fn random(&self) -> f64 {
        rate(self.random_correct, self.random_total)
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Sums {
    l_mim: f64,
    l_mlm: f64,
    l_sr: f64,
}

/// Owns the parameters and optimizer state for one pre-training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub params: ParamStore,
    pub optimizer: AdamW,
    /// Optimizer steps completed.
    pub step: u64,
    /// Exponential moving average of the logged total loss.
    pub running_total: Option<f64>,
    pub factors: RebalanceFactors,
    data: Dataset,
}

impl Trainer {
    /// Fresh parameters from `config.optim.seed`. The model vocabulary size
    /// is taken from the dataset.
    pub fn new(mut config: TrainConfig, data: Dataset) -> Result<Self, TrainError> {
        config.model.vocab_size = data.vocab.len();
        config.validate()?;
        if data.is_empty() {
            return Err(TrainError::Config("empty dataset".into()));
        }
        let (model, params) = Model::new(&config.model, config.optim.seed)?;
        let factors = Self::rebalance(&config, &data)?;
        let optimizer = AdamW::new(&params);
        Ok(Self {
            config,
            model,
            params,
            optimizer,
            step: 0,
            running_total: None,
            factors,
            data,
        })
    }

    /// Resume from `dir`; `config.model` must describe the same shapes.
    pub fn from_checkpoint(config: TrainConfig, data: Dataset, dir: &Path) -> Result<Self, TrainError> {
        let mut t = Self::new(config, data)?;
        let ck = load_checkpoint(dir, Some(&t.config.model))?;
        if ck.vocab != t.data.vocab {
            return Err(TrainError::Checkpoint("vocabulary differs from the dataset".into()));
        }
        if ck.seed != t.config.optim.seed {
            return Err(TrainError::Checkpoint(format!(
                "checkpoint seed {} differs from configured seed {}",
                ck.seed, t.config.optim.seed
            )));
        }
        t.params = ck.params;
        t.optimizer = ck.optimizer.unwrap_or_else(|| AdamW::new(&t.params));
        t.step = ck.step;
        t.running_total = ck.running_total;
        Ok(t)
    }

    fn rebalance(config: &TrainConfig, data: &Dataset) -> Result<RebalanceFactors, TrainError> {
        let stats = data.stats(!config.ablation.no_distill)?;
        if config.ablation.no_rebalance {
            Ok(RebalanceFactors::unit(stats.neg_tokens, stats.oth_tokens))
        } else {
            Ok(compute_rebalance(stats.neg_tokens, stats.oth_tokens, config.lambda_neg)?)
        }
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn vocab(&self) -> &Vocab {
        &self.data.vocab
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            seed: self.config.optim.seed,
            model: self.config.model.clone(),
            vocab: self.data.vocab.clone(),
            params: self.params.clone(),
            optimizer: Some(self.optimizer.clone()),
            running_total: self.running_total,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<(), TrainError> {
        save_checkpoint(dir, &self.checkpoint())
    }

    /// Dataset indices consumed by `step`, in slot order. The data stream is
    /// a sequence of per-epoch permutations read `samples_per_step` at a time.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let n = self.data.len() as u64;
        let per = self.config.samples_per_step() as u64;
        let mut out = Vec::with_capacity(per as usize);
        let mut cached: Option<(u64, Vec<usize>)> = None;
        for c in step * per..(step + 1) * per {
            let epoch = c / n;
            if cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
                let mut perm: Vec<usize> = (0..n as usize).collect();
                perm.shuffle(&mut derive_rng(self.config.optim.seed, &[STREAM_BATCH, epoch]));
                cached = Some((epoch, perm));
            }
            out.push(cached.as_ref().expect("permutation").1[(c % n) as usize]);
        }
        out
    }

    fn plan_for(&self, example: usize, text_coords: &[u64], image_coords: &[u64]) -> Result<SamplePlan, TrainError> {
        let seed = self.config.optim.seed;
        let ex = &self.data.examples[example];
        let text = ex.text(!self.config.ablation.no_distill);
        let spans = if self.config.ablation.no_descriptor_mask {
            &[][..]
        } else {
            &text.spans[..]
        };
        let text_plan = plan_text_mask(
            &text.seq,
            spans,
            self.config.model.mask_ratio_text,
            &mut derive_rng(seed, text_coords),
        )?;
        let masked = apply_text_mask(&text.seq, &text_plan, Vocab::MASK)?;
        let patch_plan = plan_patch_mask(
            self.config.model.n_patches(),
            self.config.model.mask_ratio_img,
            &mut derive_rng(seed, image_coords),
        )?;
        Ok(SamplePlan {
            example,
            patch_plan,
            text_plan,
            input_ids: masked.ids(),
            targets: text.seq.ids(),
        })
    }

    /// Mask plans of every slot of `step`.
    pub fn plan_step(&self, step: u64) -> Result<Vec<SamplePlan>, TrainError> {
        self.batch_indices(step)
            .into_iter()
            .enumerate()
            .map(|(slot, ex)| {
                let slot = slot as u64;
                self.plan_for(ex, &[STREAM_TEXT, step, slot], &[STREAM_IMAGE, step, slot])
            })
            .collect()
    }

    fn input<'a>(&'a self, plan: &'a SamplePlan) -> StepInput<'a> {
        let ex = &self.data.examples[plan.example];
        StepInput {
            patches: &ex.patches,
            image_high: &ex.image_high,
            attention: &ex.attention,
            patch_plan: &plan.patch_plan,
            input_ids: &plan.input_ids,
            targets: &plan.targets,
            text_plan: &plan.text_plan,
        }
    }

    /// Forward and backward for one sample; adds its gradients into `acc`.
    fn accumulate(&self, step: u64, plan: &SamplePlan, acc: &mut [Vec<f32>], sums: &mut Sums) -> Result<(), TrainError> {
        let mut g = Graph::<f32>::new();
        let p = self.params.bind(&mut g);
        let use_sr = !self.config.ablation.no_sr;
        let out = pretrain_loss(&mut g, &self.model, &p, &self.input(plan), &self.factors, use_sr)?;
        let l_mim = g.value(out.l_mim).item() as f64;
        let l_mlm = g.value(out.l_mlm).item() as f64;
        let l_sr = out.l_sr.map(|v| g.value(v).item() as f64).unwrap_or(0.0);
        for (term, value) in [("l_mim", l_mim), ("l_mlm", l_mlm), ("l_sr", l_sr)] {
            if !value.is_finite() {
                return Err(TrainError::NonFiniteLoss { step, term, value });
            }
        }
        sums.l_mim += l_mim;
        sums.l_mlm += l_mlm;
        sums.l_sr += l_sr;
        g.backward(out.total)?;
        for (i, v) in p.vars().iter().enumerate() {
            if let Some(grad) = g.grad(*v) {
                for (a, b) in acc[i].iter_mut().zip(grad) {
                    *a += *b;
                }
            }
        }
        Ok(())
    }

    /// Mean-reduced gradients and losses of `step` at the current
    /// parameters, without updating them. Each micro-batch gradient is the
    /// mean over its samples; the step gradient is the mean over micro-batches.
    pub fn gradients(&self, step: u64) -> Result<(Vec<Vec<f32>>, StepMetrics), TrainError> {
        let start = Instant::now();
        let plans = self.plan_step(step)?;
        let b = self.config.optim.batch_size;
        let k = self.config.optim.grad_accum_steps;
        let zeros = || -> Vec<Vec<f32>> { self.params.values().iter().map(|t| vec![0.0; t.numel()]).collect() };
        let mut total = zeros();
        let mut sums = Sums::default();
        for micro in plans.chunks(b) {
            let mut acc = zeros();
            for plan in micro {
                self.accumulate(step, plan, &mut acc, &mut sums)?;
            }
            let scale = 1.0 / micro.len() as f32;
            for (t, a) in total.iter_mut().zip(&acc) {
                for (x, y) in t.iter_mut().zip(a) {
                    *x += scale * y;
                }
            }
        }
        let inv_k = 1.0 / k as f32;
        for t in &mut total {
            for x in t.iter_mut() {
                *x *= inv_k;
            }
        }
        let n = plans.len() as f64;
        let bundle = loss_total(sums.l_mim / n, sums.l_mlm / n, sums.l_sr / n)?;
        let metrics = StepMetrics {
            step,
            l_mim: bundle.l_mim,
            l_mlm: bundle.l_mlm,
            l_sr: bundle.l_sr,
            total: bundle.total,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        Ok((total, metrics))
    }

    /// Mean losses of `step` at the current parameters, forward only.
    pub fn losses(&self, step: u64) -> Result<StepMetrics, TrainError> {
        let start = Instant::now();
        let plans = self.plan_step(step)?;
        let mut sums = Sums::default();
        for plan in &plans {
            let mut g = Graph::<f32>::new();
            let p = bind_constants(&self.params, &mut g);
            let out = pretrain_loss(
                &mut g,
                &self.model,
                &p,
                &self.input(plan),
                &self.factors,
                !self.config.ablation.no_sr,
            )?;
            sums.l_mim += g.value(out.l_mim).item() as f64;
            sums.l_mlm += g.value(out.l_mlm).item() as f64;
            sums.l_sr += out.l_sr.map(|v| g.value(v).item() as f64).unwrap_or(0.0);
        }
        let n = plans.len() as f64;
        let bundle = loss_total(sums.l_mim / n, sums.l_mlm / n, sums.l_sr / n)?;
        Ok(StepMetrics {
            step,
            l_mim: bundle.l_mim,
            l_mlm: bundle.l_mlm,
            l_sr: bundle.l_sr,
            total: bundle.total,
            wall_ms: start.elapsed().as_millis() as u64,
        })
    }

    /// One optimizer step. The returned losses are those before the update.
    pub fn train_step(&mut self) -> Result<StepMetrics, TrainError> {
        let start = Instant::now();
        let (grads, mut metrics) = self.gradients(self.step)?;
        self.optimizer.step(&mut self.params, &grads, &self.config.optim)?;
        self.step += 1;
        self.running_total = Some(match self.running_total {
            None => metrics.total,
            Some(r) => RUNNING_DECAY * r + (1.0 - RUNNING_DECAY) * metrics.total,
        });
        metrics.wall_ms = start.elapsed().as_millis() as u64;
        Ok(metrics)
    }

    /// Run `steps` steps, writing one JSON line per step to `metrics` and a
    /// checkpoint to `checkpoint_dir` every `checkpoint_every` steps.
    pub fn run(
        &mut self,
        steps: usize,
        mut metrics: Option<&mut dyn Write>,
        checkpoint_dir: Option<&Path>,
    ) -> Result<Vec<StepMetrics>, TrainError> {
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let m = self.train_step()?;
            log::debug!("step {} total {:.5}", m.step, m.total);
            if let Some(w) = metrics.as_deref_mut() {
                let line = serde_json::to_string(&m).expect("metrics serialize");
                writeln!(w, "{line}").map_err(|e| TrainError::Io {
                    path: "metrics".into(),
                    msg: e.to_string(),
                })?;
            }
            let every = self.config.checkpoint_every as u64;
            if let Some(dir) = checkpoint_dir {
                if every > 0 && self.step % every == 0 {
                    self.save(dir)?;
                }
            }
            out.push(m);
        }
        Ok(out)
    }

    /// Masked-token accuracy on `data` with descriptor masking on, using
    /// evaluation masks drawn from `seed`.
    pub fn mlm_accuracy(&self, data: &Dataset, seed: u64) -> Result<MlmAccuracy, TrainError> {
        if data.vocab != self.data.vocab {
            return Err(TrainError::Config("evaluation vocabulary differs from training".into()));
        }
        let mut acc = MlmAccuracy::default();
        let unit = RebalanceFactors::unit(1, 1);
        for (i, ex) in data.examples.iter().enumerate() {
            let i = i as u64;
            let text = ex.text(!self.config.ablation.no_distill);
            let text_plan = plan_text_mask(
                &text.seq,
                &text.spans,
                self.config.model.mask_ratio_text,
                &mut derive_rng(seed, &[STREAM_PROBE, STREAM_TEXT, i]),
            )?;
            let patch_plan = plan_patch_mask(
                self.config.model.n_patches(),
                self.config.model.mask_ratio_img,
                &mut derive_rng(seed, &[STREAM_PROBE, STREAM_IMAGE, i]),
            )?;
            let input_ids = apply_text_mask(&text.seq, &text_plan, Vocab::MASK)?.ids();
            let targets = text.seq.ids();
            let input = StepInput {
                patches: &ex.patches,
                image_high: &ex.image_high,
                attention: &ex.attention,
                patch_plan: &patch_plan,
                input_ids: &input_ids,
                targets: &targets,
                text_plan: &text_plan,
            };
            let mut g = Graph::<f32>::new();
            let p = bind_constants(&self.params, &mut g);
            let out = pretrain_loss(&mut g, &self.model, &p, &input, &unit, false)?;
            let logits = g.value(out.logits);
            for pos in text_plan.masked_positions() {
                let row = logits.row(pos);
                let pred = row
                    .iter()
                    .enumerate()
                    .fold((0, f32::NEG_INFINITY), |b, (j, &v)| if v > b.1 { (j, v) } else { b })
                    .0;
                let hit = (pred == targets[pos]) as u64;
                if text_plan.descriptor_oth_positions.contains(&pos) {
                    acc.oth_total += 1;
                    acc.oth_correct += hit;
                } else if text_plan.descriptor_neg_positions.contains(&pos) {
                    acc.neg_total += 1;
                    acc.neg_correct += hit;
                } else {
                    acc.random_total += 1;
                    acc.random_correct += hit;
                }
            }
        }
        Ok(acc)
    }
}
