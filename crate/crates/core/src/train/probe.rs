use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::model::{Model, ParamStore};
use crate::rng::{derive_rng, STREAM_PROBE};
use crate::synthgen::SynthSample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeOptions {
    /// Fraction of samples used to fit each classifier; the rest is scored.
    pub train_fraction: f64,
    /// Newton iterations.
    pub max_iters: usize,
    pub l2: f64,
    /// Stop once the gradient norm falls below this.
    pub tol: f64,
    pub seed: u64,
    /// Permute the training labels (control run).
    pub shuffle_labels: bool,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            train_fraction: 0.5,
            max_iters: 50,
            l2: 1e-2,
            tol: 1e-9,
            seed: 0,
            shuffle_labels: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub per_class: BTreeMap<String, f64>,
    pub macro_accuracy: f64,
    /// Same protocol on a freshly initialized encoder.
    pub baseline_per_class: BTreeMap<String, f64>,
    pub baseline_macro: f64,
    /// Macro accuracy of always predicting the training majority.
    pub chance_macro: f64,
    /// Entities whose training labels held a single class.
    pub skipped: Vec<String>,
}

struct Split {
    train: Vec<usize>,
    test: Vec<usize>,
}

fn features(model: &Model, params: &ParamStore, samples: &[SynthSample]) -> Result<Vec<Vec<f64>>, TrainError> {
    samples
        .iter()
        .map(|s| {
            let f = model.global_features(params, &s.image_low)?;
            Ok(f.into_iter().map(f64::from).collect())
        })
        .collect()
}

/// Standardize with training-set statistics.
fn standardize(x: &[Vec<f64>], train: &[usize]) -> Vec<Vec<f64>> {
    let d = x[0].len();
    let n = train.len() as f64;
    let mut mean = vec![0.0; d];
    for &i in train {
        for j in 0..d {
            mean[j] += x[i][j] / n;
        }
    }
    let mut var = vec![0.0; d];
    for &i in train {
        for j in 0..d {
            var[j] += (x[i][j] - mean[j]).powi(2) / n;
        }
    }
    let sd: Vec<f64> = var.iter().map(|v| v.sqrt().max(1e-12)).collect();
    x.iter()
        .map(|r| (0..d).map(|j| (r[j] - mean[j]) / sd[j]).collect())
        .collect()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// L2-regularized logistic regression fitted by Newton's method. The bias
/// is not penalized.
fn fit_logistic(x: &[Vec<f64>], y: &[f64], rows: &[usize], opts: &ProbeOptions) -> (Vec<f64>, f64) {
    let d = x[0].len();
    let n = rows.len() as f64;
    // theta = [w, b]
    let mut theta = DVector::<f64>::zeros(d + 1);
    let feat = |i: usize| DVector::from_iterator(d + 1, x[i].iter().copied().chain([1.0]));
    for _ in 0..opts.max_iters {
        let mut grad = DVector::<f64>::zeros(d + 1);
        let mut hess = DMatrix::<f64>::zeros(d + 1, d + 1);
        for &i in rows {
            let f = feat(i);
            let p = sigmoid(f.dot(&theta));
            grad.axpy((p - y[i]) / n, &f, 1.0);
            hess.ger(p * (1.0 - p) / n, &f, &f, 1.0);
        }
        for j in 0..d {
            grad[j] += opts.l2 * theta[j];
            hess[(j, j)] += opts.l2;
        }
        hess[(d, d)] += 1e-9;
        if grad.norm() < opts.tol {
            break;
        }
        let Some(chol) = hess.cholesky() else {
            log::warn!("probe: singular Hessian, stopping early");
            break;
        };
        theta -= chol.solve(&grad);
    }
    (theta.rows(0, d).iter().copied().collect(), theta[d])
}

fn accuracy(x: &[Vec<f64>], y: &[f64], rows: &[usize], w: &[f64], b: f64) -> f64 {
    let hits = rows
        .iter()
        .filter(|&&i| {
            let z = b + w.iter().zip(&x[i]).map(|(a, c)| a * c).sum::<f64>();
            (z > 0.0) == (y[i] > 0.5)
        })
        .count();
    hits as f64 / rows.len() as f64
}

struct EntityProbe {
    per_class: BTreeMap<String, f64>,
    chance: BTreeMap<String, f64>,
    skipped: Vec<String>,
}

fn probe_features(
    x: &[Vec<f64>],
    samples: &[SynthSample],
    entities: &[String],
    split: &Split,
    opts: &ProbeOptions,
) -> EntityProbe {
    let x = standardize(x, &split.train);
    let mut out = EntityProbe {
        per_class: BTreeMap::new(),
        chance: BTreeMap::new(),
        skipped: Vec::new(),
    };
    for (k, e) in entities.iter().enumerate() {
        let mut y: Vec<f64> = samples.iter().map(|s| s.present(e) as u8 as f64).collect();
        if opts.shuffle_labels {
            let mut train_y: Vec<f64> = split.train.iter().map(|&i| y[i]).collect();
            train_y.shuffle(&mut derive_rng(opts.seed, &[STREAM_PROBE, 1, k as u64]));
            for (&i, v) in split.train.iter().zip(train_y) {
                y[i] = v;
            }
        }
        let positives = split.train.iter().filter(|&&i| y[i] > 0.5).count();
        if positives == 0 || positives == split.train.len() {
            log::warn!("probe: skipping `{e}`, training labels hold a single class");
            out.skipped.push(e.clone());
            continue;
        }
        let (w, b) = fit_logistic(&x, &y, &split.train, opts);
        out.per_class.insert(e.clone(), accuracy(&x, &y, &split.test, &w, b));
        let majority = 2 * positives >= split.train.len();
        let chance = split.test.iter().filter(|&&i| (y[i] > 0.5) == majority).count() as f64 / split.test.len() as f64;
        out.chance.insert(e.clone(), chance);
    }
    out
}

fn macro_mean(m: &BTreeMap<String, f64>) -> f64 {
    if m.is_empty() {
        0.0
    } else {
        m.values().sum::<f64>() / m.len() as f64
    }
}

/// Per-entity presence classifiers on frozen pooled encoder features,
/// alongside the same protocol applied to a random-init encoder drawn
/// from `opts.seed`.
pub fn linear_probe(
    model: &Model,
    params: &ParamStore,
    samples: &[SynthSample],
    entities: &[String],
    opts: &ProbeOptions,
) -> Result<ProbeResult, TrainError> {
    if samples.len() < 4 {
        return Err(TrainError::Config(format!("probe needs at least 4 samples, got {}", samples.len())));
    }
    if !(opts.train_fraction > 0.0 && opts.train_fraction < 1.0) {
        return Err(TrainError::Config(format!("train_fraction {} outside (0, 1)", opts.train_fraction)));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut derive_rng(opts.seed, &[STREAM_PROBE, 0]));
    let n_train = ((samples.len() as f64 * opts.train_fraction).round() as usize).clamp(1, samples.len() - 1);
    let split = Split {
        train: order[..n_train].to_vec(),
        test: order[n_train..].to_vec(),
    };

    let trained = probe_features(&features(model, params, samples)?, samples, entities, &split, opts);
    let (_, fresh) = Model::new(&model.config, opts.seed)?;
    let baseline = probe_features(&features(model, &fresh, samples)?, samples, entities, &split, opts);

    let mut skipped = trained.skipped.clone();
    for e in baseline.skipped {
        if !skipped.contains(&e) {
            skipped.push(e);
        }
    }
    Ok(ProbeResult {
        macro_accuracy: macro_mean(&trained.per_class),
        per_class: trained.per_class,
        baseline_macro: macro_mean(&baseline.per_class),
        baseline_per_class: baseline.per_class,
        chance_macro: macro_mean(&trained.chance),
        skipped,
    })
}
