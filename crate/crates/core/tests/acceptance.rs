//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run a subset with `cargo test -p ecamp-core --test acceptance -- 1 5 10`.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ecamp_autodiff::{op_suite, Graph, Tensor};
use ecamp_core::corpus::{annotate, compute_stats, tokenize, AnnotatedSeq, EntityLexicon, Vocab, DEFAULT_BETA};
use ecamp_core::distill::{distill_rule_based, parse_distilled, DistilledSentence, Modality};
use ecamp_core::losses::{compute_rebalance, loss_mim, loss_sr, mlm_weights, RebalanceFactors};
use ecamp_core::masking::{mask_count, plan_patch_mask, plan_text_mask};
use ecamp_core::model::{bind_constants, param_group, Model, ModelConfig};
use ecamp_core::rng::derive_rng;
use ecamp_core::synthgen::{gen_corpus, GroundTruthAttention, SynthSample, SynthSpec};
use ecamp_core::train::{
    build_dataset, composite_gradcheck, linear_probe, Dataset, ProbeOptions, StepMetrics, TrainConfig, Trainer,
};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, ToPrimitive};
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Criteria that cannot be met at desk scale; they still run and report
/// FAIL, but do not fail the suite. Reasons are in the README.
const KNOWN_UNMET: &[u32] = &[9];

type Outcome = Result<(bool, String), String>;

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn main() -> ExitCode {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria = [
        Criterion { id: 1, name: "rebalance identity", budget: Duration::from_secs(1), run: crit1 },
        Criterion { id: 2, name: "masking contract", budget: Duration::from_secs(5), run: crit2 },
        Criterion { id: 3, name: "gradient correctness", budget: Duration::from_secs(120), run: crit3 },
        Criterion { id: 4, name: "fusion dual-path gradient", budget: Duration::from_secs(10), run: crit4 },
        Criterion { id: 5, name: "loss support", budget: Duration::from_secs(5), run: crit5 },
        Criterion { id: 6, name: "pipeline round-trips", budget: Duration::from_secs(30), run: crit6 },
        Criterion { id: 7, name: "training sanity", budget: Duration::from_secs(600), run: crit7 },
        Criterion { id: 8, name: "rebalancing efficacy", budget: Duration::from_secs(1800), run: crit8 },
        Criterion { id: 9, name: "pre-training transfer", budget: Duration::from_secs(900), run: crit9 },
        Criterion { id: 10, name: "ablation isolation", budget: Duration::from_secs(120), run: crit10 },
    ];
    let mut unexpected = Vec::new();
    let mut passed = 0;
    let mut ran = 0;
    for c in criteria.iter().filter(|c| wanted.is_empty() || wanted.contains(&c.id)) {
        ran += 1;
        let start = Instant::now();
        let outcome = (c.run)();
        let took = start.elapsed();
        let (ok, detail) = match outcome {
            Ok((ok, d)) => (ok, d),
            Err(e) => (false, format!("error: {e}")),
        };
        let in_time = took <= c.budget;
        let pass = ok && in_time;
        let timing = format!("{:.1}s of {}s", took.as_secs_f64(), c.budget.as_secs());
        let timing = if in_time { timing } else { format!("{timing}, over budget") };
        let tag = match (pass, KNOWN_UNMET.contains(&c.id)) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known)",
            (false, false) => "FAIL",
        };
        println!("criterion {:>2} {tag}: {} | {detail} | {timing}", c.id, c.name);
        if pass {
            passed += 1;
        } else if !KNOWN_UNMET.contains(&c.id) {
            unexpected.push(c.id);
        }
    }
    println!("acceptance: {passed}/{ran} criteria passed");
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("unexpected failures: {unexpected:?}");
        ExitCode::FAILURE
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn rational(v: f64) -> BigRational {
    BigRational::from_float(v).expect("finite")
}

fn ulp(x: f64) -> f64 {
    f64::from_bits(x.to_bits() + 1) - x
}

fn crit1() -> Outcome {
    let mut rng = derive_rng(2024, &[1]);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n_neg: u64 = rng.gen_range(0..1_000_000);
        let n_oth: u64 = rng.gen_range(1..1_000_000);
        let lambda_neg: f64 = 1.0 - rng.gen::<f64>();
        let f = compute_rebalance(n_neg, n_oth, lambda_neg).map_err(err)?;
        let int = |v: u64| BigRational::from_integer(BigInt::from(v));
        let lhs = rational(f.lambda_neg) * int(n_neg) + rational(f.lambda_oth) * int(n_oth);
        let n_a = (n_neg + n_oth) as f64;
        let diff = (lhs - int(n_neg + n_oth)).abs();
        let in_ulps = diff.to_f64().unwrap_or(f64::INFINITY) / ulp(n_a);
        worst = worst.max(in_ulps);
    }
    let anchor = compute_rebalance(20_000, 1_000, 0.05).map_err(err)?.lambda_oth;
    Ok((
        worst <= 1.0 && anchor == 20.0,
        format!("worst residual {worst:.3} ulp over 1000 triples; 20:1 at 0.05 gives {anchor}"),
    ))
}

fn lexicon() -> EntityLexicon {
    EntityLexicon::default()
}

fn annotated(text: &str, lex: &EntityLexicon) -> Result<AnnotatedSeq, String> {
    let vocab = Vocab::build([text], lex.entities().iter().map(String::as_str));
    let seq = tokenize(text, &vocab, 128).map_err(err)?;
    Ok(annotate("a", seq, lex, DEFAULT_BETA))
}

fn crit2() -> Outcome {
    let lex = lexicon();
    let text = "there is mild nodule . the heart size is normal . there is no pneumonia . \
                lungs are clear bilaterally . there is no effusion and there is severe atelectasis .";
    let a = annotated(text, &lex)?;
    let descriptor: Vec<usize> = a.spans.iter().flat_map(|s| s.token_indices.clone()).collect();
    let candidates: Vec<usize> = (0..a.seq.len())
        .filter(|i| !descriptor.contains(i) && !a.seq.is_pad(*i) && a.seq.tokens[*i].vocab_id != Vocab::SEP)
        .collect();
    let c = candidates.len();
    let k = mask_count(0.75, c);
    let mut counts: BTreeMap<usize, u64> = BTreeMap::new();
    let (mut all_desc, mut exact) = (true, true);
    let trials = 1000;
    for t in 0..trials {
        let plan = plan_text_mask(&a.seq, &a.spans, 0.75, &mut derive_rng(7, &[2, t])).map_err(err)?;
        all_desc &= descriptor.iter().all(|&i| plan.is_masked(i));
        exact &= plan.random_positions.len() == k;
        for &i in &plan.random_positions {
            *counts.entry(i).or_default() += 1;
        }
    }
    let p = k as f64 / c as f64;
    let expected = trials as f64 * p;
    // Each plan draws without replacement, so per-position variance is T p (1 - p).
    let chi2: f64 = candidates
        .iter()
        .map(|i| {
            let o = *counts.get(i).unwrap_or(&0) as f64;
            (o - expected).powi(2) / (expected * (1.0 - p))
        })
        .sum();
    let critical = ChiSquared::new((c - 1) as f64).map_err(err)?.inverse_cdf(0.99);
    Ok((
        all_desc && exact && chi2 < critical && counts.keys().all(|i| candidates.contains(i)),
        format!(
            "{} descriptor positions always masked: {all_desc}; random count {k} of {c} every plan: {exact}; chi2 {chi2:.2} < {critical:.2}",
            descriptor.len()
        ),
    ))
}

fn crit3() -> Outcome {
    let ops = op_suite(100, 3).map_err(err)?;
    let (worst_op, worst) = ops
        .iter()
        .map(|o| (o.op, o.max_rel_error))
        .fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let composite = composite_gradcheck(100, 3, 2).map_err(err)?;
    Ok((
        worst < 1e-4 && composite.max_rel_error < 1e-4,
        format!(
            "{} ops, worst {worst_op} {worst:.2e}; composite loss {:.2e} over {} coordinates",
            ops.len(),
            composite.max_rel_error,
            composite.checked
        ),
    ))
}

fn small_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        embed_dim: 32,
        encoder_depth: 2,
        decoder_depth: 1,
        text_decoder_depth: 1,
        vocab_size,
        ..Default::default()
    }
}

fn crit4() -> Outcome {
    let config = small_config(40);
    let (model, params) = Model::new(&config, 4).map_err(err)?;
    let d = config.embed_dim;
    let mut rng = derive_rng(4, &[4]);
    let (mut min_global, mut min_local) = (f64::INFINITY, f64::INFINITY);
    for _ in 0..4 {
        let f_v = Tensor::from_fn(&[12, d], |_| rng.gen_range(-1.0..1.0));
        let e_t = Tensor::from_fn(&[10, d], |_| rng.gen_range(-1.0..1.0));
        let targets: Vec<usize> = (0..10).map(|_| rng.gen_range(0..40)).collect();
        for path in ["global", "local"] {
            let mut g = Graph::<f64>::new();
            let p = bind_constants(&params, &mut g);
            let fv = g.param(f_v.clone());
            let et = g.constant(e_t.clone());
            let b = model.mscf_fuse(&mut g, &p, fv, et, None).map_err(err)?;
            let fused = if path == "global" {
                g.add_row(b.f_t, b.f_a_global).map_err(err)?
            } else {
                g.add(b.f_t, b.f_a_local).map_err(err)?
            };
            let logits = model.decode_text(&mut g, &p, fused, None).map_err(err)?;
            let loss = g.cross_entropy_with_logits(logits, &targets, &[1.0; 10]).map_err(err)?;
            g.backward(loss).map_err(err)?;
            let norm = g.grad_tensor(fv).data().iter().map(|v| v * v).sum::<f64>().sqrt();
            if path == "global" {
                min_global = min_global.min(norm);
            } else {
                min_local = min_local.min(norm);
            }
        }
    }
    Ok((
        min_global > 1e-8 && min_local > 1e-8,
        format!("min |dL/df_v_local| with cross-attention removed {min_global:.3e}, with pooled path removed {min_local:.3e}"),
    ))
}

fn crit5() -> Outcome {
    let mut rng = derive_rng(5, &[5]);
    let n = 16;
    let w = 64;
    let plan = plan_patch_mask(n, 0.75, &mut rng).map_err(err)?;
    let pred = Tensor::from_fn(&[n, w], |_| rng.gen_range(-1.0..1.0));
    let target = Tensor::from_fn(&[n, w], |_| rng.gen_range(-1.0..1.0));
    let mut perturbed = target.clone();
    for &i in &plan.visible_indices {
        for j in 0..w {
            perturbed.data_mut()[i * w + j] += rng.gen_range(-5.0..5.0);
        }
    }
    let mim = |t: &Tensor<f64>| -> Result<f64, String> {
        let mut g = Graph::<f64>::new();
        let p = g.constant(pred.clone());
        let l = loss_mim(&mut g, p, t, &plan).map_err(err)?;
        Ok(g.value(l).item())
    };
    let mim_delta = (mim(&target)? - mim(&perturbed)?).abs();

    let side = 32;
    let hp = Tensor::from_fn(&[1, side, side], |_| rng.gen_range(0.0..1.0));
    let ht = Tensor::from_fn(&[1, side, side], |_| rng.gen_range(0.0..1.0));
    let sr = |a: Tensor<f64>| -> Result<f64, String> {
        let mut g = Graph::<f64>::new();
        let p = g.constant(hp.clone());
        let l = loss_sr(&mut g, p, &ht, &a).map_err(err)?;
        Ok(g.value(l).item())
    };
    let zero = sr(Tensor::zeros(&[1, side, side]))?;
    let ones = sr(Tensor::ones(&[1, side, side]))?;
    let mut g = Graph::<f64>::new();
    let (a, b) = (g.constant(hp.clone()), g.constant(ht.clone()));
    let mse = g.mse(a, b).map_err(err)?;
    let plain = g.value(mse).item();
    Ok((
        mim_delta == 0.0 && zero == 0.0 && (ones - plain).abs() <= 1e-6,
        format!("visible-target change moves L_MIM by {mim_delta}; A=0 gives {zero}; |A=1 - MSE| = {:.1e}", (ones - plain).abs()),
    ))
}

fn crit6() -> Outcome {
    let lex = lexicon();
    let spec = SynthSpec {
        seed: 6,
        ..Default::default()
    };
    let samples = gen_corpus(&spec, 10_000).map_err(err)?;
    let mut dropped = 0;
    let mut docs = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let vocab = Vocab::build([s.report_text.as_str()], []);
        let seq = tokenize(&s.report_text, &vocab, 256).map_err(err)?;
        let a = annotate(&s.id, seq, &lex, DEFAULT_BETA);
        if i < 1000 {
            let d = distill_rule_based(&a);
            let parsed = parse_distilled(&d.raw, &lex).map_err(err)?;
            dropped += parsed.dropped + d.sentences.len().abs_diff(parsed.sentences.len());
        }
        docs.push(a);
    }
    let stats = compute_stats(&docs).map_err(err)?;
    let ratio = stats.n_neg as f64 / stats.n_oth as f64;

    let mut rng = derive_rng(6, &[6]);
    let entities: Vec<&String> = lex.entities().iter().collect();
    let words = ["mild", "moderate", "severe", "small", "large", "no", "be", "possible", "new", "left"];
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n_desc = rng.gen_range(0..3);
        let descriptor: Vec<&str> = (0..n_desc).map(|_| words[rng.gen_range(0..words.len())]).collect();
        let s = DistilledSentence {
            modality: if rng.gen_bool(0.5) { Modality::Is } else { Modality::May },
            descriptor: descriptor.join(" "),
            entity: entities[rng.gen_range(0..entities.len())].clone(),
            on_lexicon: true,
        };
        let parsed = parse_distilled(&s.render(), &lex).map_err(err)?;
        if parsed.sentences != [s] || parsed.dropped != 0 {
            mismatches += 1;
        }
    }
    Ok((
        dropped == 0 && mismatches == 0 && (ratio - 20.0).abs() <= 2.0,
        format!("rule-based drops {dropped}/1000 reports; grammar round-trip mismatches {mismatches}/1000; negative:other {ratio:.2}:1"),
    ))
}

fn dataset(samples: &[SynthSample], vocab: Option<Vocab>) -> Result<Dataset, String> {
    build_dataset(samples, None, &lexicon(), &GroundTruthAttention, 8, 64, vocab).map_err(err)
}

fn train_config(seed: u64) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.optim.seed = seed;
    c
}

fn mean_total(m: &[StepMetrics]) -> f64 {
    m.iter().map(|m| m.total).sum::<f64>() / m.len() as f64
}

fn crit7() -> Outcome {
    let samples = gen_corpus(&SynthSpec { seed: 7, ..Default::default() }, 256).map_err(err)?;
    let data = dataset(&samples, None)?;
    let tmp = tempfile::tempdir().map_err(err)?;
    let ck = tmp.path().join("ck");
    let k = 150;

    let mut a = Trainer::new(train_config(7), data.clone()).map_err(err)?;
    let mut run_a = a.run(k, None, None).map_err(err)?;
    a.save(&ck).map_err(err)?;
    run_a.extend(a.run(300 - k, None, None).map_err(err)?);

    let mut b = Trainer::new(train_config(7), data.clone()).map_err(err)?;
    let run_b = b.run(300, None, None).map_err(err)?;
    let identical = run_a.iter().zip(&run_b).all(|(x, y)| x.step == y.step && x.loss_bits() == y.loss_bits())
        && a.params == b.params;

    let mut resumed = Trainer::from_checkpoint(train_config(7), data, &ck).map_err(err)?;
    let next = resumed.train_step().map_err(err)?;
    let resume_ok = next.step == k as u64 && next.loss_bits() == run_a[k].loss_bits();

    let early = mean_total(&run_a[..10]);
    let late = mean_total(&run_a[290..]);
    let drop = 1.0 - late / early;
    Ok((
        drop >= 0.30 && identical && resume_ok,
        format!(
            "mean total over steps 0-9 {early:.4}, over steps 290-299 {late:.4} ({:.1}% lower); repeat run bit-identical: {identical}; resume at {k} bit-equal: {resume_ok}",
            100.0 * drop
        ),
    ))
}

fn crit8() -> Outcome {
    let seeds = 5;
    let (mut with, mut without) = (0.0, 0.0);
    let mut per_seed = Vec::new();
    for seed in 0..seeds {
        let samples = gen_corpus(&SynthSpec { seed: 800 + seed, ..Default::default() }, 512).map_err(err)?;
        let all = dataset(&samples, None)?;
        let mut train = all.clone();
        train.examples.truncate(256);
        let mut held_out = all;
        held_out.examples.drain(..256);
        let mut acc = [0.0; 2];
        for (slot, unit) in [false, true].into_iter().enumerate() {
            let mut c = train_config(seed);
            c.ablation.no_rebalance = unit;
            let mut t = Trainer::new(c, train.clone()).map_err(err)?;
            t.run(500, None, None).map_err(err)?;
            acc[slot] = t.mlm_accuracy(&held_out, 8).map_err(err)?.oth();
        }
        with += acc[0] / seeds as f64;
        without += acc[1] / seeds as f64;
        per_seed.push(format!("{:.3}/{:.3}", acc[0], acc[1]));
    }
    Ok((
        with > without,
        format!(
            "held-out other-descriptor accuracy rebalanced {with:.4} vs unit {without:.4} (per seed {})",
            per_seed.join(" ")
        ),
    ))
}

fn crit9() -> Outcome {
    let seeds = 3;
    let steps = 800;
    let (mut gain, mut control_gap) = (0.0, 0.0f64);
    let mut per_seed = Vec::new();
    for seed in 0..seeds {
        let spec = SynthSpec {
            seed: 900 + seed,
            p_positive: 0.5,
            ..Default::default()
        };
        let entities: Vec<String> = spec.entity_vocab.iter().map(|(e, _)| e.clone()).collect();
        let samples = gen_corpus(&spec, 256).map_err(err)?;
        let mut t = Trainer::new(train_config(seed), dataset(&samples, None)?).map_err(err)?;
        t.run(steps, None, None).map_err(err)?;
        let opts = ProbeOptions {
            seed,
            ..Default::default()
        };
        let r = linear_probe(&t.model, &t.params, &samples, &entities, &opts).map_err(err)?;
        let shuffled = linear_probe(
            &t.model,
            &t.params,
            &samples,
            &entities,
            &ProbeOptions {
                shuffle_labels: true,
                ..opts
            },
        )
        .map_err(err)?;
        gain += (r.macro_accuracy - r.baseline_macro) / seeds as f64;
        control_gap += (shuffled.macro_accuracy - shuffled.chance_macro) / seeds as f64;
        per_seed.push(format!("{:.3}/{:.3}", r.macro_accuracy, r.baseline_macro));
    }
    Ok((
        gain >= 0.10 && control_gap.abs() <= 0.05,
        format!(
            "probe gain over random init {:+.1} points (pretrained/baseline per seed {}); shuffled labels vs chance {:+.1} points",
            100.0 * gain,
            per_seed.join(" "),
            100.0 * control_gap
        ),
    ))
}

fn crit10() -> Outcome {
    let samples = gen_corpus(&SynthSpec { seed: 10, ..Default::default() }, 64).map_err(err)?;
    let data = dataset(&samples, None)?;
    let base = Trainer::new(train_config(10), data.clone()).map_err(err)?;
    let base_loss = base.losses(0).map_err(err)?;
    let base_plans = base.plan_step(0).map_err(err)?;
    let bits = |v: f64| v.to_bits();
    let mut notes = Vec::new();
    let mut ok = true;
    for flag in ["no_sr", "no_rebalance", "no_descriptor_mask", "no_distill"] {
        let mut c = train_config(10);
        c.set(flag, "true").map_err(err)?;
        let t = Trainer::new(c, data.clone()).map_err(err)?;
        let l = t.losses(0).map_err(err)?;
        let plans = t.plan_step(0).map_err(err)?;
        let same_patches = plans.iter().zip(&base_plans).all(|(a, b)| a.patch_plan == b.patch_plan && a.example == b.example);
        let same_text = plans.iter().zip(&base_plans).all(|(a, b)| a.text_plan == b.text_plan && a.targets == b.targets);
        let same_mim = bits(l.l_mim) == bits(base_loss.l_mim);
        let same_mlm = bits(l.l_mlm) == bits(base_loss.l_mlm);
        let same_sr = bits(l.l_sr) == bits(base_loss.l_sr);
        let same_params = t.params == base.params;
        let isolated = match flag {
            "no_sr" => {
                let (grads, _) = t.gradients(0).map_err(err)?;
                let sr_zero = t
                    .params
                    .ids()
                    .filter(|&id| param_group(t.params.name(id)) == "sr")
                    .all(|id| grads[id.index()].iter().all(|&g| g == 0.0));
                l.l_sr == 0.0 && same_mim && same_mlm && same_patches && same_text && sr_zero
            }
            "no_rebalance" => {
                let unit = t.factors == RebalanceFactors::unit(t.factors.n_neg, t.factors.n_oth);
                unit && same_mim && same_sr && !same_mlm && same_patches && same_text
            }
            "no_descriptor_mask" => {
                let no_roles = plans.iter().all(|p| {
                    p.text_plan.descriptor_neg_positions.is_empty() && p.text_plan.descriptor_oth_positions.is_empty()
                });
                let weights_changed = plans.iter().zip(&base_plans).any(|(a, b)| {
                    mlm_weights(&a.text_plan, &t.factors) != mlm_weights(&b.text_plan, &base.factors)
                });
                no_roles && weights_changed && same_mim && same_sr && same_patches && !same_text
            }
            "no_distill" => {
                let original_only = plans
                    .iter()
                    .all(|p| p.targets == t.data().examples[p.example].original.seq.ids());
                original_only && same_mim && same_sr && same_patches && !same_text && !same_mlm
            }
            _ => unreachable!(),
        };
        ok &= isolated && same_params;
        notes.push(format!("{flag} {}", if isolated && same_params { "isolated" } else { "LEAKS" }));
    }
    Ok((ok, notes.join(", ")))
}
