use std::fs;
use std::path::Path;

use ecamp_core::corpus::EntityLexicon;
use ecamp_core::model::{param_group, ModelConfig};
use ecamp_core::synthgen::{gen_corpus, GroundTruthAttention, SynthSpec};
use ecamp_core::train::{build_dataset, load_checkpoint, Dataset, StepMetrics, TrainConfig, TrainError, Trainer};

fn data(n: usize, seed: u64) -> Dataset {
    let spec = SynthSpec {
        canvas: 32,
        seed,
        p_positive: 0.3,
        ..Default::default()
    };
    let samples = gen_corpus(&spec, n).unwrap();
    build_dataset(&samples, None, &EntityLexicon::default(), &GroundTruthAttention, 4, 48, None).unwrap()
}

fn config() -> TrainConfig {
    let mut c = TrainConfig {
        model: ModelConfig {
            image_size_low: 16,
            image_size_high: 32,
            patch_size: 4,
            embed_dim: 16,
            encoder_depth: 1,
            decoder_depth: 1,
            heads: 2,
            max_text_len: 48,
            text_decoder_depth: 1,
            sr_channels: 4,
            ..Default::default()
        },
        ..Default::default()
    };
    c.optim.batch_size = 2;
    c.optim.seed = 11;
    c
}

fn bits(run: &[StepMetrics]) -> Vec<[u64; 4]> {
    run.iter().map(StepMetrics::loss_bits).collect()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn same_seed_same_losses() {
    let d = data(8, 1);
    let a = Trainer::new(config(), d.clone()).unwrap().run(5, None, None).unwrap();
    let b = Trainer::new(config(), d.clone()).unwrap().run(5, None, None).unwrap();
    assert_eq!(bits(&a), bits(&b));
    let mut other = config();
    other.optim.seed = 12;
    let c = Trainer::new(other, d).unwrap().run(5, None, None).unwrap();
    assert_ne!(bits(&a), bits(&c));
}

#[test]
fn steps_are_zero_based_and_losses_finite() {
    let run = Trainer::new(config(), data(8, 2)).unwrap().run(3, None, None).unwrap();
    for (i, m) in run.iter().enumerate() {
        assert_eq!(m.step, i as u64);
        assert!(m.total.is_finite() && m.l_mim > 0.0 && m.l_mlm > 0.0 && m.l_sr >= 0.0);
        assert!((m.total - (m.l_mim + m.l_mlm + m.l_sr)).abs() < 1e-9);
    }
}

#[test]
fn no_sr_leaves_sr_head_without_gradient() {
    let mut c = config();
    c.ablation.no_sr = true;
    let t = Trainer::new(c, data(4, 3)).unwrap();
    let (grads, m) = t.gradients(0).unwrap();
    assert_eq!(m.l_sr, 0.0);
    let mut seen = 0;
    for id in t.params.ids() {
        let g = &grads[id.index()];
        if param_group(t.params.name(id)) == "sr" {
            seen += 1;
            assert!(g.iter().all(|&v| v == 0.0), "{}", t.params.name(id));
        }
    }
    assert!(seen > 0);
    let encoder_moves = t
        .params
        .ids()
        .filter(|&id| param_group(t.params.name(id)) == "encoder")
        .any(|id| grads[id.index()].iter().any(|&v| v != 0.0));
    assert!(encoder_moves);
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let mut t = Trainer::new(config(), data(4, 4)).unwrap();
    t.run(2, None, None).unwrap();
    t.save(&a).unwrap();
    let ck = load_checkpoint(&a, Some(&t.config.model)).unwrap();
    assert_eq!(ck, t.checkpoint());
    ecamp_core::train::save_checkpoint(&b, &ck).unwrap();
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
}

#[test]
fn truncated_blob_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("ck");
    Trainer::new(config(), data(4, 5)).unwrap().save(&ck).unwrap();
    let blob = ck.join("tensors.bin");
    let bytes = fs::read(&blob).unwrap();
    fs::write(&blob, &bytes[..bytes.len() - 7]).unwrap();
    let err = load_checkpoint(&ck, None).unwrap_err();
    assert!(matches!(err, TrainError::Checkpoint(_)), "{err}");
}

#[test]
fn shape_mismatch_names_every_offender() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("ck");
    let t = Trainer::new(config(), data(4, 6)).unwrap();
    t.save(&ck).unwrap();
    let mut wider = t.config.model.clone();
    wider.embed_dim = 24;
    let msg = load_checkpoint(&ck, Some(&wider)).unwrap_err().to_string();
    assert!(msg.contains("shape mismatch"), "{msg}");
    assert!(msg.contains("patch_embed"), "{msg}");
    assert!(msg.contains("token_embed") || msg.contains("text_embed"), "{msg}");
}

#[test]
fn resume_matches_uninterrupted_run() {
    let d = data(6, 7);
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("ck");
    let mut c = config();
    c.checkpoint_every = 3;
    let mut full = Trainer::new(c.clone(), d.clone()).unwrap();
    let whole = full.run(6, None, Some(&ck)).unwrap();

    let mut first = Trainer::new(c.clone(), d.clone()).unwrap();
    first.run(3, None, None).unwrap();
    first.save(&ck).unwrap();
    let mut resumed = Trainer::from_checkpoint(c, d, &ck).unwrap();
    assert_eq!(resumed.step, 3);
    let rest = resumed.run(3, None, None).unwrap();
    assert_eq!(bits(&whole[3..]), bits(&rest));
    assert_eq!(resumed.params, full.params);
    assert_eq!(resumed.running_total.map(f64::to_bits), full.running_total.map(f64::to_bits));
}

#[test]
fn resume_rejects_a_different_seed() {
    let d = data(4, 8);
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("ck");
    Trainer::new(config(), d.clone()).unwrap().save(&ck).unwrap();
    let mut c = config();
    c.optim.seed = 99;
    assert!(Trainer::from_checkpoint(c, d, &ck).is_err());
}

#[test]
fn accumulation_matches_a_larger_batch() {
    let d = data(8, 9);
    let mut accum = config();
    accum.optim.batch_size = 2;
    accum.optim.grad_accum_steps = 2;
    let mut single = config();
    single.optim.batch_size = 4;
    single.optim.grad_accum_steps = 1;
    let mut a = Trainer::new(accum, d.clone()).unwrap();
    let mut b = Trainer::new(single, d).unwrap();
    assert_eq!(a.batch_indices(1), b.batch_indices(1));
    let (ga, ma) = a.gradients(1).unwrap();
    let (gb, mb) = b.gradients(1).unwrap();
    assert_eq!(ma.loss_bits(), mb.loss_bits());
    for (x, y) in ga.iter().zip(&gb) {
        assert!(rel_l2(x, y) < 1e-5, "gradient differs by {}", rel_l2(x, y));
    }
    a.run(3, None, None).unwrap();
    b.run(3, None, None).unwrap();
    for id in a.params.ids() {
        let e = rel_l2(a.params.get(id).data(), b.params.get(id).data());
        assert!(e < 1e-5, "{} differs by {e}", a.params.name(id));
    }
}

/// `|x - y| / |y|` in the L2 norm.
fn rel_l2(x: &[f32], y: &[f32]) -> f64 {
    let d: f64 = x.iter().zip(y).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
    let n: f64 = y.iter().map(|b| (*b as f64).powi(2)).sum();
    if n == 0.0 {
        d.sqrt()
    } else {
        (d / n).sqrt()
    }
}

#[test]
fn metrics_are_json_lines() {
    let mut out = Vec::new();
    Trainer::new(config(), data(4, 10)).unwrap().run(2, Some(&mut out), None).unwrap();
    let text = String::from_utf8(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    for (i, line) in lines.iter().enumerate() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["step"], i);
        for key in ["l_mim", "l_mlm", "l_sr", "total", "wall_ms"] {
            assert!(v[key].is_number(), "{key} in {line}");
        }
    }
}

#[test]
fn kv_config_overrides_defaults() {
    let mut c = TrainConfig::default();
    c.apply_kv_text("# comment\nlr = 0.01\nembed_dim=32\nno_sr = true\n").unwrap();
    assert_eq!(c.optim.lr, 0.01);
    assert_eq!(c.model.embed_dim, 32);
    assert!(c.ablation.no_sr);
    let err = c.apply_kv_text("lr = 0.01\nbogus = 1\n").unwrap_err().to_string();
    assert!(err.contains("line 2"), "{err}");
}
