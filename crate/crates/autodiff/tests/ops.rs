use ecamp_autodiff::gradcheck::{relative_error, DEFAULT_EPS};
use ecamp_autodiff::{grad_check, op_suite, AutodiffError, Graph, Tensor, Var};
use proptest::prelude::*;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn pseudo(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    Tensor::from_fn(shape, |_| {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    })
}

#[test]
fn mean_of_constant_and_its_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::full(&[3, 4], 2.5));
    let m = g.mean(x, 1).unwrap();
    assert_eq!(g.value(m).data(), &[2.5, 2.5, 2.5]);
    let s = g.sum(m).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().iter().all(|&v| (v - 0.25).abs() < 1e-15));
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[2, 5], 3.0));
    let y = g.softmax(x, 1).unwrap();
    assert!(g.value(y).data().iter().all(|&p| (p - 0.2).abs() < 1e-15));
}

#[test]
fn matmul_matches_finite_differences() {
    let a = pseudo(&[4, 3], 1);
    let b = pseudo(&[3, 5], 2);
    let r = pseudo(&[4, 5], 3);
    let report = grad_check(
        |g, v| {
            let p = g.matmul(v[0], v[1])?;
            let w = g.constant(r.clone());
            let q = g.mul(p, w)?;
            g.sum(q)
        },
        &[a, b],
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
    assert_eq!(report.checked, 12 + 15);
}

#[test]
fn sum_backward_is_ones() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::from_fn(&[2, 3], |i| i as f32));
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
}

#[test]
fn mse_with_itself_has_zero_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.param(pseudo(&[3, 3], 9));
    let l = g.mse(x, x).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    g.backward(l).unwrap();
    assert!(g.grad(x).unwrap().iter().all(|&v| v == 0.0));
}

fn two_layer(g: &mut Graph<f64>, v: &[Var]) -> ecamp_autodiff::Result<Var> {
    let h = g.matmul(v[0], v[1])?;
    let h = g.add_row(h, v[2])?;
    let h = g.gelu(h)?;
    let o = g.matmul(h, v[3])?;
    let o = g.layer_normalize(o)?;
    let p = g.softmax(o, 1)?;
    let target = g.constant(Tensor::full(g.shape(p), 0.25));
    g.mse(p, target)
}

#[test]
fn two_layer_composite_matches_finite_differences() {
    let inputs = [pseudo(&[5, 6], 11), pseudo(&[6, 7], 12), pseudo(&[7], 13), pseudo(&[7, 4], 14)];
    let report = grad_check(two_layer, &inputs, DEFAULT_EPS).unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn sum_of_squares_is_exact() {
    let x = pseudo(&[4, 4], 21);
    let report = grad_check(
        |g, v| {
            let sq = g.mul(v[0], v[0])?;
            g.sum(sq)
        },
        &[x],
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-8, "{report:?}");
}

#[test]
fn layer_normalize_then_sum_checks() {
    // Sum of a normalized row is identically ~0, so weight the output first.
    let x = pseudo(&[3, 8], 31);
    let w = pseudo(&[3, 8], 32);
    let report = grad_check(
        |g, v| {
            let y = g.layer_normalize(v[0])?;
            let wv = g.constant(w.clone());
            let y = g.mul(y, wv)?;
            g.sum(y)
        },
        &[x],
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn dead_branch_has_zero_gradient_on_both_sides() {
    let x = pseudo(&[6], 41);
    let mut g = Graph::<f64>::new();
    let xv = g.param(x.clone());
    let s = g.slice(xv, 0, 1, 4).unwrap();
    let sq = g.mul(s, s).unwrap();
    let l = g.sum(sq).unwrap();
    g.backward(l).unwrap();
    let grad = g.grad(xv).unwrap();
    assert_eq!(grad[0], 0.0);
    assert_eq!(grad[5], 0.0);
    let report = grad_check(
        |g, v| {
            let s = g.slice(v[0], 0, 1, 4)?;
            let sq = g.mul(s, s)?;
            g.sum(sq)
        },
        &[x],
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-8);
    assert_eq!(relative_error(0.0, 0.0), 0.0);
}

#[test]
fn backward_errors() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::ones(&[2, 2]));
    let y = g.scale(x, 2.0).unwrap();
    assert_eq!(g.backward(y), Err(AutodiffError::NonScalarLoss(vec![2, 2])));
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.backward(s), Err(AutodiffError::BackwardTwice));
    g.reset_grads();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0; 4]);
}

#[test]
fn shape_errors_name_the_operator() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::ones(&[2, 3]));
    let b = g.constant(Tensor::ones(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    let c = g.constant(Tensor::ones(&[3]));
    let err = g.add(a, c).unwrap_err().to_string();
    assert!(err.starts_with("add"), "{err}");
    let img = g.constant(Tensor::ones(&[1, 4, 4]));
    let k = g.constant(Tensor::ones(&[2, 3, 3, 3]));
    let bias = g.constant(Tensor::ones(&[2]));
    assert!(g.conv2d(img, k, bias).unwrap_err().to_string().contains("conv2d"));
    assert!(matches!(
        g.embedding_lookup(a, &[5]),
        Err(AutodiffError::Index { op: "embedding_lookup", index: 5, bound: 2 })
    ));
}

#[test]
fn upsample_of_constant_is_constant() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[1, 3, 5], 0.7));
    let y = g.upsample_bilinear2x(x).unwrap();
    assert_eq!(g.shape(y), &[1, 6, 10]);
    assert!(g.value(y).data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
}

#[test]
fn conv_with_centre_tap_is_identity() {
    let mut w = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
    w.data_mut()[4] = 1.0;
    let x = pseudo(&[1, 5, 4], 51);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(w);
    let bv = g.constant(Tensor::zeros(&[1]));
    let y = g.conv2d(xv, wv, bv).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn forward_and_backward_are_bit_deterministic() {
    let inputs = [pseudo(&[5, 6], 61), pseudo(&[6, 7], 62), pseudo(&[7], 63), pseudo(&[7, 4], 64)];
    let run = || {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let l = two_layer(&mut g, &vars).unwrap();
        g.backward(l).unwrap();
        let grads: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).unwrap().to_vec()).collect();
        (g.value(l).item().to_bits(), grads)
    };
    assert_eq!(run(), run());
}

#[test]
fn op_suite_smoke() {
    for check in op_suite(5, 7).unwrap() {
        assert!(check.max_rel_error < 1e-4, "{check:?}");
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..8, cols in 1usize..16, seed in any::<u64>()) {
        let mut g = Graph::<f32>::new();
        let x = g.constant(pseudo(&[rows, cols], seed).map(|v| v * 10.0).cast());
        let y = g.softmax(x, 1).unwrap();
        for r in 0..rows {
            let s: f32 = g.value(y).row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_normalize_rows_are_standardized(rows in 1usize..6, cols in 2usize..16, seed in any::<u64>()) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(pseudo(&[rows, cols], seed).map(|v| v * 3.0 + 1.0));
        let y = g.layer_normalize(x).unwrap();
        for r in 0..rows {
            let row = g.value(y).row(r);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-5);
            // eps inside the square root shrinks the variance slightly for tiny rows
            let raw: Vec<f64> = g.value(x).row(r).to_vec();
            let rm = raw.iter().sum::<f64>() / n;
            let rv = raw.iter().map(|v| (v - rm).powi(2)).sum::<f64>() / n;
            prop_assert!((var - rv / (rv + 1e-5)).abs() < 1e-9);
            if rv > 0.1 {
                prop_assert!((var - 1.0).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn finite_inputs_give_finite_outputs(seed in any::<u64>()) {
        let inputs = [pseudo(&[5, 6], seed), pseudo(&[6, 7], seed ^ 1), pseudo(&[7], seed ^ 2), pseudo(&[7, 4], seed ^ 3)];
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let l = two_layer(&mut g, &vars).unwrap();
        prop_assert!(g.value(l).all_finite());
    }
}

#[test]
fn weighted_mse_and_cross_entropy_values() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(t64(&[2], &[1.0, 3.0]));
    let b = g.constant(t64(&[2], &[0.0, 0.0]));
    let l = g.weighted_mse(a, b, &t64(&[2], &[1.0, 0.0]), 0.0).unwrap();
    assert_eq!(g.value(l).item(), 1.0);
    let logits = g.constant(t64(&[2, 2], &[0.0, 0.0, 5.0, 0.0]));
    let ce = g.cross_entropy_with_logits(logits, &[0, 0], &[1.0, 0.0]).unwrap();
    assert!((g.value(ce).item() - std::f64::consts::LN_2).abs() < 1e-12);
}
