//! Central finite-difference gradient checking at 64-bit precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Denominator floor for relative errors.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Step of the five-point stencil used by [`op_suite`].
pub const SUITE_EPS: f64 = 1e-4;
/// Gradients below this magnitude are compared absolutely in [`op_suite`].
pub const SUITE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floored(analytic, numeric, REL_ERROR_FLOOR)
}

/// Relative error whose denominator never drops below `floor`; below it the
/// comparison is effectively absolute.
pub fn relative_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Compare backward-pass gradients of the scalar function `f` against
/// central differences `(f(x+eps) − f(x−eps)) / 2eps` on every coordinate
/// of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let coords: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.numel()).collect()).collect();
    check_coords(&f, inputs, &coords, &CheckOptions::central(eps))
}

/// As [`grad_check`], probing at most `per_input` randomly chosen coordinates
/// of each input.
pub fn grad_check_sampled<F>(
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    per_input: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    grad_check_sampled_with(f, inputs, per_input, seed, CheckOptions::central(eps))
}

/// Finite-difference settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckOptions {
    pub eps: f64,
    /// Relative-error denominator floor.
    pub floor: f64,
    /// Fourth-order stencil `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`
    /// instead of the central difference.
    pub five_point: bool,
}

impl CheckOptions {
    pub fn central(eps: f64) -> Self {
        Self {
            eps,
            floor: REL_ERROR_FLOOR,
            five_point: false,
        }
    }
}

/// As [`grad_check_sampled`] with explicit difference settings, for large
/// composites where the default step trades truncation against roundoff.
pub fn grad_check_sampled_with<F>(
    f: F,
    inputs: &[Tensor<f64>],
    per_input: usize,
    seed: u64,
    opts: CheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<Vec<usize>> = inputs
        .iter()
        .map(|t| {
            if t.numel() <= per_input {
                (0..t.numel()).collect()
            } else {
                (0..per_input).map(|_| rng.gen_range(0..t.numel())).collect()
            }
        })
        .collect();
    check_coords(&f, inputs, &coords, &opts)
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

fn check_coords<F>(f: &F, inputs: &[Tensor<f64>], coords: &[Vec<usize>], opts: &CheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| g.grad_tensor(v)).collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, idxs) in coords.iter().enumerate() {
        for &c in idxs {
            let orig = probe[i].data()[c];
            let mut at = |x: f64| -> Result<f64> {
                probe[i].data_mut()[c] = x;
                evaluate(f, &probe)
            };
            let h = opts.eps;
            let numeric = if opts.five_point {
                let (p2, p1, m1, m2) = (at(orig + 2.0 * h)?, at(orig + h)?, at(orig - h)?, at(orig - 2.0 * h)?);
                (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h)
            } else {
                (at(orig + h)? - at(orig - h)?) / (2.0 * h)
            };
            probe[i].data_mut()[c] = orig;
            let err = relative_error_floored(analytic[i].data()[c], numeric, opts.floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((i, c));
            }
        }
    }
    Ok(report)
}

/// Result of checking one operator over randomized trials.
#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub trials: usize,
    pub max_rel_error: f64,
}

/// Names of the operators covered by [`op_suite`].
pub const SUITE_OPS: &[&str] = &[
    "matmul",
    "add",
    "add_row",
    "mul",
    "mul_row",
    "scale",
    "transpose",
    "reshape",
    "concat",
    "slice",
    "embedding_lookup",
    "gather",
    "layer_normalize",
    "softmax",
    "gelu",
    "mean",
    "sum",
    "mse",
    "weighted_mse",
    "cross_entropy_with_logits",
    "conv2d",
    "upsample_bilinear2x",
];

/// Coordinates probed per input and trial.
const SUITE_COORDS_PER_INPUT: usize = 48;

/// Gradient-check every operator on `trials` randomized shapes (each axis
/// at most 16). Non-scalar outputs are reduced by a fixed random weighting.
pub fn op_suite(trials: usize, seed: u64) -> Result<Vec<OpCheck>> {
    SUITE_OPS
        .iter()
        .enumerate()
        .map(|(k, &op)| {
            let mut worst = 0.0f64;
            for t in 0..trials {
                let case_seed = seed ^ ((k as u64) << 32) ^ t as u64;
                let report = check_op(op, case_seed)?;
                worst = worst.max(report.max_rel_error);
            }
            Ok(OpCheck {
                op,
                trials,
                max_rel_error: worst,
            })
        })
        .collect()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn rand_matrix(rng: &mut ChaCha8Rng, max: usize, lo: f64, hi: f64) -> Tensor<f64> {
    let shape = [dim(rng, max), dim(rng, max)];
    rand_tensor(rng, &shape, lo, hi)
}

fn dim(rng: &mut ChaCha8Rng, max: usize) -> usize {
    rng.gen_range(1..=max)
}

/// Reduce `out` to a scalar with a fixed random weighting so every output
/// coordinate carries a distinct gradient.
fn weighted_sum(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    if g.value(out).numel() == 1 && g.shape(out).is_empty() {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, g.shape(out), -1.0, 1.0);
    let w = g.constant(w);
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

fn check_op(op: &str, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wseed = rng.gen::<u64>();
    let cseed = rng.gen::<u64>();
    let run = |inputs: Vec<Tensor<f64>>, f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>| {
        grad_check_sampled_with(
            |g, v| {
                let out = f(g, v)?;
                weighted_sum(g, out, wseed)
            },
            &inputs,
            SUITE_COORDS_PER_INPUT,
            cseed,
            CheckOptions {
                eps: SUITE_EPS,
                floor: SUITE_FLOOR,
                five_point: true,
            },
        )
    };
    match op {
        "matmul" => {
            let (m, k, n) = (dim(&mut rng, 16), dim(&mut rng, 16), dim(&mut rng, 16));
            let a = rand_tensor(&mut rng, &[m, k], -1.0, 1.0);
            let b = rand_tensor(&mut rng, &[k, n], -1.0, 1.0);
            run(vec![a, b], &|g, v| g.matmul(v[0], v[1]))
        }
        "add" | "mul" | "mse" => {
            let shape = [dim(&mut rng, 16), dim(&mut rng, 16)];
            let a = rand_tensor(&mut rng, &shape, -1.0, 1.0);
            let b = rand_tensor(&mut rng, &shape, -1.0, 1.0);
            match op {
                "add" => run(vec![a, b], &|g, v| g.add(v[0], v[1])),
                "mul" => run(vec![a, b], &|g, v| g.mul(v[0], v[1])),
                _ => run(vec![a, b], &|g, v| g.mse(v[0], v[1])),
            }
        }
        "add_row" | "mul_row" => {
            let shape = [dim(&mut rng, 16), dim(&mut rng, 16)];
            let a = rand_tensor(&mut rng, &shape, -1.0, 1.0);
            let b = rand_tensor(&mut rng, &[shape[1]], -1.0, 1.0);
            if op == "add_row" {
                run(vec![a, b], &|g, v| g.add_row(v[0], v[1]))
            } else {
                run(vec![a, b], &|g, v| g.mul_row(v[0], v[1]))
            }
        }
        "scale" => {
            let s = rng.gen_range(-2.0..2.0);
            let a = rand_matrix(&mut rng, 16, -1.0, 1.0);
            run(vec![a], &move |g, v| g.scale(v[0], s))
        }
        "transpose" => {
            let a = rand_matrix(&mut rng, 16, -1.0, 1.0);
            run(vec![a], &|g, v| g.transpose(v[0]))
        }
        "reshape" => {
            let (m, n) = (dim(&mut rng, 16), dim(&mut rng, 16));
            let a = rand_tensor(&mut rng, &[m, n], -1.0, 1.0);
            run(vec![a], &move |g, v| g.reshape(v[0], &[n, m]))
        }
        "concat" => {
            let rank = rng.gen_range(1..=3);
            let axis = rng.gen_range(0..rank);
            let base: Vec<usize> = (0..rank).map(|_| dim(&mut rng, 8)).collect();
            let parts = rng.gen_range(1..=3);
            let inputs: Vec<Tensor<f64>> = (0..parts)
                .map(|_| {
                    let mut s = base.clone();
                    s[axis] = dim(&mut rng, 8);
                    rand_tensor(&mut rng, &s, -1.0, 1.0)
                })
                .collect();
            run(inputs, &move |g, v| g.concat(v, axis))
        }
        "slice" => {
            let shape = [dim(&mut rng, 16), dim(&mut rng, 16)];
            let axis = rng.gen_range(0..2);
            let start = rng.gen_range(0..shape[axis]);
            let len = rng.gen_range(1..=shape[axis] - start);
            let a = rand_tensor(&mut rng, &shape, -1.0, 1.0);
            run(vec![a], &move |g, v| g.slice(v[0], axis, start, len))
        }
        "embedding_lookup" => {
            let (vocab, d) = (dim(&mut rng, 16), dim(&mut rng, 16));
            let ids: Vec<usize> = (0..dim(&mut rng, 16)).map(|_| rng.gen_range(0..vocab)).collect();
            let table = rand_tensor(&mut rng, &[vocab, d], -1.0, 1.0);
            run(vec![table], &move |g, v| g.embedding_lookup(v[0], &ids))
        }
        "gather" => {
            let shape = [dim(&mut rng, 16), dim(&mut rng, 16)];
            let n = shape[0] * shape[1];
            let out_len = dim(&mut rng, 16);
            let idx: Vec<usize> = (0..out_len).map(|_| rng.gen_range(0..n)).collect();
            let a = rand_tensor(&mut rng, &shape, -1.0, 1.0);
            run(vec![a], &move |g, v| g.gather(v[0], &idx, &[out_len]))
        }
        "layer_normalize" => {
            let a = rand_matrix(&mut rng, 16, -2.0, 2.0);
            run(vec![a], &|g, v| g.layer_normalize(v[0]))
        }
        "softmax" => {
            let axis = rng.gen_range(0..2);
            let a = rand_matrix(&mut rng, 16, -3.0, 3.0);
            run(vec![a], &move |g, v| g.softmax(v[0], axis))
        }
        "gelu" => {
            let a = rand_matrix(&mut rng, 16, -3.0, 3.0);
            run(vec![a], &|g, v| g.gelu(v[0]))
        }
        "mean" => {
            let rank = rng.gen_range(1..=3);
            let axis = rng.gen_range(0..rank);
            let shape: Vec<usize> = (0..rank).map(|_| dim(&mut rng, 16)).collect();
            let a = rand_tensor(&mut rng, &shape, -1.0, 1.0);
            run(vec![a], &move |g, v| g.mean(v[0], axis))
        }
        "sum" => {
            let a = rand_matrix(&mut rng, 16, -1.0, 1.0);
            run(vec![a], &|g, v| g.sum(v[0]))
        }
        "weighted_mse" => {
            let shape = [dim(&mut rng, 16), dim(&mut rng, 16)];
            let a = rand_tensor(&mut rng, &shape, -1.0, 1.0);
            let b = rand_tensor(&mut rng, &shape, -1.0, 1.0);
            let w = rand_tensor(&mut rng, &shape, 0.0, 1.0);
            run(vec![a, b], &move |g, v| g.weighted_mse(v[0], v[1], &w, 1e-8))
        }
        "cross_entropy_with_logits" => {
            let (l, c) = (dim(&mut rng, 16), dim(&mut rng, 16));
            let targets: Vec<usize> = (0..l).map(|_| rng.gen_range(0..c)).collect();
            let weights: Vec<f64> = (0..l).map(|_| rng.gen_range(0.05..1.0)).collect();
            let logits = rand_tensor(&mut rng, &[l, c], -3.0, 3.0);
            run(vec![logits], &move |g, v| g.cross_entropy_with_logits(v[0], &targets, &weights))
        }
        "conv2d" => {
            let (cin, cout) = (dim(&mut rng, 4), dim(&mut rng, 4));
            let (h, w) = (dim(&mut rng, 16), dim(&mut rng, 16));
            let x = rand_tensor(&mut rng, &[cin, h, w], -1.0, 1.0);
            let k = rand_tensor(&mut rng, &[cout, cin, 3, 3], -1.0, 1.0);
            let b = rand_tensor(&mut rng, &[cout], -1.0, 1.0);
            run(vec![x, k, b], &|g, v| g.conv2d(v[0], v[1], v[2]))
        }
        "upsample_bilinear2x" => {
            let shape = [dim(&mut rng, 4), dim(&mut rng, 16), dim(&mut rng, 16)];
            let a = rand_tensor(&mut rng, &shape, -1.0, 1.0);
            run(vec![a], &|g, v| g.upsample_bilinear2x(v[0]))
        }
        other => unreachable!("operator {other} missing from the suite"),
    }
}
