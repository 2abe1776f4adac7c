//! Masked image modeling, re-balanced masked language modeling,
//! attention-weighted super-resolution, and their sum.

use ecamp_autodiff::{AutodiffError, Graph, Scalar, Tensor, Var};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::ToPrimitive;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::masking::{PatchMaskPlan, TextMaskPlan};

pub const DEFAULT_LAMBDA_NEG: f64 = 0.05;
pub const SR_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("degenerate corpus: no positive/other descriptors")]
    DegenerateCorpus,
    #[error("lambda_neg {0} must be finite and non-negative")]
    LambdaNeg(f64),
    #[error("{0}: nothing is masked")]
    EmptyMask(&'static str),
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("loss term {term} is not finite ({value})")]
    NonFinite { term: &'static str, value: f64 },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Weights with `lambda_neg * n_neg + lambda_oth * n_oth = n_a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RebalanceFactors {
    pub lambda_neg: f64,
    pub lambda_oth: f64,
    pub n_a: u64,
    pub n_neg: u64,
    pub n_oth: u64,
}

impl RebalanceFactors {
    /// `lambda_neg = lambda_oth = 1`.
    pub fn unit(n_neg: u64, n_oth: u64) -> Self {
        Self {
            lambda_neg: 1.0,
            lambda_oth: 1.0,
            n_a: n_neg + n_oth,
            n_neg,
            n_oth,
        }
    }
}

/// `lambda_oth = (n_a - lambda_neg * n_neg) / n_oth`, evaluated exactly over
/// the rationals and rounded once to the nearest f64.
pub fn compute_rebalance(n_neg: u64, n_oth: u64, lambda_neg: f64) -> Result<RebalanceFactors> {
    if n_oth == 0 {
        return Err(LossError::DegenerateCorpus);
    }
    if !lambda_neg.is_finite() || lambda_neg < 0.0 {
        return Err(LossError::LambdaNeg(lambda_neg));
    }
    let n_a = n_neg + n_oth;
    let lam = BigRational::from_float(lambda_neg).expect("finite float");
    let int = |v: u64| BigRational::from_integer(BigInt::from(v));
    let exact = (int(n_a) - lam * int(n_neg)) / int(n_oth);
    Ok(RebalanceFactors {
        lambda_neg,
        lambda_oth: round_to_f64(&exact),
        n_a,
        n_neg,
        n_oth,
    })
}

/// Round-to-nearest-even conversion of a rational in the normal f64 range.
fn round_to_f64(r: &BigRational) -> f64 {
    use num_bigint::{BigUint, Sign};
    let negative = r.numer().sign() == Sign::Minus;
    let n = r.numer().magnitude();
    let d = r.denom().magnitude();
    if n.bits() == 0 {
        return 0.0;
    }
    // Quotient with at least 56 bits, then shift down to 54 (53 kept plus a
    // guard bit) folding everything dropped into the sticky flag.
    let shift = 56 - (n.bits() as i64 - d.bits() as i64);
    let (num, den) = if shift >= 0 {
        (n << shift as u64, d.clone())
    } else {
        (n.clone(), d << (-shift) as u64)
    };
    let mut q: BigUint = &num / &den;
    let mut sticky = (&num % &den).bits() != 0;
    let mut exp = -shift;
    while q.bits() > 54 {
        sticky |= q.bit(0);
        q >>= 1u32;
        exp += 1;
    }
    let q = q.to_u64().expect("54-bit quotient");
    let guard = q & 1 == 1;
    let mut mant = q >> 1;
    exp += 1;
    if guard && (sticky || mant & 1 == 1) {
        mant += 1;
    }
    let v = mant as f64 * 2f64.powi(exp as i32);
    if negative {
        -v
    } else {
        v
    }
}

/// MSE over the masked patches only.
pub fn loss_mim<T: Scalar>(g: &mut Graph<T>, pred: Var, target: &Tensor<T>, plan: &PatchMaskPlan) -> Result<Var> {
    if plan.masked_indices.is_empty() {
        return Err(LossError::EmptyMask("loss_mim"));
    }
    if g.shape(pred) != target.shape() || g.shape(pred).first() != Some(&plan.n_patches) {
        return Err(LossError::Shape {
            op: "loss_mim",
            detail: format!(
                "prediction {:?}, target {:?}, {} patches",
                g.shape(pred),
                target.shape(),
                plan.n_patches
            ),
        });
    }
    let width = target.shape()[1];
    let rows = g.embedding_lookup(pred, &plan.masked_indices)?;
    let picked: Vec<T> = plan
        .masked_indices
        .iter()
        .flat_map(|&i| target.row(i).iter().copied())
        .collect();
    let t = g.constant(Tensor::new(vec![plan.masked_indices.len(), width], picked)?);
    Ok(g.mse(rows, t)?)
}

/// Per-position MLM weights: 1 for random positions, the factors for
/// descriptor positions, 0 elsewhere.
pub fn mlm_weights(plan: &TextMaskPlan, factors: &RebalanceFactors) -> Vec<f64> {
    (0..plan.len)
        .map(|i| {
            if plan.random_positions.contains(&i) {
                1.0
            } else if plan.descriptor_neg_positions.contains(&i) {
                factors.lambda_neg
            } else if plan.descriptor_oth_positions.contains(&i) {
                factors.lambda_oth
            } else {
                0.0
            }
        })
        .collect()
}

/// Weighted NLL over the masked positions, normalized by the weight sum.
pub fn loss_mlm<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &[usize],
    plan: &TextMaskPlan,
    factors: &RebalanceFactors,
) -> Result<Var> {
    if plan.masked_count() == 0 {
        return Err(LossError::EmptyMask("loss_mlm"));
    }
    let s = g.shape(logits);
    if s.len() != 2 || s[0] != targets.len() || plan.len != targets.len() {
        return Err(LossError::Shape {
            op: "loss_mlm",
            detail: format!("logits {s:?}, {} targets, plan over {}", targets.len(), plan.len),
        });
    }
    let w: Vec<T> = mlm_weights(plan, factors).into_iter().map(T::from_f64_lossy).collect();
    Ok(g.cross_entropy_with_logits(logits, targets, &w)?)
}

/// `sum(A * (pred - target)^2) / (sum(A) + eps)`.
pub fn loss_sr<T: Scalar>(g: &mut Graph<T>, pred: Var, target: &Tensor<T>, a: &Tensor<T>) -> Result<Var> {
    if g.shape(pred) != target.shape() || target.shape() != a.shape() {
        return Err(LossError::Shape {
            op: "loss_sr",
            detail: format!("prediction {:?}, target {:?}, A {:?}", g.shape(pred), target.shape(), a.shape()),
        });
    }
    let t = g.constant(target.clone());
    Ok(g.weighted_mse(pred, t, a, SR_EPS)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_mim: f64,
    pub l_mlm: f64,
    pub l_sr: f64,
    pub total: f64,
    pub masked_patches: usize,
    pub masked_tokens: usize,
}

/// Unweighted sum of the three terms.
pub fn loss_total(l_mim: f64, l_mlm: f64, l_sr: f64) -> Result<LossBundle> {
    for (term, value) in [("l_mim", l_mim), ("l_mlm", l_mlm), ("l_sr", l_sr)] {
        if !value.is_finite() {
            return Err(LossError::NonFinite { term, value });
        }
    }
    Ok(LossBundle {
        l_mim,
        l_mlm,
        l_sr,
        total: l_mim + l_mlm + l_sr,
        ..Default::default()
    })
}
