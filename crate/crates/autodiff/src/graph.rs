//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operator application as a node in creation
//! order, which is already a topological order. [`Graph::backward`] walks the
//! tape once in reverse and accumulates exact analytic gradients into every
//! node that (transitively) depends on a leaf created with `requires_grad`.
//!
//! Shape conventions, per operator:
//!
//! | op | inputs | output |
//! |----|--------|--------|
//! | `matmul` | `[m,k]`, `[k,n]` | `[m,n]` |
//! | `add`, `mul` | same shape | same shape |
//! | `add_row`, `mul_row` | `[.., n]`, `[n]` | `[.., n]` (row broadcast) |
//! | `transpose` | `[m,n]` | `[n,m]` |
//! | `concat`, `slice` | any rank, along one axis | |
//! | `embedding_lookup` | table `[v,d]`, ids | `[len(ids), d]` |
//! | `gather` | any, flat indices | caller-chosen shape |
//! | `layer_normalize` | `[.., n]` | normalized over the last axis, no affine |
//! | `softmax`, `mean` | any, one axis | |
//! | `mse`, `weighted_mse`, `cross_entropy_with_logits`, `sum` | | scalar `[]` |
//! | `conv2d` | `[cin,h,w]`, `[cout,cin,3,3]`, `[cout]` | `[cout,h,w]` |
//! | `upsample_bilinear2x` | `[c,h,w]` | `[c,2h,2w]` |

use crate::error::{shape_err, AutodiffError, Result};
use crate::kernels::{self, axis_extents};
use crate::tensor::{lit, Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Transpose(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    EmbeddingLookup { table: Var, ids: Vec<usize> },
    Gather { input: Var, indices: Vec<usize> },
    LayerNorm { input: Var, rstd: Vec<T> },
    Softmax { input: Var, axis: usize },
    Gelu(Var),
    Mean { input: Var, axis: usize },
    Sum(Var),
    Mse(Var, Var),
    WeightedMse { a: Var, b: Var, weights: Vec<T>, denom: T },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<T>, total: T, probs: Vec<T> },
    Conv2d { input: Var, weight: Var, bias: Var },
    Upsample2x(Var),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recorded computation. Confined to one thread; build one graph per
/// independent evaluation.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of the last backward pass, if `v` received one.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor, zeros when `v` received none.
    pub fn grad_tensor(&self, v: Var) -> Tensor<T> {
        let shape = self.shape(v).to_vec();
        match self.grad(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient matches node shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Clear gradients so that [`Graph::backward`] may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    // ----------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_acc(self.data(a), self.data(b), &mut out, m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), rg))
    }

    /// `a + b` where `b` (shape `[n]`) is added to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.row_broadcast_len("add_row", a, b)?;
        let bd = self.data(b);
        let out: Vec<T> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % n])
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddRow(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), rg))
    }

    /// `a ⊙ b` where `b` (shape `[n]`) scales every row of `a`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.row_broadcast_len("mul_row", a, b)?;
        let bd = self.data(b);
        let out: Vec<T> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x * bd[i % n])
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MulRow(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let s: T = lit(s);
        let value = self.value(a).map(|x| x * s);
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Scale(a, s), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(shape_err("transpose", format!("{sa:?} is not rank 2")));
        }
        let (m, n) = (sa[0], sa[1]);
        let d = self.data(a);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self
            .value(a)
            .reshaped(shape)
            .map_err(|_| shape_err("reshape", format!("{:?} -> {shape:?}", self.shape(a))))?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| shape_err("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} on {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(shape_err("concat", format!("{base:?} with {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_extents(&out_shape, axis);
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let block = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.data(v)[o * block..(o + 1) * block]);
            }
        }
        let rg = self.any_grad(inputs);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || len == 0 || start + len > sa[axis] {
            return Err(shape_err(
                "slice",
                format!("{sa:?} axis {axis} range {start}..{}", start + len),
            ));
        }
        let (outer, dim, inner) = axis_extents(&sa, axis);
        let d = self.data(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut out_shape = sa;
        out_shape[axis] = len;
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Slice { input: a, axis, start }, rg))
    }

    /// Rows of `table` (`[v,d]`) selected by `ids`.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 || ids.is_empty() {
            return Err(shape_err("embedding_lookup", format!("table {st:?}, {} ids", ids.len())));
        }
        let (v, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(AutodiffError::Index {
                op: "embedding_lookup",
                index: bad,
                bound: v,
            });
        }
        let td = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::EmbeddingLookup {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Output element `e` is input element `indices[e]` (flat, row-major).
    /// Backs patchify/unpatchify and other fixed permutations.
    pub fn gather(&mut self, a: Var, indices: &[usize], shape: &[usize]) -> Result<Var> {
        let n = self.value(a).numel();
        if indices.len() != shape.iter().product::<usize>() {
            return Err(shape_err("gather", format!("{} indices for shape {shape:?}", indices.len())));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(AutodiffError::Index {
                op: "gather",
                index: bad,
                bound: n,
            });
        }
        let d = self.data(a);
        let out: Vec<T> = indices.iter().map(|&i| d[i]).collect();
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Tensor::new(shape.to_vec(), out)?,
            Op::Gather {
                input: a,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Zero-mean, unit-variance normalization of each last-axis row (no affine).
    pub fn layer_normalize(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let n = *sa
            .last()
            .ok_or_else(|| shape_err("layer_normalize", "scalar input"))?;
        let d = self.data(a);
        let rows = d.len() / n;
        let eps: T = lit(LAYER_NORM_EPS);
        let inv_n: T = lit(1.0 / n as f64);
        let mut out = vec![T::zero(); d.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &d[r * n..(r + 1) * n];
            let mut mean = T::zero();
            for &x in row {
                mean += x;
            }
            mean = mean * inv_n;
            let mut var = T::zero();
            for &x in row {
                var += (x - mean) * (x - mean);
            }
            var = var * inv_n;
            let rs = T::one() / (var + eps).sqrt();
            for (o, &x) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (x - mean) * rs;
            }
            rstd.push(rs);
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(sa, out)?, Op::LayerNorm { input: a, rstd }, rg))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(shape_err("softmax", format!("axis {axis} on {sa:?}")));
        }
        let (outer, dim, inner) = axis_extents(&sa, axis);
        let d = self.data(a);
        let mut out = vec![T::zero(); d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| o * dim * inner + k * inner + i;
                let mut mx = T::neg_infinity();
                for k in 0..dim {
                    mx = mx.max(d[idx(k)]);
                }
                let mut sum = T::zero();
                for k in 0..dim {
                    let e = (d[idx(k)] - mx).exp();
                    out[idx(k)] = e;
                    sum += e;
                }
                for k in 0..dim {
                    out[idx(k)] = out[idx(k)] / sum;
                }
            }
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(sa, out)?, Op::Softmax { input: a, axis }, rg))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(kernels::gelu);
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Gelu(a), rg))
    }

    /// Mean along `axis`; the axis is removed from the shape.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(shape_err("mean", format!("axis {axis} on {sa:?}")));
        }
        let (outer, dim, inner) = axis_extents(&sa, axis);
        let d = self.data(a);
        let inv: T = lit(1.0 / dim as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..dim {
                let src = &d[o * dim * inner + k * inner..o * dim * inner + (k + 1) * inner];
                for (dst, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += x;
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v * inv);
        let mut out_shape = sa;
        out_shape.remove(axis);
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Mean { input: a, axis }, rg))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let mut acc = T::zero();
        for &x in self.data(a) {
            acc += x;
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::scalar(acc), Op::Sum(a), rg))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let mut acc = T::zero();
        for (&x, &y) in self.data(a).iter().zip(self.data(b)) {
            acc += (x - y) * (x - y);
        }
        let n: T = lit(self.value(a).numel() as f64);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::scalar(acc / n), Op::Mse(a, b), rg))
    }

    /// `Σ w⊙(a−b)² / (Σ w + eps)` with constant weights `w`.
    pub fn weighted_mse(&mut self, a: Var, b: Var, weights: &Tensor<T>, eps: f64) -> Result<Var> {
        self.same_shape("weighted_mse", a, b)?;
        if weights.shape() != self.shape(a) {
            return Err(shape_err(
                "weighted_mse",
                format!("weights {:?} vs {:?}", weights.shape(), self.shape(a)),
            ));
        }
        let mut wsum = T::zero();
        for &w in weights.data() {
            wsum += w;
        }
        let denom = wsum + lit(eps);
        let mut acc = T::zero();
        for ((&x, &y), &w) in self.data(a).iter().zip(self.data(b)).zip(weights.data()) {
            acc += w * (x - y) * (x - y);
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::scalar(acc / denom),
            Op::WeightedMse {
                a,
                b,
                weights: weights.data().to_vec(),
                denom,
            },
            rg,
        ))
    }

    /// Weighted mean negative log-likelihood `Σ wᵢ·NLLᵢ / Σ wᵢ` of `targets`
    /// under row-wise softmax of `logits` (`[l, classes]`).
    pub fn cross_entropy_with_logits(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != targets.len() || weights.len() != targets.len() {
            return Err(shape_err(
                "cross_entropy_with_logits",
                format!("logits {sl:?}, {} targets, {} weights", targets.len(), weights.len()),
            ));
        }
        let (l, c) = (sl[0], sl[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(AutodiffError::Index {
                op: "cross_entropy_with_logits",
                index: bad,
                bound: c,
            });
        }
        let mut total = T::zero();
        for &w in weights {
            total += w;
        }
        if total <= T::zero() {
            return Err(AutodiffError::Invalid {
                op: "cross_entropy_with_logits",
                detail: "total weight must be positive".into(),
            });
        }
        let d = self.data(logits);
        let mut probs = vec![T::zero(); l * c];
        let mut acc = T::zero();
        for r in 0..l {
            let row = &d[r * c..(r + 1) * c];
            let mut mx = T::neg_infinity();
            for &x in row {
                mx = mx.max(x);
            }
            let mut sum = T::zero();
            for (p, &x) in probs[r * c..(r + 1) * c].iter_mut().zip(row) {
                *p = (x - mx).exp();
                sum += *p;
            }
            for p in &mut probs[r * c..(r + 1) * c] {
                *p = *p / sum;
            }
            if weights[r] != T::zero() {
                let log_p = row[targets[r]] - mx - sum.ln();
                acc += -weights[r] * log_p;
            }
        }
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(acc / total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                total,
                probs,
            },
            rg,
        ))
    }

    /// 3×3 convolution, stride 1, zero padding 1.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (si, sw, sb) = (self.shape(input), self.shape(weight), self.shape(bias));
        let ok = si.len() == 3
            && sw.len() == 4
            && sw[1] == si[0]
            && sw[2] == 3
            && sw[3] == 3
            && sb.len() == 1
            && sb[0] == sw[0];
        if !ok {
            return Err(shape_err(
                "conv2d",
                format!("input {si:?}, weight {sw:?}, bias {sb:?}"),
            ));
        }
        let (cin, h, w, cout) = (si[0], si[1], si[2], sw[0]);
        let out = kernels::conv3x3_forward(self.data(input), self.data(weight), self.data(bias), cin, cout, h, w);
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(
            Tensor::new(vec![cout, h, w], out)?,
            Op::Conv2d { input, weight, bias },
            rg,
        ))
    }

    /// ×2 bilinear upsampling of `[c,h,w]` (half-pixel centres, clamped edges).
    pub fn upsample_bilinear2x(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 3 {
            return Err(shape_err("upsample_bilinear2x", format!("{sa:?} is not [c,h,w]")));
        }
        let (c, h, w) = (sa[0], sa[1], sa[2]);
        let ty = kernels::upsample_taps(h);
        let tx = kernels::upsample_taps(w);
        let d = self.data(a);
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            let src = &d[ch * h * w..(ch + 1) * h * w];
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                let (wy0, wy1): (T, T) = (lit(wy0), lit(wy1));
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    let (wx0, wx1): (T, T) = (lit(wx0), lit(wx1));
                    let top = src[y0 * w + x0] * wx0 + src[y0 * w + x1] * wx1;
                    let bottom = src[y1 * w + x0] * wx0 + src[y1 * w + x1] * wx1;
                    out[ch * oh * ow + oy * ow + ox] = top * wy0 + bottom * wy1;
                }
            }
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(vec![c, oh, ow], out)?, Op::Upsample2x(a), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn row_broadcast_len(&self, op: &'static str, a: Var, b: Var) -> Result<usize> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        match (sa.last(), sb) {
            (Some(&n), [m]) if n == *m => Ok(n),
            _ => Err(shape_err(op, format!("{sa:?} with row {sb:?}"))),
        }
    }

    // ------------------------------------------------------------ backward

    /// Populate gradients of `loss` (a one-element tensor) with respect to
    /// every node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(AutodiffError::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [T], &Self)) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let mut buf = self.grads[v.0]
            .take()
            .unwrap_or_else(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
        f(&mut buf, self);
        self.grads[v.0] = Some(buf);
    }

    fn backprop_node(&mut self, idx: usize, g: &[T]) {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                self.acc(a, |buf, s| kernels::matmul_nt_acc(g, s.data(b), buf, m, n, k));
                self.acc(b, |buf, s| kernels::matmul_tn_acc(s.data(a), g, buf, m, k, n));
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    self.acc(v, |buf, _| add_into(buf, g));
                }
            }
            Op::AddRow(a, b) => {
                self.acc(a, |buf, _| add_into(buf, g));
                self.acc(b, |buf, _| {
                    let n = buf.len();
                    for (i, &gv) in g.iter().enumerate() {
                        buf[i % n] += gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                self.acc(a, |buf, s| {
                    for ((d, &gv), &y) in buf.iter_mut().zip(g).zip(s.data(b)) {
                        *d += gv * y;
                    }
                });
                self.acc(b, |buf, s| {
                    for ((d, &gv), &x) in buf.iter_mut().zip(g).zip(s.data(a)) {
                        *d += gv * x;
                    }
                });
            }
            Op::MulRow(a, b) => {
                self.acc(a, |buf, s| {
                    let bd = s.data(b);
                    let n = bd.len();
                    for (i, (d, &gv)) in buf.iter_mut().zip(g).enumerate() {
                        *d += gv * bd[i % n];
                    }
                });
                self.acc(b, |buf, s| {
                    let n = buf.len();
                    for (i, (&gv, &x)) in g.iter().zip(s.data(a)).enumerate() {
                        buf[i % n] += gv * x;
                    }
                });
            }
            Op::Scale(a, sc) => self.acc(a, |buf, _| {
                for (d, &gv) in buf.iter_mut().zip(g) {
                    *d += gv * sc;
                }
            }),
            Op::Transpose(a) => {
                let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
                self.acc(a, |buf, _| {
                    for i in 0..m {
                        for j in 0..n {
                            buf[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Reshape(a) => self.acc(a, |buf, _| add_into(buf, g)),
            Op::Concat { inputs, axis } => {
                let out_shape = self.nodes[idx].value.shape().to_vec();
                let (outer, dim, inner) = axis_extents(&out_shape, axis);
                let mut offset = 0;
                for v in inputs {
                    let len = self.shape(v)[axis];
                    self.acc(v, |buf, _| {
                        for o in 0..outer {
                            let src = o * dim * inner + offset * inner;
                            add_into(&mut buf[o * len * inner..(o + 1) * len * inner], &g[src..src + len * inner]);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let len = self.nodes[idx].value.shape()[axis];
                let (outer, dim, inner) = axis_extents(self.shape(input), axis);
                self.acc(input, |buf, _| {
                    for o in 0..outer {
                        let dst = o * dim * inner + start * inner;
                        add_into(&mut buf[dst..dst + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            Op::EmbeddingLookup { table, ids } => {
                let d = self.shape(table)[1];
                self.acc(table, |buf, _| {
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(&mut buf[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Gather { input, indices } => self.acc(input, |buf, _| {
                for (&i, &gv) in indices.iter().zip(g) {
                    buf[i] += gv;
                }
            }),
            Op::LayerNorm { input, rstd } => {
                let y = self.nodes[idx].value.data().to_vec();
                let n = *self.shape(input).last().unwrap();
                let inv_n: T = lit(1.0 / n as f64);
                self.acc(input, |buf, _| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let (gr, yr) = (&g[r * n..(r + 1) * n], &y[r * n..(r + 1) * n]);
                        let mut mg = T::zero();
                        let mut mgy = T::zero();
                        for (&gv, &yv) in gr.iter().zip(yr) {
                            mg += gv;
                            mgy += gv * yv;
                        }
                        mg = mg * inv_n;
                        mgy = mgy * inv_n;
                        for ((d, &gv), &yv) in buf[r * n..(r + 1) * n].iter_mut().zip(gr).zip(yr) {
                            *d += rs * (gv - mg - yv * mgy);
                        }
                    }
                });
            }
            Op::Softmax { input, axis } => {
                let y = self.nodes[idx].value.data().to_vec();
                let (outer, dim, inner) = axis_extents(self.shape(input), axis);
                self.acc(input, |buf, _| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| o * dim * inner + k * inner + i;
                            let mut dot = T::zero();
                            for k in 0..dim {
                                dot += g[at(k)] * y[at(k)];
                            }
                            for k in 0..dim {
                                buf[at(k)] += y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Gelu(a) => self.acc(a, |buf, s| {
                for ((d, &gv), &x) in buf.iter_mut().zip(g).zip(s.data(a)) {
                    *d += gv * kernels::gelu_grad(x);
                }
            }),
            Op::Mean { input, axis } => {
                let (outer, dim, inner) = axis_extents(self.shape(input), axis);
                let inv: T = lit(1.0 / dim as f64);
                self.acc(input, |buf, _| {
                    for o in 0..outer {
                        for k in 0..dim {
                            let dst = o * dim * inner + k * inner;
                            for (d, &gv) in buf[dst..dst + inner].iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *d += gv * inv;
                            }
                        }
                    }
                });
            }
            Op::Sum(a) => self.acc(a, |buf, _| buf.iter_mut().for_each(|d| *d += g[0])),
            Op::Mse(a, b) => {
                let n: T = lit(self.value(a).numel() as f64);
                let two: T = lit(2.0);
                let diff: Vec<T> = self
                    .data(a)
                    .iter()
                    .zip(self.data(b))
                    .map(|(&x, &y)| two * (x - y) / n * g[0])
                    .collect();
                self.acc(a, |buf, _| add_into(buf, &diff));
                self.acc(b, |buf, _| sub_into(buf, &diff));
            }
            Op::WeightedMse { a, b, weights, denom } => {
                let two: T = lit(2.0);
                let diff: Vec<T> = self
                    .data(a)
                    .iter()
                    .zip(self.data(b))
                    .zip(&weights)
                    .map(|((&x, &y), &w)| two * w * (x - y) / denom * g[0])
                    .collect();
                self.acc(a, |buf, _| add_into(buf, &diff));
                self.acc(b, |buf, _| sub_into(buf, &diff));
            }
            Op::CrossEntropy { logits, targets, weights, total, probs } => {
                let c = self.shape(logits)[1];
                self.acc(logits, |buf, _| {
                    for (r, (&t, &w)) in targets.iter().zip(&weights).enumerate() {
                        if w == T::zero() {
                            continue;
                        }
                        let scale = g[0] * w / total;
                        let pr = &probs[r * c..(r + 1) * c];
                        for (j, (d, &p)) in buf[r * c..(r + 1) * c].iter_mut().zip(pr).enumerate() {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            *d += scale * (p - onehot);
                        }
                    }
                });
            }
            Op::Conv2d { input, weight, bias } => {
                let si = self.shape(input).to_vec();
                let cout = self.shape(weight)[0];
                let (cin, h, w) = (si[0], si[1], si[2]);
                let want = [input, weight, bias].map(|v| self.nodes[v.0].requires_grad);
                let mut bufs = [input, weight, bias].map(|v| {
                    if self.nodes[v.0].requires_grad {
                        self.grads[v.0]
                            .take()
                            .or_else(|| Some(vec![T::zero(); self.nodes[v.0].value.numel()]))
                    } else {
                        None
                    }
                });
                {
                    let [bi, bw, bb] = &mut bufs;
                    kernels::conv3x3_backward(
                        g,
                        self.data(input),
                        self.data(weight),
                        cin,
                        cout,
                        h,
                        w,
                        bi.as_deref_mut(),
                        bw.as_deref_mut(),
                        bb.as_deref_mut(),
                    );
                }
                for ((v, buf), wanted) in [input, weight, bias].into_iter().zip(bufs).zip(want) {
                    if wanted {
                        self.grads[v.0] = buf;
                    }
                }
            }
            Op::Upsample2x(a) => {
                let sa = self.shape(a).to_vec();
                let (c, h, w) = (sa[0], sa[1], sa[2]);
                let ty = kernels::upsample_taps(h);
                let tx = kernels::upsample_taps(w);
                let (oh, ow) = (2 * h, 2 * w);
                self.acc(a, |buf, _| {
                    for ch in 0..c {
                        let dst = &mut buf[ch * h * w..(ch + 1) * h * w];
                        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                            let (wy0, wy1): (T, T) = (lit(wy0), lit(wy1));
                            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                                let (wx0, wx1): (T, T) = (lit(wx0), lit(wx1));
                                let gv = g[ch * oh * ow + oy * ow + ox];
                                dst[y0 * w + x0] += gv * wy0 * wx0;
                                dst[y0 * w + x1] += gv * wy0 * wx1;
                                dst[y1 * w + x0] += gv * wy1 * wx0;
                                dst[y1 * w + x1] += gv * wy1 * wx1;
                            }
                        }
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sub_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d -= s;
    }
}
