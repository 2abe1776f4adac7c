use ecamp_autodiff::{lit, Graph, Result, Scalar, Tensor, Var};
use rand::Rng;

use super::params::{xavier, Bound, ParamId, ParamStore};

const MASKED_LOGIT: f64 = -1e9;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let w = store.add(format!("{name}.w"), xavier(rng, &[fan_in, fan_out], fan_in, fan_out));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Self { w, b: Some(b) }
    }

    pub fn without_bias<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), xavier(rng, &[fan_in, fan_out], fan_in, fan_out));
        Self { w, b: None }
    }

    /// `[n, in] -> [n, out]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.w))?;
        match self.b {
            Some(b) => g.add_row(y, p.var(b)),
            None => Ok(y),
        }
    }
}

/// Layer normalization over the last axis with a learned gain and bias.
#[derive(Debug, Clone)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[dim])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.layer_normalize(x)?;
        let y = g.mul_row(y, p.var(self.gain))?;
        g.add_row(y, p.var(self.bias))
    }
}

/// Multi-head scaled dot-product attention with input and output projections.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            // A key bias shifts every score of a query equally, so softmax ignores it.
            k: Linear::without_bias(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
        }
    }

    /// Queries from `xq` `[lq, d]`, keys and values from `xkv` `[lk, d]`.
    /// `keep[j] == false` removes key `j` from every softmax.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        xq: Var,
        xkv: Var,
        keep: Option<&[bool]>,
    ) -> Result<Var> {
        let q = self.q.forward(g, p, xq)?;
        let k = self.k.forward(g, p, xkv)?;
        let v = self.v.forward(g, p, xkv)?;
        let (lq, d) = (g.shape(q)[0], g.shape(q)[1]);
        let lk = g.shape(k)[0];
        let dh = d / self.heads;
        let bias = match keep {
            Some(keep) if keep.iter().any(|&k| !k) => {
                assert_eq!(keep.len(), lk, "key mask length");
                let row: Vec<T> = keep.iter().map(|&k| if k { T::zero() } else { lit(MASKED_LOGIT) }).collect();
                Some(g.constant(Tensor::from_fn(&[lq, lk], |i| row[i % lk])))
            }
            _ => None,
        };
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice(q, 1, h * dh, dh)?;
            let kh = g.slice(k, 1, h * dh, dh)?;
            let vh = g.slice(v, 1, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let s = g.matmul(qh, kt)?;
            let mut s = g.scale(s, scale)?;
            if let Some(b) = bias {
                s = g.add(s, b)?;
            }
            let a = g.softmax(s, 1)?;
            outs.push(g.matmul(a, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
        self.o.forward(g, p, cat)
    }
}

/// Pre-norm transformer block: self-attention and a 4x GELU feed-forward,
/// each wrapped in a residual connection.
#[derive(Debug, Clone)]
pub struct Block {
    pub norm1: Norm,
    pub attn: Attention,
    pub norm2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            norm1: Norm::new(store, &format!("{name}.norm1"), dim),
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, rng),
            norm2: Norm::new(store, &format!("{name}.norm2"), dim),
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, 4 * dim, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), 4 * dim, dim, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, keep: Option<&[bool]>) -> Result<Var> {
        let h = self.norm1.forward(g, p, x)?;
        let h = self.attn.forward(g, p, h, h, keep)?;
        let x = g.add(x, h)?;
        let h = self.norm2.forward(g, p, x)?;
        let h = self.fc1.forward(g, p, h)?;
        let h = g.gelu(h)?;
        let h = self.fc2.forward(g, p, h)?;
        g.add(x, h)
    }
}

/// Fixed sine/cosine table `[n, d]`.
pub fn sinusoid_table(n: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * d];
    for pos in 0..n {
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * freq;
            out[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}
