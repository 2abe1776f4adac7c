//! Vision encoder and decoder, super-resolution head, text embedding,
//! multi-scale context fusion and the text decoder.
//!
//! All forward functions are generic over the graph scalar so the same code
//! trains in f32 and is gradient-checked in f64. Parameters live in a
//! [`ParamStore`]; a forward pass first binds them into the graph.

mod attention;
mod layers;
mod params;

use ecamp_autodiff::{AutodiffError, Graph, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::masking::{patchify, unpatchify_indices, MaskError, PatchMaskPlan};
use crate::rng::{derive_rng, STREAM_INIT};

pub use attention::ModelAttention;
pub use layers::{sinusoid_table, Attention, Block, Linear, Norm};
pub use params::{xavier, Bound, ParamId, ParamStore};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{0}")]
    Input(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size_low: usize,
    pub image_size_high: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub text_decoder_depth: usize,
    pub mask_ratio_img: f64,
    pub mask_ratio_text: f64,
    /// Hidden channels between the two super-resolution convolutions.
    pub sr_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size_low: 32,
            image_size_high: 64,
            patch_size: 8,
            embed_dim: 64,
            encoder_depth: 4,
            decoder_depth: 2,
            heads: 4,
            vocab_size: 64,
            max_text_len: 64,
            text_decoder_depth: 2,
            mask_ratio_img: 0.75,
            mask_ratio_text: 0.75,
            sr_channels: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.image_size_high != 2 * self.image_size_low {
            return bad(format!(
                "image_size_high {} must be twice image_size_low {}",
                self.image_size_high, self.image_size_low
            ));
        }
        if self.patch_size == 0 || self.image_size_low % self.patch_size != 0 {
            return bad(format!(
                "image_size_low {} is not divisible by patch_size {}",
                self.image_size_low, self.patch_size
            ));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!("embed_dim {} is not divisible by heads {}", self.embed_dim, self.heads));
        }
        if self.embed_dim % 2 != 0 {
            return bad(format!("embed_dim {} must be even", self.embed_dim));
        }
        if self.vocab_size < 4 {
            return bad(format!("vocab_size {} leaves no room for special tokens", self.vocab_size));
        }
        if self.max_text_len == 0 || self.sr_channels == 0 {
            return bad("max_text_len and sr_channels must be positive".into());
        }
        for (name, r) in [("mask_ratio_img", self.mask_ratio_img), ("mask_ratio_text", self.mask_ratio_text)] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{name} {r} outside [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size_low / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }
}

/// All intermediate features of the fusion block.
#[derive(Debug, Clone, Copy)]
pub struct FusionBundle {
    /// `[L, D]`
    pub f_t: Var,
    /// `[N, D]`
    pub f_v_local: Var,
    /// `[D]`
    pub f_v_global: Var,
    /// `[L, D]`
    pub f_a_local: Var,
    /// `[D]`
    pub f_a_global: Var,
    /// `[L, D]`
    pub f_f: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    Global,
    Local,
}

#[derive(Debug, Clone)]
pub struct ImageDecoder {
    pub embed: Linear,
    pub mask_token: ParamId,
    pub blocks: Vec<Block>,
    pub norm: Norm,
    pub head: Linear,
}

#[derive(Debug, Clone)]
pub struct SrHead {
    pub conv1_w: ParamId,
    pub conv1_b: ParamId,
    pub conv2_w: ParamId,
    pub conv2_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct Mscf {
    pub sa: Attention,
    pub sa_norm: Norm,
    pub ca: Attention,
    pub global_proj: Linear,
}

/// Parameter layout. Identical configs always produce identical names,
/// shapes and registration order.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub patch_embed: Linear,
    pub encoder: Vec<Block>,
    pub encoder_norm: Norm,
    pub image_decoder: ImageDecoder,
    pub sr: SrHead,
    pub token_embed: ParamId,
    pub position_embed: ParamId,
    pub mscf: Mscf,
    pub text_decoder: Vec<Block>,
    pub text_norm: Norm,
    pub text_head: Linear,
    /// Sinusoidal table `[n_patches, D]`.
    patch_positions: Vec<f64>,
}

/// Top-level names of the parameter groups, in registration order.
pub const PARAM_GROUPS: [&str; 9] = [
    "patch_embed",
    "encoder",
    "image_decoder",
    "sr",
    "text_embed",
    "mscf.sa",
    "mscf.ca",
    "mscf.global_proj",
    "text_decoder",
];

/// The group a parameter name belongs to (see [`PARAM_GROUPS`]).
pub fn param_group(name: &str) -> &'static str {
    PARAM_GROUPS
        .iter()
        .copied()
        .filter(|g| name == *g || name.starts_with(&format!("{g}.")))
        .max_by_key(|g| g.len())
        .unwrap_or("other")
}

impl Model {
    /// Layout plus freshly initialized parameters drawn from `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut rng = derive_rng(seed, &[STREAM_INIT]);
        let mut store = ParamStore::new();
        let model = Self::register(config, &mut store, &mut rng);
        Ok((model, store))
    }

    fn register<R: Rng + ?Sized>(c: &ModelConfig, s: &mut ParamStore, rng: &mut R) -> Self {
        let d = c.embed_dim;
        let pd = c.patch_dim();
        let patch_embed = Linear::new(s, "patch_embed", pd, d, rng);
        let encoder = (0..c.encoder_depth)
            .map(|i| Block::new(s, &format!("encoder.{i}"), d, c.heads, rng))
            .collect();
        let encoder_norm = Norm::new(s, "encoder.norm", d);
        let image_decoder = ImageDecoder {
            embed: Linear::new(s, "image_decoder.embed", d, d, rng),
            mask_token: s.add("image_decoder.mask_token", params::uniform(rng, &[1, d], 0.02)),
            blocks: (0..c.decoder_depth)
                .map(|i| Block::new(s, &format!("image_decoder.{i}"), d, c.heads, rng))
                .collect(),
            norm: Norm::new(s, "image_decoder.norm", d),
            head: Linear::new(s, "image_decoder.head", d, pd, rng),
        };
        let ch = c.sr_channels;
        let conv2_init = xavier(rng, &[1, ch, 3, 3], 9 * ch, 9).map(|v| 0.1 * v);
        let sr = SrHead {
            conv1_w: s.add("sr.conv1.w", xavier(rng, &[ch, 1, 3, 3], 9, 9 * ch)),
            conv1_b: s.add("sr.conv1.b", Tensor::zeros(&[ch])),
            conv2_w: s.add("sr.conv2.w", conv2_init),
            conv2_b: s.add("sr.conv2.b", Tensor::zeros(&[1])),
        };
        let token_embed = s.add("text_embed.token", params::uniform(rng, &[c.vocab_size, d], 0.1));
        let position_embed = s.add("text_embed.position", params::uniform(rng, &[c.max_text_len, d], 0.1));
        let mscf = Mscf {
            sa: Attention::new(s, "mscf.sa", d, c.heads, rng),
            sa_norm: Norm::new(s, "mscf.sa.norm", d),
            ca: Attention::new(s, "mscf.ca", d, c.heads, rng),
            global_proj: Linear::new(s, "mscf.global_proj", d, d, rng),
        };
        let text_decoder = (0..c.text_decoder_depth)
            .map(|i| Block::new(s, &format!("text_decoder.{i}"), d, c.heads, rng))
            .collect();
        let text_norm = Norm::new(s, "text_decoder.norm", d);
        let text_head = Linear::new(s, "text_decoder.head", d, c.vocab_size, rng);
        Self {
            config: c.clone(),
            patch_embed,
            encoder,
            encoder_norm,
            image_decoder,
            sr,
            token_embed,
            position_embed,
            mscf,
            text_decoder,
            text_norm,
            text_head,
            patch_positions: sinusoid_table(c.n_patches(), d),
        }
    }

    /// Rows of the patch position table for `positions`.
    pub fn patch_position_encoding<T: Scalar>(&self, positions: &[usize]) -> Tensor<T> {
        let d = self.config.embed_dim;
        Tensor::from_fn(&[positions.len(), d], |i| {
            T::from_f64_lossy(self.patch_positions[positions[i / d] * d + i % d])
        })
    }

    /// `[n_patches, P*P]` patch matrix of a low-resolution image.
    pub fn patches<T: Scalar>(&self, image_low: &[f32]) -> Result<Tensor<T>> {
        let side = self.config.image_size_low;
        if image_low.len() != side * side {
            return Err(ModelError::Input(format!(
                "low-resolution image has {} pixels, expected {side}x{side}",
                image_low.len()
            )));
        }
        let p = self.config.patch_size;
        let flat = patchify(image_low, side, side, p)?;
        Ok(Tensor::new(
            vec![self.config.n_patches(), p * p],
            flat.into_iter().map(|v| T::from_f64_lossy(v as f64)).collect(),
        )?)
    }

    /// `[N_u, P*P]` visible patches at `positions` to `[N_u, D]` features.
    pub fn encode_image<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        patches: Var,
        positions: &[usize],
    ) -> Result<Var> {
        let shape = g.shape(patches).to_vec();
        if shape.len() != 2 || shape[1] != self.config.patch_dim() || shape[0] != positions.len() {
            return Err(ModelError::Input(format!(
                "encode_image: patches {shape:?} do not match {} positions of length {}",
                positions.len(),
                self.config.patch_dim()
            )));
        }
        if let Some(&bad) = positions.iter().find(|&&i| i >= self.config.n_patches()) {
            return Err(ModelError::Input(format!("encode_image: patch position {bad} out of range")));
        }
        let x = self.patch_embed.forward(g, p, patches)?;
        let pe = g.constant(self.patch_position_encoding(positions));
        let mut x = g.add(x, pe)?;
        for b in &self.encoder {
            x = b.forward(g, p, x, None)?;
        }
        Ok(self.encoder_norm.forward(g, p, x)?)
    }

    /// Decoder input `[N, D]`: embedded visible features and the shared mask
    /// token, restored to patch order, plus position encodings.
    pub fn image_decoder_inputs<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        f_v: Var,
        plan: &PatchMaskPlan,
    ) -> Result<Var> {
        let dec = &self.image_decoder;
        let h = dec.embed.forward(g, p, f_v)?;
        let rows = if plan.masked_indices.is_empty() {
            h
        } else {
            let m = g.embedding_lookup(p.var(dec.mask_token), &vec![0; plan.masked_indices.len()])?;
            g.concat(&[h, m], 0)?
        };
        let full = g.embedding_lookup(rows, &plan.restore_order())?;
        let all: Vec<usize> = (0..plan.n_patches).collect();
        let pe = g.constant(self.patch_position_encoding(&all));
        Ok(g.add(full, pe)?)
    }

    /// Predicted patches `[N, P*P]`.
    pub fn decode_image<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, f_v: Var, plan: &PatchMaskPlan) -> Result<Var> {
        let dec = &self.image_decoder;
        let mut x = self.image_decoder_inputs(g, p, f_v, plan)?;
        for b in &dec.blocks {
            x = b.forward(g, p, x, None)?;
        }
        let x = dec.norm.forward(g, p, x)?;
        Ok(dec.head.forward(g, p, x)?)
    }

    /// `[N, P*P]` patches to a `[1, H, W]` image.
    pub fn unpatchify<T: Scalar>(&self, g: &mut Graph<T>, patches: Var) -> Result<Var> {
        let side = self.config.image_size_low;
        let idx = unpatchify_indices(side, side, self.config.patch_size)?;
        Ok(g.gather(patches, &idx, &[1, side, side])?)
    }

    /// `[1, H, W] -> [1, 2H, 2W]`: bilinear upsample plus a two-convolution
    /// residual.
    pub fn sr_head<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, low: Var) -> Result<Var> {
        let u = g.upsample_bilinear2x(low)?;
        let h = g.conv2d(u, p.var(self.sr.conv1_w), p.var(self.sr.conv1_b))?;
        let h = g.gelu(h)?;
        let r = g.conv2d(h, p.var(self.sr.conv2_w), p.var(self.sr.conv2_b))?;
        Ok(g.add(u, r)?)
    }

    /// Token plus learned position embedding, `[L, D]`.
    pub fn embed_text<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() || ids.len() > self.config.max_text_len {
            return Err(ModelError::Input(format!(
                "embed_text: length {} outside 1..={}",
                ids.len(),
                self.config.max_text_len
            )));
        }
        let tok = g.embedding_lookup(p.var(self.token_embed), ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = g.embedding_lookup(p.var(self.position_embed), &positions)?;
        Ok(g.add(tok, pos)?)
    }

    /// `f_t = LN(E_t + SA(E_t))`, `f_a^l = CA(f_t, f_v^l)`, `f_v^g = mean(f_v^l)`,
    /// `f_a^g = W f_v^g + b`, `f_f = f_t + f_a^l + f_a^g` (row broadcast).
    pub fn mscf_fuse<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        f_v_local: Var,
        e_t: Var,
        keep: Option<&[bool]>,
    ) -> Result<FusionBundle> {
        let (sv, st) = (g.shape(f_v_local).to_vec(), g.shape(e_t).to_vec());
        let d = self.config.embed_dim;
        if sv.len() != 2 || st.len() != 2 || sv[1] != d || st[1] != d {
            return Err(ModelError::Input(format!(
                "mscf_fuse: vision {sv:?} and text {st:?} must both be [_, {d}]"
            )));
        }
        let m = &self.mscf;
        let sa = m.sa.forward(g, p, e_t, e_t, keep)?;
        let r = g.add(e_t, sa)?;
        let f_t = m.sa_norm.forward(g, p, r)?;
        let f_a_local = m.ca.forward(g, p, f_t, f_v_local, None)?;
        let f_v_global = g.mean(f_v_local, 0)?;
        let gv = g.reshape(f_v_global, &[1, d])?;
        let ga = m.global_proj.forward(g, p, gv)?;
        let f_a_global = g.reshape(ga, &[d])?;
        let s = g.add(f_t, f_a_local)?;
        let f_f = g.add_row(s, f_a_global)?;
        Ok(FusionBundle {
            f_t,
            f_v_local,
            f_v_global,
            f_a_local,
            f_a_global,
            f_f,
        })
    }

    /// Position-free decoder over `f_f`: vocabulary logits `[L, V]`.
    pub fn decode_text<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, f_f: Var, keep: Option<&[bool]>) -> Result<Var> {
        let mut x = f_f;
        for b in &self.text_decoder {
            x = b.forward(g, p, x, keep)?;
        }
        let x = self.text_norm.forward(g, p, x)?;
        Ok(self.text_head.forward(g, p, x)?)
    }

    /// Unmasked encoding of a full low-resolution image: `[D]` pooled
    /// features or `[N, D]` local features.
    pub fn forward_finetune<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        image_low: &[f32],
        mode: FeatureMode,
    ) -> Result<Var> {
        let patches = g.constant(self.patches(image_low)?);
        let all: Vec<usize> = (0..self.config.n_patches()).collect();
        let local = self.encode_image(g, p, patches, &all)?;
        match mode {
            FeatureMode::Local => Ok(local),
            FeatureMode::Global => Ok(g.mean(local, 0)?),
        }
    }

    /// Pooled features of one image, computed in a scratch f32 graph.
    pub fn global_features(&self, params: &ParamStore, image_low: &[f32]) -> Result<Vec<f32>> {
        let mut g = Graph::<f32>::new();
        let p = bind_constants(params, &mut g);
        let v = self.forward_finetune(&mut g, &p, image_low, FeatureMode::Global)?;
        Ok(g.value(v).data().to_vec())
    }
}

/// Parameters as non-trainable graph constants, for inference.
pub fn bind_constants<T: Scalar>(params: &ParamStore, g: &mut Graph<T>) -> Bound {
    Bound::from_vars(params.values().iter().map(|t| g.constant(t.cast())).collect())
}
