use std::path::Path;

use ecamp_autodiff::serialize::{read_archive, write_archive, Archive};
use ecamp_autodiff::Tensor;

use super::{AdamW, TrainError};
use crate::corpus::Vocab;
use crate::model::{Model, ModelConfig, ParamStore};

const FORMAT: &str = "ecamp-checkpoint-1";

/// Everything needed to resume training or to run a frozen encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub seed: u64,
    pub model: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    pub optimizer: Option<AdamW>,
    pub running_total: Option<f64>,
}

fn model_meta(c: &ModelConfig) -> Vec<(String, String)> {
    let fields: [(&str, String); 13] = [
        ("image_size_low", c.image_size_low.to_string()),
        ("image_size_high", c.image_size_high.to_string()),
        ("patch_size", c.patch_size.to_string()),
        ("embed_dim", c.embed_dim.to_string()),
        ("encoder_depth", c.encoder_depth.to_string()),
        ("decoder_depth", c.decoder_depth.to_string()),
        ("heads", c.heads.to_string()),
        ("vocab_size", c.vocab_size.to_string()),
        ("max_text_len", c.max_text_len.to_string()),
        ("text_decoder_depth", c.text_decoder_depth.to_string()),
        ("mask_ratio_img", format!("{:016x}", c.mask_ratio_img.to_bits())),
        ("mask_ratio_text", format!("{:016x}", c.mask_ratio_text.to_bits())),
        ("sr_channels", c.sr_channels.to_string()),
    ];
    fields.into_iter().map(|(k, v)| (format!("model.{k}"), v)).collect()
}

fn meta<'a>(a: &'a Archive, key: &str) -> Result<&'a str, TrainError> {
    a.meta_value(key)
        .ok_or_else(|| TrainError::Checkpoint(format!("missing metadata `{key}`")))
}

fn meta_usize(a: &Archive, key: &str) -> Result<usize, TrainError> {
    let v = meta(a, key)?;
    v.parse()
        .map_err(|_| TrainError::Checkpoint(format!("bad value `{v}` for `{key}`")))
}

fn meta_bits(a: &Archive, key: &str) -> Result<f64, TrainError> {
    let v = meta(a, key)?;
    u64::from_str_radix(v, 16)
        .map(f64::from_bits)
        .map_err(|_| TrainError::Checkpoint(format!("bad value `{v}` for `{key}`")))
}

fn read_model_config(a: &Archive) -> Result<ModelConfig, TrainError> {
    let u = |k: &str| meta_usize(a, &format!("model.{k}"));
    Ok(ModelConfig {
        image_size_low: u("image_size_low")?,
        image_size_high: u("image_size_high")?,
        patch_size: u("patch_size")?,
        embed_dim: u("embed_dim")?,
        encoder_depth: u("encoder_depth")?,
        decoder_depth: u("decoder_depth")?,
        heads: u("heads")?,
        vocab_size: u("vocab_size")?,
        max_text_len: u("max_text_len")?,
        text_decoder_depth: u("text_decoder_depth")?,
        mask_ratio_img: meta_bits(a, "model.mask_ratio_img")?,
        mask_ratio_text: meta_bits(a, "model.mask_ratio_text")?,
        sr_channels: u("sr_channels")?,
    })
}

pub fn save_checkpoint(dir: &Path, ck: &Checkpoint) -> Result<(), TrainError> {
    let mut meta = vec![
        ("format".to_string(), FORMAT.to_string()),
        ("step".to_string(), ck.step.to_string()),
        ("seed".to_string(), ck.seed.to_string()),
    ];
    meta.extend(model_meta(&ck.model));
    if let Some(r) = ck.running_total {
        meta.push(("running_total".into(), format!("{:016x}", r.to_bits())));
    }
    if let Some(opt) = &ck.optimizer {
        meta.push(("adam_t".into(), opt.t.to_string()));
    }
    meta.push(("vocab".into(), ck.vocab.tokens().join(" ")));
    let mut tensors = Vec::new();
    for id in ck.params.ids() {
        let name = ck.params.name(id);
        tensors.push((format!("param/{name}"), ck.params.get(id).clone()));
    }
    if let Some(opt) = &ck.optimizer {
        for (label, buf) in [("adam_m", &opt.m), ("adam_v", &opt.v)] {
            for id in ck.params.ids() {
                let shape = ck.params.get(id).shape().to_vec();
                let t = Tensor::new(shape, buf[id.index()].clone())?;
                tensors.push((format!("{label}/{}", ck.params.name(id)), t));
            }
        }
    }
    write_archive(dir, &Archive { meta, tensors })?;
    Ok(())
}

/// Load and validate a checkpoint. With `expected`, every tensor must also
/// match the shapes that configuration would create.
pub fn load_checkpoint(dir: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint, TrainError> {
    let archive = read_archive(dir).map_err(|e| TrainError::Checkpoint(format!("{}: {e}", dir.display())))?;
    if meta(&archive, "format")? != FORMAT {
        return Err(TrainError::Checkpoint(format!("{}: unknown format", dir.display())));
    }
    let config = read_model_config(&archive)?;
    let reference = expected.unwrap_or(&config);
    let (_, template) = Model::new(reference, 0)?;

    let mut offenders = Vec::new();
    let mut params = ParamStore::new();
    for id in template.ids() {
        let name = template.name(id);
        let want = template.get(id).shape();
        match archive.tensor(&format!("param/{name}")) {
            None => offenders.push(format!("{name} missing")),
            Some(t) if t.shape() != want => offenders.push(format!("{name} {:?} != {want:?}", t.shape())),
            Some(t) => {
                params.add(name, t.clone());
            }
        }
    }
    for (n, _) in &archive.tensors {
        if let Some(name) = n.strip_prefix("param/") {
            if template.find(name).is_none() {
                offenders.push(format!("{name} unexpected"));
            }
        }
    }
    if !offenders.is_empty() {
        return Err(TrainError::Checkpoint(format!(
            "shape mismatch with current config: {}",
            offenders.join(", ")
        )));
    }

    let optimizer = match archive.meta_value("adam_t") {
        None => None,
        Some(t) => {
            let t = t
                .parse()
                .map_err(|_| TrainError::Checkpoint(format!("bad adam_t `{t}`")))?;
            let mut opt = AdamW::new(&params);
            opt.t = t;
            for (label, buf) in [("adam_m", &mut opt.m), ("adam_v", &mut opt.v)] {
                for id in params.ids() {
                    let name = params.name(id);
                    let t = archive
                        .tensor(&format!("{label}/{name}"))
                        .filter(|t| t.shape() == params.get(id).shape())
                        .ok_or_else(|| TrainError::Checkpoint(format!("{label}/{name} missing or misshapen")))?;
                    buf[id.index()] = t.data().to_vec();
                }
            }
            Some(opt)
        }
    };
    let vocab_text: String = meta(&archive, "vocab")?
        .split(' ')
        .flat_map(|t| [t, "\n"])
        .collect();
    let vocab = Vocab::from_text(&vocab_text)?;
    if vocab.len() != config.vocab_size {
        return Err(TrainError::Checkpoint(format!(
            "vocabulary has {} tokens, model expects {}",
            vocab.len(),
            config.vocab_size
        )));
    }
    let running_total = match archive.meta_value("running_total") {
        Some(_) => Some(meta_bits(&archive, "running_total")?),
        None => None,
    };
    Ok(Checkpoint {
        step: meta_usize(&archive, "step")? as u64,
        seed: meta(&archive, "seed")?
            .parse()
            .map_err(|_| TrainError::Checkpoint("bad seed".into()))?,
        model: config,
        vocab,
        params,
        optimizer,
        running_total,
    })
}
