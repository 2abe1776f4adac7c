//! Synthetic paired image/report corpus with known lesion geometry.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{write_corpus, CorpusError, Report};
use crate::rng::{derive_rng, STREAM_SYNTH};

pub const SEVERITY_WORDS: [&str; 3] = ["mild", "moderate", "severe"];
pub const SEVERITY_INTENSITY: [f32; 3] = [0.4, 0.65, 0.9];
const BACKGROUND_MAX: f32 = 0.3;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("image side {0} is not even")]
    OddSide(usize),
    #[error("invalid synth spec: {0}")]
    Spec(String),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> SynthError {
    SynthError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Disk,
    Bar,
    Ring,
    Blob,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Absent,
    Present,
    /// Not asserted either way by the report.
    Uncertain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// High-resolution side; the low-resolution image is half of it.
    pub canvas: usize,
    pub entity_vocab: Vec<(String, Shape)>,
    pub p_positive: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            canvas: 64,
            entity_vocab: vec![
                ("nodule".into(), Shape::Disk),
                ("atelectasis".into(), Shape::Bar),
                ("granuloma".into(), Shape::Ring),
                ("pneumonia".into(), Shape::Blob),
            ],
            p_positive: 1.0 / 21.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if !(0.0..=1.0).contains(&self.p_positive) {
            return Err(SynthError::Spec(format!("p_positive {} outside [0, 1]", self.p_positive)));
        }
        if self.canvas < 16 || self.canvas % 2 != 0 {
            return Err(SynthError::Spec(format!("canvas {} must be even and at least 16", self.canvas)));
        }
        if self.entity_vocab.is_empty() {
            return Err(SynthError::Spec("entity_vocab is empty".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for (e, _) in &self.entity_vocab {
            if !seen.insert(e) {
                return Err(SynthError::Spec(format!("entity `{e}` listed twice")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSample {
    pub id: String,
    pub canvas: usize,
    /// `canvas x canvas`, row-major, values in [0, 1].
    pub image_high: Vec<f32>,
    /// `canvas/2 x canvas/2`.
    pub image_low: Vec<f32>,
    pub report_text: String,
    /// 0/1 values, `canvas x canvas`.
    pub lesion_mask: Vec<f32>,
    pub labels: BTreeMap<String, Label>,
}

impl SynthSample {
    pub fn report(&self) -> Report {
        Report {
            id: self.id.clone(),
            text: self.report_text.clone(),
            image_ref: self.id.clone(),
        }
    }

    pub fn present(&self, entity: &str) -> bool {
        self.labels.get(entity) == Some(&Label::Present)
    }
}

fn background<R: Rng + ?Sized>(side: usize, rng: &mut R) -> Vec<f32> {
    let waves: Vec<(f32, f32, f32, f32)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(0.2..1.0),
                rng.gen_range(0..3) as f32,
                rng.gen_range(0..3) as f32,
                rng.gen_range(0.0..std::f32::consts::TAU),
            )
        })
        .collect();
    let s = side as f32;
    let raw: Vec<f32> = (0..side * side)
        .map(|i| {
            let (y, x) = ((i / side) as f32, (i % side) as f32);
            waves
                .iter()
                .map(|&(a, fx, fy, ph)| a * (std::f32::consts::TAU * (fx * x + fy * y) / s + ph).cos())
                .sum()
        })
        .collect();
    let lo = raw.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = raw.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = (hi - lo).max(1e-6);
    raw.iter().map(|v| (v - lo) / span * BACKGROUND_MAX).collect()
}

fn shape_mask<R: Rng + ?Sized>(shape: Shape, side: usize, rng: &mut R) -> Vec<bool> {
    let r = rng.gen_range(side as f32 * 0.1..side as f32 * 0.16);
    let margin = r * 1.6;
    let cy = rng.gen_range(margin..side as f32 - margin);
    let cx = rng.gen_range(margin..side as f32 - margin);
    let vertical = rng.gen_bool(0.5);
    let lobes: Vec<(f32, f32)> = (0..3)
        .map(|_| (cy + rng.gen_range(-r..r) * 0.6, cx + rng.gen_range(-r..r) * 0.6))
        .collect();
    (0..side * side)
        .map(|i| {
            let (y, x) = ((i / side) as f32 + 0.5, (i % side) as f32 + 0.5);
            let d = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt();
            match shape {
                Shape::Disk => d <= r,
                Shape::Ring => d <= r && d >= r * 0.55,
                Shape::Bar => {
                    let (along, across) = if vertical { (y - cy, x - cx) } else { (x - cx, y - cy) };
                    along.abs() <= r * 1.5 && across.abs() <= r * 0.3
                }
                Shape::Blob => lobes
                    .iter()
                    .any(|&(ly, lx)| ((y - ly).powi(2) + (x - lx).powi(2)).sqrt() <= r * 0.6),
            }
        })
        .collect()
}

/// Every entity of `spec.entity_vocab` is mentioned once, in random order: present ones
/// as `there is {severity} {entity}.`, absent ones as `there is no {entity}.`.
pub fn gen_sample<R: Rng + ?Sized>(spec: &SynthSpec, id: &str, rng: &mut R) -> SynthSample {
    let side = spec.canvas;
    let mut image = background(side, rng);
    let mut mask = vec![0.0f32; side * side];
    let mut labels = BTreeMap::new();
    let mut sentences = Vec::new();
    for (entity, shape) in &spec.entity_vocab {
        if rng.gen_bool(spec.p_positive) {
            let sev = rng.gen_range(0..SEVERITY_WORDS.len());
            for (i, hit) in shape_mask(*shape, side, rng).into_iter().enumerate() {
                if hit {
                    image[i] = image[i].max(SEVERITY_INTENSITY[sev]);
                    mask[i] = 1.0;
                }
            }
            labels.insert(entity.clone(), Label::Present);
            sentences.push(format!("there is {} {entity}.", SEVERITY_WORDS[sev]));
        } else {
            labels.insert(entity.clone(), Label::Absent);
            sentences.push(format!("there is no {entity}."));
        }
    }
    sentences.shuffle(rng);
    let image_low = downsample(&image, side).expect("canvas validated even");
    SynthSample {
        id: id.to_string(),
        canvas: side,
        image_high: image,
        image_low,
        report_text: sentences.join(" "),
        lesion_mask: mask,
        labels,
    }
}

pub fn sample_id(i: usize) -> String {
    format!("s{i:06}")
}

/// Sample `i` draws from its own stream, so any prefix of a corpus is stable.
pub fn gen_corpus(spec: &SynthSpec, n: usize) -> Result<Vec<SynthSample>, SynthError> {
    spec.validate()?;
    Ok((0..n)
        .map(|i| gen_sample(spec, &sample_id(i), &mut derive_rng(spec.seed, &[STREAM_SYNTH, i as u64])))
        .collect())
}

/// 2x2 non-overlapping average pooling of a square image.
pub fn downsample(image: &[f32], side: usize) -> Result<Vec<f32>, SynthError> {
    if side % 2 != 0 {
        return Err(SynthError::OddSide(side));
    }
    assert_eq!(image.len(), side * side);
    let half = side / 2;
    Ok((0..half * half)
        .map(|i| {
            let (y, x) = (2 * (i / half), 2 * (i % half));
            (image[y * side + x] + image[y * side + x + 1] + image[(y + 1) * side + x] + image[(y + 1) * side + x + 1])
                / 4.0
        })
        .collect())
}

/// Lesion mask blurred with a 5x5 binomial kernel and rescaled to peak 1.
pub fn attention_map(lesion_mask: &[f32], side: usize) -> Vec<f32> {
    const K: [f32; 5] = [1.0, 4.0, 6.0, 4.0, 1.0];
    let blur = |src: &[f32], dy: usize, dx: usize| -> Vec<f32> {
        (0..side * side)
            .map(|i| {
                let (y, x) = ((i / side) as isize, (i % side) as isize);
                K.iter()
                    .enumerate()
                    .map(|(k, w)| {
                        let o = k as isize - 2;
                        let (yy, xx) = (y + o * dy as isize, x + o * dx as isize);
                        if (0..side as isize).contains(&yy) && (0..side as isize).contains(&xx) {
                            w / 16.0 * src[yy as usize * side + xx as usize]
                        } else {
                            0.0
                        }
                    })
                    .sum()
            })
            .collect()
    };
    let a = blur(&blur(lesion_mask, 0, 1), 1, 0);
    let peak = a.iter().copied().fold(0.0f32, f32::max);
    if peak > 0.0 {
        a.iter().map(|v| v / peak).collect()
    } else {
        vec![0.0; side * side]
    }
}

/// Source of the `A` weighting map for the super-resolution loss.
pub trait AttentionMapProvider {
    /// `canvas x canvas` map with values in [0, 1].
    fn attention_map(&self, sample: &SynthSample) -> Vec<f32>;
}

/// Uses the generator's lesion geometry.
pub struct GroundTruthAttention;

impl AttentionMapProvider for GroundTruthAttention {
    fn attention_map(&self, sample: &SynthSample) -> Vec<f32> {
        attention_map(&sample.lesion_mask, sample.canvas)
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    id: String,
    canvas: usize,
    image_high: String,
    image_low: String,
    lesion_mask: String,
    labels: BTreeMap<String, Label>,
}

fn write_f32(path: &Path, data: &[f32]) -> Result<(), SynthError> {
    fs::write(path, ecamp_autodiff::serialize::encode_f32_le(data)).map_err(|e| io_err(path, e))
}

fn read_f32(path: &Path, len: usize) -> Result<Vec<f32>, SynthError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() != 4 * len {
        return Err(io_err(path, format!("expected {} bytes, found {}", 4 * len, bytes.len())));
    }
    let data = ecamp_autodiff::serialize::decode_f32_le(&bytes);
    Ok(data)
}

/// Writes `reports.jsonl` (corpus format), `manifest.jsonl`, and raw
/// little-endian f32 images under `images/`.
pub fn write_synth_dir(dir: &Path, samples: &[SynthSample]) -> Result<(), SynthError> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| io_err(&img_dir, e))?;
    let manifest_path = dir.join("manifest.jsonl");
    let mut manifest = fs::File::create(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    for s in samples {
        let line = ManifestLine {
            id: s.id.clone(),
            canvas: s.canvas,
            image_high: format!("images/{}.high.f32", s.id),
            image_low: format!("images/{}.low.f32", s.id),
            lesion_mask: format!("images/{}.mask.f32", s.id),
            labels: s.labels.clone(),
        };
        write_f32(&dir.join(&line.image_high), &s.image_high)?;
        write_f32(&dir.join(&line.image_low), &s.image_low)?;
        write_f32(&dir.join(&line.lesion_mask), &s.lesion_mask)?;
        let text = serde_json::to_string(&line).expect("manifest line serializes");
        writeln!(manifest, "{text}").map_err(|e| io_err(&manifest_path, e))?;
    }
    let reports: Vec<Report> = samples.iter().map(SynthSample::report).collect();
    write_corpus(&dir.join("reports.jsonl"), &reports)?;
    Ok(())
}

pub fn read_synth_dir(dir: &Path) -> Result<Vec<SynthSample>, SynthError> {
    let manifest_path = dir.join("manifest.jsonl");
    let text = fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    let reports = crate::corpus::read_corpus(&dir.join("reports.jsonl"))?;
    let texts: BTreeMap<String, String> = reports.into_iter().map(|r| (r.image_ref, r.text)).collect();
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let m: ManifestLine =
            serde_json::from_str(line).map_err(|e| io_err(&manifest_path, format!("line {}: {e}", n + 1)))?;
        let side = m.canvas;
        let report_text = texts
            .get(&m.id)
            .cloned()
            .ok_or_else(|| io_err(&manifest_path, format!("no report for image `{}`", m.id)))?;
        out.push(SynthSample {
            image_high: read_f32(&dir.join(&m.image_high), side * side)?,
            image_low: read_f32(&dir.join(&m.image_low), side * side / 4)?,
            lesion_mask: read_f32(&dir.join(&m.lesion_mask), side * side)?,
            id: m.id,
            canvas: side,
            report_text,
            labels: m.labels,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_positives_means_no_lesions() {
        let spec = SynthSpec {
            p_positive: 0.0,
            ..Default::default()
        };
        for s in gen_corpus(&spec, 20).unwrap() {
            assert!(s.lesion_mask.iter().all(|&v| v == 0.0));
            assert!(s.labels.values().all(|&l| l == Label::Absent));
            assert_eq!(s.report_text.matches("there is no").count(), 4);
        }
    }

    #[test]
    fn mask_matches_report() {
        let spec = SynthSpec {
            p_positive: 0.5,
            ..Default::default()
        };
        for s in gen_corpus(&spec, 50).unwrap() {
            let any = s.labels.values().any(|&l| l == Label::Present);
            assert_eq!(any, s.lesion_mask.iter().any(|&v| v > 0.0));
            assert!(s.image_high.iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(s.image_low, downsample(&s.image_high, 64).unwrap());
            for (e, l) in &s.labels {
                assert_eq!(*l == Label::Absent, s.report_text.contains(&format!("no {e}.")));
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = SynthSpec::default();
        assert_eq!(gen_corpus(&spec, 3).unwrap(), gen_corpus(&spec, 3).unwrap());
        let other = SynthSpec { seed: 1, ..spec.clone() };
        assert_ne!(gen_corpus(&spec, 3).unwrap(), gen_corpus(&other, 3).unwrap());
    }

    #[test]
    fn downsample_cases() {
        assert!(downsample(&[0.7; 16], 4).unwrap().iter().all(|&v| v == 0.7));
        let checker: Vec<f32> = (0..16).map(|i| ((i / 4 + i % 4) % 2) as f32).collect();
        assert_eq!(downsample(&checker, 4).unwrap(), vec![0.5; 4]);
        assert!(matches!(downsample(&[0.0; 9], 3), Err(SynthError::OddSide(3))));
    }

    #[test]
    fn attention_map_peaks_at_a_single_pixel() {
        let mut m = vec![0.0; 15 * 15];
        m[7 * 15 + 7] = 1.0;
        let a = attention_map(&m, 15);
        assert_eq!(a[7 * 15 + 7], 1.0);
        assert_eq!(a[7 * 15 + 5], a[7 * 15 + 9]);
        assert_eq!(a[5 * 15 + 7], a[7 * 15 + 5]);
        assert_eq!(a[7 * 15 + 4], 0.0);
        assert!(attention_map(&[0.0; 25], 5).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn synth_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = gen_corpus(&SynthSpec::default(), 4).unwrap();
        write_synth_dir(dir.path(), &samples).unwrap();
        assert_eq!(read_synth_dir(dir.path()).unwrap(), samples);
    }
}
