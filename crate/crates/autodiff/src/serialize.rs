//! Tensor archives: a text manifest plus one blob of little-endian `f32`
//! values in row-major order.
//!
//! ```text
//! # step 120
//! encoder.patch_proj.w f32 [64,64] 0
//! encoder.patch_proj.b f32 [64] 16384
//! ```
//!
//! Lines starting with `#` carry `key value` metadata. Every other line is a
//! tensor entry `name dtype shape byte_offset`.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const BLOB_FILE: &str = "tensors.bin";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

impl ManifestEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> u64 {
        self.numel() as u64 * 4
    }

    pub fn parse(line: &str) -> Result<Self> {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [name, dtype, shape, offset] = parts.as_slice() else {
            return Err(AutodiffError::Manifest(format!("malformed entry `{line}`")));
        };
        if *dtype != "f32" {
            return Err(AutodiffError::Manifest(format!("unsupported dtype `{dtype}` for {name}")));
        }
        let inner = shape
            .strip_prefix('[')
            .and_then(|s| s.strip_suffix(']'))
            .ok_or_else(|| AutodiffError::Manifest(format!("bad shape `{shape}` for {name}")))?;
        let shape = if inner.is_empty() {
            Vec::new()
        } else {
            inner
                .split(',')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| AutodiffError::Manifest(format!("bad shape `{shape}` for {name}")))?
        };
        let offset = offset
            .parse()
            .map_err(|_| AutodiffError::Manifest(format!("bad offset `{offset}` for {name}")))?;
        Ok(Self {
            name: name.to_string(),
            dtype: dtype.to_string(),
            shape,
            offset,
        })
    }
}

impl fmt::Display for ManifestEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dims: Vec<String> = self.shape.iter().map(|d| d.to_string()).collect();
        write!(f, "{} {} [{}] {}", self.name, self.dtype, dims.join(","), self.offset)
    }
}

/// Parsed archive contents, in file order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Archive {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Archive {
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn encode_f32_le(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_f32_le(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Render manifest text and blob bytes for `archive`.
pub fn encode_archive(archive: &Archive) -> Result<(String, Vec<u8>)> {
    let mut manifest = String::new();
    for (k, v) in &archive.meta {
        if k.contains(char::is_whitespace) || v.contains('\n') {
            return Err(AutodiffError::Manifest(format!("metadata `{k}` not representable")));
        }
        manifest.push_str(&format!("# {k} {v}\n"));
    }
    let mut blob = Vec::new();
    for (name, t) in &archive.tensors {
        if name.is_empty() || name.contains(char::is_whitespace) || name.starts_with('#') {
            return Err(AutodiffError::Manifest(format!("tensor name `{name}` not representable")));
        }
        let entry = ManifestEntry {
            name: name.clone(),
            dtype: "f32".into(),
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
        };
        manifest.push_str(&entry.to_string());
        manifest.push('\n');
        blob.extend(encode_f32_le(t.data()));
    }
    Ok((manifest, blob))
}

pub fn decode_archive(manifest: &str, blob: &[u8]) -> Result<Archive> {
    let mut archive = Archive::default();
    for line in manifest.lines().filter(|l| !l.trim().is_empty()) {
        if let Some(meta) = line.strip_prefix('#') {
            let meta = meta.trim();
            let (k, v) = meta.split_once(' ').unwrap_or((meta, ""));
            archive.meta.push((k.to_string(), v.to_string()));
            continue;
        }
        let entry = ManifestEntry::parse(line)?;
        let end = entry.offset + entry.byte_len();
        if end > blob.len() as u64 {
            return Err(AutodiffError::Manifest(format!(
                "blob truncated: {} needs bytes {}..{end}, blob has {}",
                entry.name,
                entry.offset,
                blob.len()
            )));
        }
        let values = decode_f32_le(&blob[entry.offset as usize..end as usize]);
        let tensor = Tensor::new(entry.shape.clone(), values)
            .map_err(|e| AutodiffError::Manifest(format!("{}: {e}", entry.name)))?;
        archive.tensors.push((entry.name, tensor));
    }
    Ok(archive)
}

/// Write `archive` into directory `dir` atomically: files are staged in a
/// sibling temporary directory which is then renamed over `dir`.
pub fn write_archive(dir: &Path, archive: &Archive) -> Result<()> {
    let (manifest, blob) = encode_archive(archive)?;
    let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let name = dir
        .file_name()
        .ok_or_else(|| AutodiffError::Manifest(format!("invalid archive path {}", dir.display())))?;
    let staging = parent.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    fs::create_dir_all(&staging)?;
    let mut f = fs::File::create(staging.join(MANIFEST_FILE))?;
    f.write_all(manifest.as_bytes())?;
    f.sync_all()?;
    let mut f = fs::File::create(staging.join(BLOB_FILE))?;
    f.write_all(&blob)?;
    f.sync_all()?;
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&staging, dir)?;
    Ok(())
}

pub fn read_archive(dir: &Path) -> Result<Archive> {
    let manifest = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let blob = fs::read(dir.join(BLOB_FILE))?;
    decode_archive(&manifest, &blob)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entry_display_parses_back() {
        let e = ManifestEntry {
            name: "decoder.head.w".into(),
            dtype: "f32".into(),
            shape: vec![64, 3],
            offset: 1024,
        };
        assert_eq!(e.to_string(), "decoder.head.w f32 [64,3] 1024");
        assert_eq!(ManifestEntry::parse(&e.to_string()).unwrap(), e);
    }

    #[test]
    fn scalar_shape_round_trips() {
        let e = ManifestEntry::parse("x f32 [] 0").unwrap();
        assert!(e.shape.is_empty());
        assert_eq!(e.numel(), 1);
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let archive = Archive {
            meta: vec![("step".into(), "3".into())],
            tensors: vec![("w".into(), Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap())],
        };
        let (manifest, blob) = encode_archive(&archive).unwrap();
        assert_eq!(decode_archive(&manifest, &blob).unwrap(), archive);
        let err = decode_archive(&manifest, &blob[..10]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn little_endian_layout() {
        assert_eq!(encode_f32_le(&[1.0]), vec![0x00, 0x00, 0x80, 0x3f]);
    }
}
