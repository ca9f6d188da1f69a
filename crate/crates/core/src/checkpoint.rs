//! Checkpoint container: a raw little-endian `f32` (or `f64`) blob plus a JSON
//! sidecar describing it.
//!
//! `<base>.bin` holds the tensors back to back; `<base>.json` records the
//! tensor names and lengths, the backbone id, the hash of the config that
//! produced the weights, and the SHA-256 of the blob. Loading fails if the
//! blob does not match its recorded hash.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub format_version: u32,
    #[serde(default = "default_dtype")]
    pub dtype: String,
    pub kind: String,
    pub backbone: String,
    pub config_hash: String,
    pub content_hash: String,
    pub tensors: Vec<TensorInfo>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn default_dtype() -> String {
    "f32".into()
}

/// Element types a blob can hold.
pub trait Element: Copy {
    const DTYPE: &'static str;
    const SIZE: usize;
    fn put(self, out: &mut Vec<u8>);
    fn take(b: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: &'static str = "f32";
    const SIZE: usize = 4;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn take(b: &[u8]) -> Self {
        f32::from_le_bytes(b.try_into().expect("4 bytes"))
    }
}

impl Element for f64 {
    const DTYPE: &'static str = "f64";
    const SIZE: usize = 8;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn take(b: &[u8]) -> Self {
        f64::from_le_bytes(b.try_into().expect("8 bytes"))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Short stable hash of any serializable value.
pub fn hash_of<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config values serialize");
    sha256_hex(&bytes)[..16].to_string()
}

fn paths(base: &Path) -> (PathBuf, PathBuf) {
    (base.with_extension("bin"), base.with_extension("json"))
}

pub fn encode<T: Element>(tensors: &[(&str, &[T])]) -> (Vec<u8>, Vec<TensorInfo>) {
    let total: usize = tensors.iter().map(|(_, t)| t.len()).sum();
    let mut blob = Vec::with_capacity(total * T::SIZE);
    let mut infos = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        for &v in *t {
            v.put(&mut blob);
        }
        infos.push(TensorInfo {
            name: (*name).to_string(),
            len: t.len(),
        });
    }
    (blob, infos)
}

pub fn write<T: Element>(
    base: &Path,
    kind: &str,
    backbone: &str,
    config_hash: &str,
    tensors: &[(&str, &[T])],
    meta: serde_json::Value,
) -> Result<Sidecar> {
    let (bin, json) = paths(base);
    if let Some(dir) = base.parent() {
        fs::create_dir_all(dir)?;
    }
    let (blob, infos) = encode(tensors);
    let sidecar = Sidecar {
        format_version: FORMAT_VERSION,
        dtype: T::DTYPE.to_string(),
        kind: kind.to_string(),
        backbone: backbone.to_string(),
        config_hash: config_hash.to_string(),
        content_hash: sha256_hex(&blob),
        tensors: infos,
        meta,
    };
    fs::write(&bin, &blob)?;
    fs::write(&json, serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(sidecar)
}

pub fn read_sidecar(base: &Path) -> Result<Sidecar> {
    let (_, json) = paths(base);
    Ok(serde_json::from_slice(&fs::read(json)?)?)
}

/// Reads and verifies a checkpoint, returning its tensors in stored order.
pub fn read(base: &Path, expected_kind: &str) -> Result<(Sidecar, Vec<Vec<f32>>)> {
    read_typed(base, expected_kind)
}

pub fn read_typed<T: Element>(
    base: &Path,
    expected_kind: &str,
) -> Result<(Sidecar, Vec<Vec<T>>)> {
    let sidecar = read_sidecar(base)?;
    if sidecar.format_version != FORMAT_VERSION {
        return Err(Error::Validation(format!(
            "checkpoint format {} unsupported",
            sidecar.format_version
        )));
    }
    if sidecar.kind != expected_kind {
        return Err(Error::Validation(format!(
            "checkpoint {} holds a {}, expected {expected_kind}",
            base.display(),
            sidecar.kind
        )));
    }
    if sidecar.dtype != T::DTYPE {
        return Err(Error::Validation(format!(
            "checkpoint {} stores {}, expected {}",
            base.display(),
            sidecar.dtype,
            T::DTYPE
        )));
    }
    let (bin, _) = paths(base);
    let blob = fs::read(bin)?;
    let hash = sha256_hex(&blob);
    if hash != sidecar.content_hash {
        return Err(Error::Validation(format!(
            "checkpoint {} content hash mismatch",
            base.display()
        )));
    }
    let total: usize = sidecar.tensors.iter().map(|t| t.len).sum();
    if blob.len() != total * T::SIZE {
        return Err(Error::DimensionMismatch {
            expected: total * T::SIZE,
            found: blob.len(),
        });
    }
    let mut out = Vec::with_capacity(sidecar.tensors.len());
    let mut off = 0;
    for t in &sidecar.tensors {
        let v = blob[off..off + t.len * T::SIZE]
            .chunks_exact(T::SIZE)
            .map(T::take)
            .collect();
        off += t.len * T::SIZE;
        out.push(v);
    }
    Ok((sidecar, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_tamper_detection() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("ck/model");
        let a = [1.0f32, -2.5, 3.25];
        let b = [0.5f32];
        write(
            &base,
            "backbone",
            "compact_cnn",
            "abc",
            &[("a", &a), ("b", &b)],
            serde_json::json!({"iteration": 100}),
        )
        .unwrap();
        let (sc, t) = read(&base, "backbone").unwrap();
        assert_eq!(t, vec![a.to_vec(), b.to_vec()]);
        assert_eq!(sc.meta["iteration"], 100);
        assert!(read(&base, "aligner").is_err());

        let bin = base.with_extension("bin");
        let mut bytes = fs::read(&bin).unwrap();
        bytes[0] ^= 1;
        fs::write(&bin, bytes).unwrap();
        assert!(matches!(read(&base, "backbone"), Err(Error::Validation(_))));
    }
}
