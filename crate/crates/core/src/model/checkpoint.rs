//! Versioned checkpoint container.
//!
//! Layout: 8-byte magic, u32 format version, u64 manifest length, a JSON
//! manifest (config plus tensor names/shapes/dtype), then raw little-endian
//! f64 payloads in manifest order. Reading is strict — lengths, shapes, and
//! dtype are validated before any allocation sized from the input — and
//! round-trips bit-exactly.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, ArrayViewD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Parameters};

const MAGIC: &[u8; 8] = b"BRNKCKPT";
const VERSION: u32 = 1;
/// Manifests beyond this are rejected before allocation.
const MAX_MANIFEST_LEN: u64 = 16 * 1024 * 1024;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint<W: Write>(
    mut w: W,
    cfg: &ModelConfig,
    tensors: &[(String, ArrayViewD<'_, f64>)],
) -> Result<()> {
    let manifest = Manifest {
        config: cfg.clone(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f64".into(),
            })
            .collect(),
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&manifest_bytes)?;
    for (_, t) in tensors {
        // Row-major order; views over standard-layout tensors iterate that way.
        for v in t.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn checkpoint_bytes(
    cfg: &ModelConfig,
    tensors: &[(String, ArrayViewD<'_, f64>)],
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_checkpoint(&mut out, cfg, tensors)?;
    Ok(out)
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Parses a checkpoint from bytes. Safe on untrusted input: every length is
/// bounds-checked and shape products use checked arithmetic.
pub fn read_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, Vec<(String, ArrayD<f64>)>)> {
    if bytes.len() < 20 {
        return Err(bad("truncated header"));
    }
    if &bytes[0..8] != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let manifest_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    if manifest_len > MAX_MANIFEST_LEN {
        return Err(bad("manifest length exceeds limit"));
    }
    let manifest_end = 20usize
        .checked_add(manifest_len as usize)
        .ok_or_else(|| bad("manifest length overflow"))?;
    if bytes.len() < manifest_end {
        return Err(bad("truncated manifest"));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[20..manifest_end])?;

    let mut expected_values = 0usize;
    let mut shapes = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        if entry.dtype != "f64" {
            return Err(bad(format!("unsupported dtype {:?}", entry.dtype)));
        }
        let count = entry
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| bad("tensor shape overflow"))?;
        expected_values = expected_values
            .checked_add(count)
            .ok_or_else(|| bad("payload size overflow"))?;
        shapes.push(count);
    }
    let payload = &bytes[manifest_end..];
    let expected_bytes = expected_values
        .checked_mul(8)
        .ok_or_else(|| bad("payload size overflow"))?;
    if payload.len() != expected_bytes {
        return Err(bad(format!(
            "payload length {} does not match manifest ({expected_bytes})",
            payload.len()
        )));
    }

    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    let mut offset = 0usize;
    for (entry, count) in manifest.tensors.into_iter().zip(shapes) {
        let mut values = Vec::with_capacity(count);
        for i in 0..count {
            let at = offset + i * 8;
            values.push(f64::from_le_bytes(payload[at..at + 8].try_into().unwrap()));
        }
        offset += count * 8;
        let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), values)
            .map_err(|e| bad(format!("tensor {}: {e}", entry.name)))?;
        tensors.push((entry.name, arr));
    }
    Ok((manifest.config, tensors))
}

/// Rebuilds [`Parameters`] from named tensors, enforcing the full expected
/// tensor set and shapes. Extra tensors (e.g. optimizer state) are ignored.
pub fn params_from_tensors(
    cfg: &ModelConfig,
    tensors: &[(String, ArrayD<f64>)],
) -> Result<Parameters> {
    let map: HashMap<&str, &ArrayD<f64>> =
        tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let mut params = Parameters::zeros(cfg);
    for (name, mut view) in params.named_tensors_mut() {
        let src = map
            .get(name.as_str())
            .ok_or_else(|| bad(format!("missing tensor {name}")))?;
        if src.shape() != view.shape() {
            return Err(bad(format!(
                "tensor {name}: shape {:?} does not match expected {:?}",
                src.shape(),
                view.shape()
            )));
        }
        view.assign(src);
    }
    Ok(params)
}

pub fn save_model<P: AsRef<Path>>(path: P, cfg: &ModelConfig, params: &Parameters) -> Result<()> {
    let bytes = checkpoint_bytes(cfg, &params.named_tensors())?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_model<P: AsRef<Path>>(path: P) -> Result<(ModelConfig, Parameters)> {
    let bytes = fs::read(path)?;
    let (cfg, tensors) = read_checkpoint(&bytes)?;
    cfg.validate()
        .map_err(|e| bad(format!("invalid config in checkpoint: {e}")))?;
    let params = params_from_tensors(&cfg, &tensors)?;
    Ok((cfg, params))
}

/// Hex SHA-256 of a byte payload (checkpoint integrity digests).
pub fn content_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AttentionMode;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            n_heads: 1,
            d_model: 8,
            head_dim: 8,
            vocab_size: 12,
            mlp_hidden: 16,
            rotary_base: 10_000.0,
            max_position: 9000,
            attention_mode: AttentionMode::Blockwise,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = cfg();
        let params = Parameters::init(&cfg, 9);
        let bytes = checkpoint_bytes(&cfg, &params.named_tensors()).unwrap();
        let (cfg2, tensors) = read_checkpoint(&bytes).unwrap();
        let params2 = params_from_tensors(&cfg2, &tensors).unwrap();
        assert_eq!(params, params2);
        let bytes2 = checkpoint_bytes(&cfg2, &params2.named_tensors()).unwrap();
        assert_eq!(bytes, bytes2, "byte-identical re-serialization");
    }

    #[test]
    fn truncated_and_corrupt_inputs_are_rejected() {
        let cfg = cfg();
        let params = Parameters::init(&cfg, 0);
        let bytes = checkpoint_bytes(&cfg, &params.named_tensors()).unwrap();
        assert!(read_checkpoint(&bytes[..10]).is_err());
        assert!(read_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(read_checkpoint(&wrong_magic).is_err());
        // Oversized manifest length must fail before any big allocation.
        let mut huge = bytes.clone();
        huge[12..20].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(read_checkpoint(&huge).is_err());
    }

    #[test]
    fn digest_is_stable_and_content_sensitive() {
        let a = content_digest(b"abc");
        assert_eq!(a.len(), 64);
        assert_eq!(a, content_digest(b"abc"));
        assert_ne!(a, content_digest(b"abd"));
    }
}
