// SPDX-License-Identifier: MIT OR Apache-2.0

//! Named parameter storage, seeded initialisation and the SQAT file format.
//!
//! File layout: the magic bytes `SQAT`, a little-endian `u32` format version,
//! a little-endian `u64` manifest length, the UTF-8 JSON manifest, then the
//! raw little-endian `f32` payload. Manifest offsets are byte offsets into the
//! payload.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{parameter_layout, ModelConfig};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::BoxMuller;

pub const MAGIC: &[u8; 4] = b"SQAT";
pub const FORMAT_VERSION: u32 = 1;
pub const INIT_STD: f64 = 0.02;

/// Parameters in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl Weights {
    fn from_pairs(pairs: Vec<(String, Tensor)>) -> Self {
        let index = pairs.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect();
        let (names, tensors) = pairs.into_iter().unzip();
        Self { names, tensors, index }
    }

    /// Draws every parameter from N(0, 0.02²) in manifest order using one
    /// Box–Muller stream seeded by `config.seed`. Layer-norm gains are
    /// centred on 1. Values are rounded to f32 so a save/load cycle is exact.
    pub fn init(config: &ModelConfig) -> Self {
        let mut normal = BoxMuller::new(config.seed);
        let pairs = parameter_layout(config)
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let offset = if name.ends_with(".gain") { 1.0 } else { 0.0 };
                let data = (0..n)
                    .map(|_| f64::from((offset + INIT_STD * normal.next_normal()) as f32))
                    .collect();
                (name, Tensor::from_parts(shape, data))
            })
            .collect();
        Self::from_pairs(pairs)
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let i = self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"));
        &self.tensors[*i]
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    /// Replaces a parameter, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::Config(format!("no parameter named {name}")))?;
        if self.tensors[i].shape() != value.shape() {
            return Err(Error::shape(
                "set_weight",
                format!("{name} has shape {:?}, got {:?}", self.tensors[i].shape(), value.shape()),
            ));
        }
        self.tensors[i] = value;
        Ok(())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Little-endian f32 payload as written to disk.
    pub fn payload(&self) -> Vec<u8> {
        let total: usize = self.tensors.iter().map(Tensor::numel).sum();
        let mut out = Vec::with_capacity(total * 4);
        for t in &self.tensors {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    /// Hex SHA-256 of the payload.
    pub fn payload_sha256(&self) -> String {
        hex::encode(Sha256::digest(self.payload()))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    name: String,
    config: ModelConfig,
    vocab: Vec<String>,
    tensors: Vec<TensorEntry>,
}

/// Everything stored in a weight file.
#[derive(Debug)]
pub(crate) struct WeightFile {
    pub name: String,
    pub config: ModelConfig,
    pub vocab: Vec<String>,
    pub weights: Weights,
}

pub(crate) fn encode(name: &str, config: &ModelConfig, vocab: &[String], weights: &Weights) -> Vec<u8> {
    let mut offset = 0u64;
    let tensors = weights
        .iter()
        .map(|(n, t)| {
            let entry = TensorEntry {
                name: n.to_string(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += 4 * t.numel() as u64;
            entry
        })
        .collect();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        name: name.to_string(),
        config: config.clone(),
        vocab: vocab.to_vec(),
        tensors,
    };
    let header = serde_json::to_vec(&manifest).expect("manifest serialises");
    let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&weights.payload());
    out
}

pub(crate) fn decode(bytes: &[u8]) -> Result<WeightFile> {
    let bad = |msg: &str| Error::WeightFormat(msg.to_string());
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("missing SQAT magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version.to_string(),
            expected: FORMAT_VERSION.to_string(),
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| bad("manifest length exceeds file size"))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| Error::WeightFormat(format!("malformed manifest: {e}")))?;
    if manifest.format_version != version {
        return Err(Error::Version {
            found: manifest.format_version.to_string(),
            expected: FORMAT_VERSION.to_string(),
        });
    }
    manifest.config.validate()?;
    if manifest.vocab.len() != manifest.config.vocab_size {
        return Err(Error::WeightFormat(format!(
            "vocabulary has {} entries but vocab_size is {}",
            manifest.vocab.len(),
            manifest.config.vocab_size
        )));
    }

    let layout = parameter_layout(&manifest.config);
    if layout.len() != manifest.tensors.len() {
        return Err(Error::WeightFormat(format!(
            "expected {} tensors, manifest lists {}",
            layout.len(),
            manifest.tensors.len()
        )));
    }
    let payload = &bytes[header_end..];
    let mut expected_offset = 0u64;
    let mut pairs = Vec::with_capacity(layout.len());
    for ((name, shape), entry) in layout.into_iter().zip(&manifest.tensors) {
        if entry.name != name || entry.shape != shape {
            return Err(Error::WeightFormat(format!(
                "tensor {:?} {:?} does not match expected {name:?} {shape:?}",
                entry.name, entry.shape
            )));
        }
        if entry.offset != expected_offset {
            return Err(Error::WeightFormat(format!(
                "tensor {name} at offset {} overlaps or leaves a gap (expected {expected_offset})",
                entry.offset
            )));
        }
        let n: usize = shape.iter().product();
        let start = entry.offset as usize;
        let end = start + 4 * n;
        if end > payload.len() {
            return Err(Error::WeightFormat(format!(
                "payload truncated: tensor {name} needs bytes {start}..{end}, payload has {}",
                payload.len()
            )));
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|_| bad("non-finite weight value"))?;
        pairs.push((name, tensor));
        expected_offset = end as u64;
    }
    if payload.len() as u64 != expected_offset {
        return Err(Error::WeightFormat(format!(
            "payload has {} trailing bytes",
            payload.len() as u64 - expected_offset
        )));
    }
    Ok(WeightFile {
        name: manifest.name,
        config: manifest.config,
        vocab: manifest.vocab,
        weights: Weights::from_pairs(pairs),
    })
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let cfg = ModelConfig::decoder_only(16);
        assert_eq!(Weights::init(&cfg).payload(), Weights::init(&cfg).payload());
        let a = Weights::init(&ModelConfig { seed: 1, ..cfg.clone() });
        let b = Weights::init(&ModelConfig { seed: 2, ..cfg });
        assert_ne!(a.payload(), b.payload());
    }

    #[test]
    fn init_moments_are_plausible() {
        let w = Weights::init(&ModelConfig::decoder_only(64));
        let t = w.get("embed.tokens");
        let n = t.numel() as f64;
        let mean = t.sum() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.003, "{mean}");
        assert!((var.sqrt() - INIT_STD).abs() < 0.002, "{}", var.sqrt());
    }

    #[test]
    fn encode_decode_is_exact() {
        let cfg = ModelConfig::encoder_decoder(12);
        let w = Weights::init(&cfg);
        let bytes = encode("toy", &cfg, &vocab(12), &w);
        let file = decode(&bytes).unwrap();
        assert_eq!(file.weights, w);
        assert_eq!(file.config, cfg);
        assert_eq!(file.name, "toy");
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let cfg = ModelConfig::decoder_only(12);
        let bytes = encode("toy", &cfg, &vocab(12), &Weights::init(&cfg));
        let err = decode(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::WeightFormat(ref m) if m.contains("truncated")), "{err}");
    }

    #[test]
    fn unknown_version_is_rejected() {
        let cfg = ModelConfig::decoder_only(12);
        let mut bytes = encode("toy", &cfg, &vocab(12), &Weights::init(&cfg));
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::Version { .. })));
    }

    #[test]
    fn bad_magic_and_garbage_manifest_are_rejected() {
        assert!(decode(b"NOPE").is_err());
        let mut bytes = b"SQAT".to_vec();
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&3u64.to_le_bytes());
        bytes.extend_from_slice(b"{x}");
        assert!(matches!(decode(&bytes), Err(Error::WeightFormat(_))));
    }

    #[test]
    fn set_checks_shape() {
        let mut w = Weights::init(&ModelConfig::decoder_only(12));
        assert!(w.set("lm_head.bias", Tensor::zeros(&[3])).is_err());
        assert!(w.set("nope", Tensor::zeros(&[3])).is_err());
        w.set("lm_head.bias", Tensor::zeros(&[12])).unwrap();
        assert_eq!(w.get("lm_head.bias").sum(), 0.0);
    }
}
