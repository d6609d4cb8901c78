//! Versioned weight files.
//!
//! Layout: 8-byte magic `LVLINPW\0`, format version (u32 LE), header length
//! (u64 LE), a JSON header naming every tensor with its shape and the scalar
//! width, the little-endian tensor payload in header order, and a trailing
//! SHA-256 over header and payload.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::TileAlphabet;
use crate::models::{build, ModelConfig, ModelError, TrainConfig};
use crate::netcore::{Network, Tensor};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"LVLINPW\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("unsupported weight file version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt weight file: {0}")]
    CorruptFile(String),
    #[error("weights were trained for alphabet {stored} ({stored_depth} tiles), active alphabet is {active} ({active_depth} tiles)")]
    AlphabetMismatch {
        stored: String,
        stored_depth: usize,
        active: String,
        active_depth: usize,
    },
    #[error("weights hold {stored} values, requested {requested}")]
    ScalarMismatch { stored: String, requested: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalLosses {
    pub train: f64,
    pub validation: f64,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreMetadata {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    pub alphabet_hash: String,
    pub alphabet_depth: usize,
    #[serde(default)]
    pub corpus_hash: Option<String>,
    #[serde(default)]
    pub final_losses: Option<FinalLosses>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    scalar: String,
    scalar_bytes: usize,
    byte_order: String,
    tensors: Vec<TensorHeader>,
    metadata: StoreMetadata,
}

/// Named, shaped arrays plus the configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensorStore<T> {
    pub entries: Vec<(String, Tensor<T>)>,
    pub metadata: StoreMetadata,
}

impl<T: Scalar> NamedTensorStore<T> {
    pub fn from_network(net: &Network<T>, metadata: StoreMetadata) -> Self {
        Self {
            entries: net.named_params().into_iter().map(|(n, t)| (n, t.clone())).collect(),
            metadata,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            scalar: T::NAME.into(),
            scalar_bytes: T::BYTES,
            byte_order: "little".into(),
            tensors: self
                .entries
                .iter()
                .map(|(n, t)| TensorHeader {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            metadata: self.metadata.clone(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut body = Vec::new();
        for (_, t) in &self.entries {
            for &v in t.data() {
                v.write_le(&mut body);
            }
        }
        let mut out = Vec::with_capacity(20 + header.len() + body.len() + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&body);
        let mut h = Sha256::new();
        h.update(&header);
        h.update(&body);
        out.extend_from_slice(&h.finalize());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, StoreError> {
        let corrupt = |m: &str| StoreError::CorruptFile(m.to_owned());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(StoreError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let rest = &bytes[20..];
        if rest.len() < 32 || hlen > rest.len() - 32 {
            return Err(corrupt("truncated header"));
        }
        let (content, digest) = rest.split_at(rest.len() - 32);
        let (header_bytes, body) = content.split_at(hlen);
        let mut h = Sha256::new();
        h.update(header_bytes);
        h.update(body);
        if h.finalize().as_slice() != digest {
            return Err(corrupt("checksum mismatch (truncated or modified)"));
        }
        let header: Header =
            serde_json::from_slice(header_bytes).map_err(|e| StoreError::CorruptFile(format!("bad header: {e}")))?;
        if header.byte_order != "little" {
            return Err(corrupt("unsupported byte order"));
        }
        if header.scalar != T::NAME || header.scalar_bytes != T::BYTES {
            return Err(StoreError::ScalarMismatch {
                stored: header.scalar,
                requested: T::NAME.into(),
            });
        }
        let mut entries = Vec::with_capacity(header.tensors.len());
        let mut at = 0usize;
        for th in header.tensors {
            let n: usize = th.shape.iter().product();
            let end = at + n * T::BYTES;
            if end > body.len() {
                return Err(corrupt("payload shorter than header declares"));
            }
            let data: Vec<T> = body[at..end].chunks_exact(T::BYTES).map(T::read_le).collect();
            at = end;
            let t = Tensor::new(th.shape, data).map_err(|e| StoreError::CorruptFile(e.to_string()))?;
            entries.push((th.name, t));
        }
        if at != body.len() {
            return Err(corrupt("payload longer than header declares"));
        }
        Ok(Self {
            entries,
            metadata: header.metadata,
        })
    }

    /// Rebuilds the network, refusing weights trained for another alphabet.
    pub fn into_network(self, alphabet: &TileAlphabet) -> Result<Network<T>, StoreError> {
        if self.metadata.alphabet_hash != alphabet.hash() || self.metadata.alphabet_depth != alphabet.depth() {
            return Err(StoreError::AlphabetMismatch {
                stored: self.metadata.alphabet_hash.chars().take(12).collect(),
                stored_depth: self.metadata.alphabet_depth,
                active: alphabet.hash().chars().take(12).collect(),
                active_depth: alphabet.depth(),
            });
        }
        let mut net = build::<T>(&self.metadata.model)?;
        let expected = net.named_params().len();
        if expected != self.entries.len() {
            return Err(StoreError::CorruptFile(format!(
                "{} tensors stored, architecture has {expected}",
                self.entries.len()
            )));
        }
        for (name, t) in self.entries {
            net.set_named_param(&name, t)
                .map_err(|e| StoreError::CorruptFile(e.to_string()))?;
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Loads a network from `path` for use with `alphabet`.
pub fn load_network<T: Scalar>(path: &Path, alphabet: &TileAlphabet) -> Result<(Network<T>, StoreMetadata), StoreError> {
    let store = NamedTensorStore::<T>::load(path)?;
    let meta = store.metadata.clone();
    Ok((store.into_network(alphabet)?, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TileAlphabet;
    use crate::models::Architecture;

    fn meta(cfg: &ModelConfig, a: &TileAlphabet) -> StoreMetadata {
        StoreMetadata {
            model: cfg.clone(),
            train: None,
            alphabet_hash: a.hash(),
            alphabet_depth: a.depth(),
            corpus_hash: None,
            final_losses: None,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let a = TileAlphabet::smb();
        let cfg = ModelConfig::new(Architecture::Unet, 9);
        let net = build::<f32>(&cfg).unwrap();
        let bytes = NamedTensorStore::from_network(&net, meta(&cfg, &a)).to_bytes();
        let back = NamedTensorStore::<f32>::from_bytes(&bytes).unwrap().into_network(&a).unwrap();
        assert_eq!(back, net);
        let x = Tensor::<f32>::zeros(vec![1, 16, 16, 13]).map(|_| 0.5);
        let (y1, y2) = (net.forward(&x).unwrap(), back.forward(&x).unwrap());
        assert!(y1.data().iter().zip(y2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn truncation_and_tampering_detected() {
        let a = TileAlphabet::smb();
        let cfg = ModelConfig::new(Architecture::Autoencoder, 1);
        let net = build::<f32>(&cfg).unwrap();
        let bytes = NamedTensorStore::from_network(&net, meta(&cfg, &a)).to_bytes();
        for cut in [0, 10, 30, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                NamedTensorStore::<f32>::from_bytes(&bytes[..cut]),
                Err(StoreError::CorruptFile(_))
            ));
        }
        let mut flipped = bytes.clone();
        let mid = flipped.len() - 100;
        flipped[mid] ^= 1;
        assert!(matches!(
            NamedTensorStore::<f32>::from_bytes(&flipped),
            Err(StoreError::CorruptFile(_))
        ));
        let mut v2 = bytes;
        v2[8] = 2;
        assert!(matches!(
            NamedTensorStore::<f32>::from_bytes(&v2),
            Err(StoreError::VersionMismatch { found: 2, .. })
        ));
    }

    #[test]
    fn scalar_width_checked() {
        let a = TileAlphabet::smb();
        let cfg = ModelConfig::new(Architecture::Autoencoder, 1);
        let net = build::<f32>(&cfg).unwrap();
        let bytes = NamedTensorStore::from_network(&net, meta(&cfg, &a)).to_bytes();
        assert!(matches!(
            NamedTensorStore::<f64>::from_bytes(&bytes),
            Err(StoreError::ScalarMismatch { .. })
        ));
    }

    #[test]
    fn twelve_symbol_weights_rejected() {
        let a = TileAlphabet::smb();
        let mut tiles = a.entries().to_vec();
        tiles.pop();
        let small = TileAlphabet::new(12, tiles).unwrap();
        let mut cfg = ModelConfig::new(Architecture::Autoencoder, 1);
        cfg.ladder[0][2] = 12;
        let net = build::<f32>(&cfg).unwrap();
        let bytes = NamedTensorStore::from_network(&net, meta(&cfg, &small)).to_bytes();
        let store = NamedTensorStore::<f32>::from_bytes(&bytes).unwrap();
        assert!(matches!(store.into_network(&a), Err(StoreError::AlphabetMismatch { .. })));
    }
}
