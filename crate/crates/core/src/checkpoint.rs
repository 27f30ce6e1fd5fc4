//! Checkpoint container: named tensors plus a small metadata map.
//!
//! Layout of a checkpoint file:
//!
//! ```text
//! 8 bytes   magic "PRFCKPT1"
//! 8 bytes   manifest length, u64 little-endian
//! ...       manifest JSON (kind, tensor names/shapes, metadata)
//! ...       tensor payloads, row-major f64 little-endian, in manifest order
//! ```
//!
//! Values are stored as 64-bit regardless of the in-memory scalar type;
//! widening `f32 -> f64` is exact, so save/load round-trips bit-exactly in
//! both precisions. Writes go to a sibling temp file first and are renamed
//! into place, so a crash never leaves a half-written checkpoint behind.

use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"PRFCKPT1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic): {path}")]
    BadMagic { path: String },
    #[error("malformed checkpoint manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("tensor `{name}` declares shape {shape:?} ({expect} values) but payload has {got}")]
    ShapeMismatch { name: String, shape: Vec<usize>, expect: usize, got: usize },
    #[error("checkpoint payload truncated: wanted {want} bytes, file had {got}")]
    Truncated { want: usize, got: usize },
    #[error("checkpoint is `{got}` but `{want}` was expected")]
    WrongKind { want: String, got: String },
    #[error("checkpoint metadata is missing key `{0}`")]
    MissingMeta(String),
}

pub type CkptResult<T> = Result<T, CheckpointError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestTensor {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    kind: String,
    tensors: Vec<ManifestTensor>,
    meta: serde_json::Map<String, serde_json::Value>,
}

/// One named row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: &str, shape: Vec<usize>, data: Vec<f64>) -> Self {
        Tensor { name: name.to_string(), shape, data }
    }
}

/// In-memory checkpoint: a kind tag (`"policy"` or `"aux"`), tensors in a
/// fixed order, and scalar metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub tensors: Vec<Tensor>,
    pub meta: serde_json::Map<String, serde_json::Value>,
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Checkpoint { kind: kind.to_string(), tensors: Vec::new(), meta: serde_json::Map::new() }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require_kind(&self, want: &str) -> CkptResult<()> {
        if self.kind == want {
            Ok(())
        } else {
            Err(CheckpointError::WrongKind { want: want.to_string(), got: self.kind.clone() })
        }
    }

    pub fn meta_f64(&self, key: &str) -> CkptResult<f64> {
        self.meta
            .get(key)
            .and_then(|v| v.as_f64())
            .ok_or_else(|| CheckpointError::MissingMeta(key.to_string()))
    }

    pub fn meta_usize(&self, key: &str) -> CkptResult<usize> {
        self.meta
            .get(key)
            .and_then(|v| v.as_u64())
            .map(|v| v as usize)
            .ok_or_else(|| CheckpointError::MissingMeta(key.to_string()))
    }

    pub fn meta_str(&self, key: &str) -> CkptResult<&str> {
        self.meta
            .get(key)
            .and_then(|v| v.as_str())
            .ok_or_else(|| CheckpointError::MissingMeta(key.to_string()))
    }

    /// Serialize to `path` atomically (temp file + rename).
    pub fn save(&self, path: &Path) -> CkptResult<()> {
        for t in &self.tensors {
            let expect: usize = t.shape.iter().product();
            if expect != t.data.len() {
                return Err(CheckpointError::ShapeMismatch {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    expect,
                    got: t.data.len(),
                });
            }
        }
        let manifest = Manifest {
            kind: self.kind.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| ManifestTensor { name: t.name.clone(), shape: t.shape.clone() })
                .collect(),
            meta: self.meta.clone(),
        };
        let mjson = serde_json::to_vec(&manifest)?;
        let mut buf =
            Vec::with_capacity(16 + mjson.len() + 8 * self.tensors.iter().map(|t| t.data.len()).sum::<usize>());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(mjson.len() as u64).to_le_bytes());
        buf.extend_from_slice(&mjson);
        for t in &self.tensors {
            for &v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let tmp = path.with_extension("ckpt.tmp");
        let io = |source| CheckpointError::Io { path: path.display().to_string(), source };
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(&buf).map_err(io)?;
        f.sync_all().map_err(io)?;
        drop(f);
        fs::rename(&tmp, path).map_err(io)?;
        Ok(())
    }

    pub fn load(path: &Path) -> CkptResult<Self> {
        let io = |source| CheckpointError::Io { path: path.display().to_string(), source };
        let mut f = fs::File::open(path).map_err(io)?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes).map_err(io)?;
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic { path: path.display().to_string() });
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if bytes.len() < 16 + mlen {
            return Err(CheckpointError::Truncated { want: 16 + mlen, got: bytes.len() });
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + mlen])?;
        let mut offset = 16 + mlen;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for mt in &manifest.tensors {
            let n: usize = mt.shape.iter().product();
            let end = offset + 8 * n;
            if bytes.len() < end {
                return Err(CheckpointError::Truncated { want: end, got: bytes.len() });
            }
            let mut data = Vec::with_capacity(n);
            for chunk in bytes[offset..end].chunks_exact(8) {
                data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
            offset = end;
            tensors.push(Tensor { name: mt.name.clone(), shape: mt.shape.clone(), data });
        }
        Ok(Checkpoint { kind: manifest.kind, tensors, meta: manifest.meta })
    }
}
