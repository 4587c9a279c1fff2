//! Versioned little-endian checkpoint files.
//!
//! Layout: magic, format version, backbone spec as JSON, training step, RNG
//! state, config hash, a parameter index of (name, shape, offset) entries, one
//! contiguous f64 blob, and a trailing SHA-256 over every preceding byte. The
//! checksum is what makes a truncated or partially written file fail to load.

use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::models::{build_backbone, Backbone, BackboneSpec, ParamStore};
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"TDCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint not found: {}", .0.display())]
    Missing(PathBuf),
    #[error("i/o error on {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("corrupt checkpoint {}: {detail}", path.display())]
    Format { path: PathBuf, detail: String },
    #[error("checkpoint {} has format version {found}, expected {FORMAT_VERSION}", path.display())]
    Version { path: PathBuf, found: u32 },
    #[error("checkpoint does not match configuration: {0}")]
    Mismatch(String),
}

/// Snapshot of a ChaCha8 stream position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: BackboneSpec,
    pub params: ParamStore,
    pub step: u64,
    pub rng: RngState,
    pub config_hash: [u8; 32],
}

impl Checkpoint {
    pub fn from_backbone(backbone: &Backbone, step: u64, rng: RngState, config_hash: [u8; 32]) -> Self {
        Self { spec: backbone.spec.clone(), params: backbone.params.clone(), step, rng, config_hash }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let spec = serde_json::to_vec(&self.spec).expect("spec serializes");
        out.extend_from_slice(&(spec.len() as u32).to_le_bytes());
        out.extend_from_slice(&spec);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for p in self.params.iter() {
            out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(p.tensor.shape().len() as u8);
            for &d in p.tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += p.tensor.numel() as u64;
        }
        out.extend_from_slice(&offset.to_le_bytes());
        for p in self.params.iter() {
            for v in p.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, CheckpointError> {
        let corrupt = |detail: &str| CheckpointError::Format { path: path.to_path_buf(), detail: detail.to_string() };
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic or too short"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version { path: path.to_path_buf(), found: version });
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch (truncated or modified)"));
        }

        let mut r = Reader { buf: body, pos: 12 };
        let spec_len = r.u32().ok_or_else(|| corrupt("spec length"))? as usize;
        let spec: BackboneSpec =
            serde_json::from_slice(r.take(spec_len).ok_or_else(|| corrupt("spec"))?).map_err(|e| corrupt(&e.to_string()))?;
        let step = r.u64().ok_or_else(|| corrupt("step"))?;
        let seed: [u8; 32] = r.take(32).ok_or_else(|| corrupt("rng seed"))?.try_into().unwrap();
        let stream = r.u64().ok_or_else(|| corrupt("rng stream"))?;
        let word_pos = u128::from_le_bytes(r.take(16).ok_or_else(|| corrupt("rng position"))?.try_into().unwrap());
        let config_hash: [u8; 32] = r.take(32).ok_or_else(|| corrupt("config hash"))?.try_into().unwrap();

        let count = r.u32().ok_or_else(|| corrupt("parameter count"))? as usize;
        let mut index = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16().ok_or_else(|| corrupt("name length"))? as usize;
            let name = std::str::from_utf8(r.take(name_len).ok_or_else(|| corrupt("name"))?)
                .map_err(|_| corrupt("name is not utf-8"))?
                .to_string();
            let ndim = *r.take(1).ok_or_else(|| corrupt("rank"))?.first().unwrap() as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| corrupt("shape"))?;
            let offset = r.u64().ok_or_else(|| corrupt("offset"))? as usize;
            index.push((name, shape, offset));
        }
        let total = r.u64().ok_or_else(|| corrupt("blob length"))? as usize;
        let blob = r.take(total.checked_mul(8).ok_or_else(|| corrupt("blob length"))?).ok_or_else(|| corrupt("blob"))?;
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        let values: Vec<f64> = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();

        let mut params = ParamStore::new();
        for (name, shape, offset) in index {
            let n: usize = shape.iter().product();
            let data = values.get(offset..offset + n).ok_or_else(|| corrupt(&format!("{name} outside blob")))?;
            let tensor = Tensor::new(shape, data.to_vec()).map_err(|e| corrupt(&e.to_string()))?;
            params.push(name, tensor);
        }
        Ok(Self { spec, params, step, rng: RngState { seed, stream, word_pos }, config_hash })
    }

    /// Writes through a temporary file and a rename, so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        crate::io::write_atomic(path, &self.to_bytes())
            .map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| match source.kind() {
            std::io::ErrorKind::NotFound => CheckpointError::Missing(path.to_path_buf()),
            _ => CheckpointError::Io { path: path.to_path_buf(), source },
        })?;
        Self::from_bytes(&bytes, path)
    }

    /// Rebuilds the backbone, checking that names and shapes match its architecture.
    pub fn backbone(&self) -> Result<Backbone, CheckpointError> {
        let mut backbone = build_backbone(&self.spec, 0).map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
        backbone.params.copy_values_from(&self.params).map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
        Ok(backbone)
    }

    /// Refuses a checkpoint produced under a different spec or configuration.
    pub fn ensure_matches(&self, spec: &BackboneSpec, config_hash: Option<&[u8; 32]>) -> Result<(), CheckpointError> {
        if &self.spec != spec {
            return Err(CheckpointError::Mismatch(format!(
                "checkpoint spec {:?} differs from configured {:?}",
                self.spec, spec
            )));
        }
        if let Some(h) = config_hash {
            if h != &self.config_hash {
                return Err(CheckpointError::Mismatch("config hash differs".into()));
            }
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes(b.try_into().unwrap()))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}
