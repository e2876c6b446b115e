//! Cosine similarity, MMEB shard files and the deterministic mock embedder.
//!
//! Shard layout (little-endian): magic `MMEB`, version `u32`, dim `u32`,
//! count `u64`, then per entry an id (`u16` length + UTF-8) followed by
//! `dim` `f32` values. A shard set is a JSON manifest
//! `{"dim": D, "shards": ["a.mmeb", ...]}` with paths relative to itself.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::derive_rng;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("zero-norm vector")]
    ZeroVector,
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("shard {path}: corrupt at byte {offset}: {reason}")]
    ShardCorrupt {
        path: String,
        offset: u64,
        reason: String,
    },
    #[error("shard set: {0}")]
    Config(String),
    #[error("missing embedding for id `{0}`")]
    Missing(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> EmbeddingError + '_ {
    move |source| EmbeddingError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// `dot(u, v) / (|u| |v|)`, accumulated in f64 and clamped to `[-1, 1]`.
pub fn cosine(u: &[f32], v: &[f32]) -> Result<f64, EmbeddingError> {
    if u.len() != v.len() {
        return Err(EmbeddingError::DimMismatch {
            left: u.len(),
            right: v.len(),
        });
    }
    let (mut dot, mut nu, mut nv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (f64::from(a), f64::from(b));
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(EmbeddingError::ZeroVector);
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

/// Unit-norm pseudo-random direction keyed by `(seed, id)`.
///
/// Components are uniform in `[-1, 1)` drawn from ChaCha8 and normalised in
/// f64, so the output bytes are identical on every platform.
pub fn mock_embed(id: &str, dim: usize, seed: u64) -> Vec<f32> {
    assert!(dim >= 2, "mock embedding dim must be at least 2");
    let mut rng = derive_rng(seed, "mock-embed", id);
    loop {
        let raw: Vec<f64> = (0..dim)
            .map(|_| {
                let bits: u32 = rng.random();
                f64::from(bits >> 8) / f64::from(1u32 << 23) - 1.0
            })
            .collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return raw.iter().map(|v| (v / norm) as f32).collect();
        }
    }
}

/// Source of embedding vectors keyed by id.
pub trait EmbeddingProvider {
    fn dim(&self) -> usize;
    fn embedding(&self, id: &str) -> Result<Vec<f32>, EmbeddingError>;
}

/// Mock provider: every id gets [`mock_embed`].
#[derive(Debug, Clone, Copy)]
pub struct MockEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl EmbeddingProvider for MockEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embedding(&self, id: &str) -> Result<Vec<f32>, EmbeddingError> {
        Ok(mock_embed(id, self.dim, self.seed))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingShard {
    pub dim: usize,
    pub entries: Vec<(String, Vec<f32>)>,
}

const SHARD_MAGIC: &[u8; 4] = b"MMEB";
const SHARD_VERSION: u32 = 1;

impl EmbeddingShard {
    pub fn new(dim: usize) -> Self {
        EmbeddingShard {
            dim,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, id: impl Into<String>, vector: Vec<f32>) -> Result<(), EmbeddingError> {
        if vector.len() != self.dim {
            return Err(EmbeddingError::DimMismatch {
                left: self.dim,
                right: vector.len(),
            });
        }
        self.entries.push((id.into(), vector));
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(SHARD_MAGIC)?;
        w.write_all(&SHARD_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for (id, v) in &self.entries {
            let bytes = id.as_bytes();
            let len = u16::try_from(bytes.len())
                .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "id longer than 65535 bytes"))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(bytes)?;
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()
    }

    /// Parse a shard; `label` names the source in errors.
    pub fn read_from<R: Read>(r: R, label: &str) -> Result<Self, EmbeddingError> {
        let mut r = ShardReader {
            inner: r,
            offset: 0,
            label,
        };
        if &r.array::<4>()? != SHARD_MAGIC {
            return Err(r.corrupt(0, "bad magic"));
        }
        let version = u32::from_le_bytes(r.array()?);
        if version != SHARD_VERSION {
            return Err(r.corrupt(4, &format!("unsupported version {version}")));
        }
        let dim = u32::from_le_bytes(r.array()?) as usize;
        if dim == 0 {
            return Err(r.corrupt(8, "dim is zero"));
        }
        let count = u64::from_le_bytes(r.array()?);
        let mut entries = Vec::with_capacity(count.min(1 << 20) as usize);
        for _ in 0..count {
            let at = r.offset;
            let len = u16::from_le_bytes(r.array()?) as usize;
            let mut id = vec![0u8; len];
            r.fill(&mut id)?;
            let id = String::from_utf8(id).map_err(|_| r.corrupt(at, "id is not UTF-8"))?;
            let mut v = Vec::with_capacity(dim);
            for _ in 0..dim {
                v.push(f32::from_le_bytes(r.array()?));
            }
            entries.push((id, v));
        }
        let mut probe = [0u8; 1];
        if r.inner.read(&mut probe).map_err(|e| r.io(e))? != 0 {
            return Err(r.corrupt(r.offset, "trailing bytes after last entry"));
        }
        Ok(EmbeddingShard { dim, entries })
    }
}

struct ShardReader<'a, R> {
    inner: R,
    offset: u64,
    label: &'a str,
}

impl<R: Read> ShardReader<'_, R> {
    fn corrupt(&self, offset: u64, reason: &str) -> EmbeddingError {
        EmbeddingError::ShardCorrupt {
            path: self.label.to_string(),
            offset,
            reason: reason.to_string(),
        }
    }

    fn io(&self, source: io::Error) -> EmbeddingError {
        EmbeddingError::Io {
            path: self.label.to_string(),
            source,
        }
    }

    fn fill(&mut self, buf: &mut [u8]) -> Result<(), EmbeddingError> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => {
                Err(self.corrupt(self.offset, "truncated"))
            }
            Err(e) => Err(self.io(e)),
        }
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], EmbeddingError> {
        let mut buf = [0u8; N];
        self.fill(&mut buf)?;
        Ok(buf)
    }
}

pub fn write_shard(shard: &EmbeddingShard, path: &Path) -> Result<(), EmbeddingError> {
    let file = File::create(path).map_err(io_err(path))?;
    shard.write_to(BufWriter::new(file)).map_err(io_err(path))
}

pub fn read_shard(path: &Path) -> Result<EmbeddingShard, EmbeddingError> {
    let file = File::open(path).map_err(io_err(path))?;
    EmbeddingShard::read_from(BufReader::new(file), &path.display().to_string())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardSetManifest {
    pub dim: usize,
    pub shards: Vec<PathBuf>,
}

/// All vectors of a shard set, indexed by id. Immutable after load.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingStore {
    dim: usize,
    vectors: HashMap<String, Vec<f32>>,
}

impl EmbeddingStore {
    pub fn from_shards(dim: usize, shards: Vec<EmbeddingShard>) -> Result<Self, EmbeddingError> {
        let mut vectors = HashMap::new();
        for (i, shard) in shards.into_iter().enumerate() {
            if shard.dim != dim {
                return Err(EmbeddingError::Config(format!(
                    "shard {i} has dim {} but the set declares {dim}",
                    shard.dim
                )));
            }
            for (id, v) in shard.entries {
                if vectors.insert(id.clone(), v).is_some() {
                    return Err(EmbeddingError::Config(format!("duplicate id `{id}` across shards")));
                }
            }
        }
        Ok(EmbeddingStore { dim, vectors })
    }

    /// Load every shard listed by a shard-set manifest.
    pub fn load(manifest_path: &Path) -> Result<Self, EmbeddingError> {
        let text = std::fs::read_to_string(manifest_path).map_err(io_err(manifest_path))?;
        let manifest: ShardSetManifest = serde_json::from_str(&text)
            .map_err(|e| EmbeddingError::Config(format!("{}: {e}", manifest_path.display())))?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let shards = manifest
            .shards
            .iter()
            .map(|p| read_shard(&base.join(p)))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_shards(manifest.dim, shards)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.vectors.get(id).map(Vec::as_slice)
    }
}

impl EmbeddingProvider for EmbeddingStore {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embedding(&self, id: &str) -> Result<Vec<f32>, EmbeddingError> {
        self.get(id)
            .map(<[f32]>::to_vec)
            .ok_or_else(|| EmbeddingError::Missing(id.to_string()))
    }
}
