//! Embedding cache files.
//!
//! Layout: `<cache_dir>/<model_id>/<kind>/<recording_id>.emb`, where `kind`
//! is `raw` or `pooled`. A file is a 27-byte header followed by the
//! row-major little-endian `f32` payload:
//!
//! ```text
//! offset size field
//!      0    6 magic "LPEMB1"
//!      6    1 kind (0 raw, 1 pooled)
//!      7    4 L           u32 LE
//!     11    4 D           u32 LE (hidden size; pooled payload is L x 2D)
//!     15    4 T           u32 LE (1 for pooled)
//!     19    8 checksum    u64 LE, FNV-1a over the payload bytes
//!     27      payload
//! ```

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{LayerEmbeddings, PooledEmbedding};
use crate::util::{fnv1a64, path_component, write_atomic};

pub const EMBEDDING_MAGIC: &[u8; 6] = b"LPEMB1";
const HEADER_LEN: usize = 27;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("not cached")]
    NotCached,
    #[error("corrupt cache file {path}: {reason}")]
    CacheCorrupt { path: PathBuf, reason: String },
    #[error("cache I/O on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EmbeddingKind {
    Raw,
    Pooled,
}

impl EmbeddingKind {
    fn code(self) -> u8 {
        match self {
            EmbeddingKind::Raw => 0,
            EmbeddingKind::Pooled => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(EmbeddingKind::Raw),
            1 => Some(EmbeddingKind::Pooled),
            _ => None,
        }
    }

    pub fn dir_name(self) -> &'static str {
        match self {
            EmbeddingKind::Raw => "raw",
            EmbeddingKind::Pooled => "pooled",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Embedding {
    Raw(LayerEmbeddings),
    Pooled(PooledEmbedding),
}

impl Embedding {
    pub fn kind(&self) -> EmbeddingKind {
        match self {
            Embedding::Raw(_) => EmbeddingKind::Raw,
            Embedding::Pooled(_) => EmbeddingKind::Pooled,
        }
    }

    pub fn recording_id(&self) -> &str {
        match self {
            Embedding::Raw(e) => &e.recording_id,
            Embedding::Pooled(e) => &e.recording_id,
        }
    }

    pub fn model_id(&self) -> &str {
        match self {
            Embedding::Raw(e) => &e.model_id,
            Embedding::Pooled(e) => &e.model_id,
        }
    }

    pub fn into_raw(self) -> Option<LayerEmbeddings> {
        match self {
            Embedding::Raw(e) => Some(e),
            Embedding::Pooled(_) => None,
        }
    }

    pub fn into_pooled(self) -> Option<PooledEmbedding> {
        match self {
            Embedding::Pooled(e) => Some(e),
            Embedding::Raw(_) => None,
        }
    }
}

impl From<LayerEmbeddings> for Embedding {
    fn from(e: LayerEmbeddings) -> Self {
        Embedding::Raw(e)
    }
}

impl From<PooledEmbedding> for Embedding {
    fn from(e: PooledEmbedding) -> Self {
        Embedding::Pooled(e)
    }
}

pub fn cache_path(cache_dir: &Path, model_id: &str, kind: EmbeddingKind, recording_id: &str) -> PathBuf {
    cache_dir
        .join(path_component(model_id))
        .join(kind.dir_name())
        .join(format!("{}.emb", path_component(recording_id)))
}

pub fn encode_embedding_file(
    kind: EmbeddingKind,
    num_layers: usize,
    hidden_dim: usize,
    frames: usize,
    payload: &[f32],
) -> Vec<u8> {
    let mut body = Vec::with_capacity(payload.len() * 4);
    for v in payload {
        body.extend_from_slice(&v.to_le_bytes());
    }
    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.push(kind.code());
    for dim in [num_layers, hidden_dim, frames] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    out.extend_from_slice(&fnv1a64(&body).to_le_bytes());
    out.extend_from_slice(&body);
    out
}

/// Parses a cache file into `(kind, L, D, T, payload)`.
pub fn decode_embedding_file(
    bytes: &[u8],
    path: &Path,
) -> Result<(EmbeddingKind, usize, usize, usize, Vec<f32>), CacheError> {
    let corrupt = |reason: String| CacheError::CacheCorrupt {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER_LEN {
        return Err(corrupt(format!("{} bytes, shorter than the header", bytes.len())));
    }
    if &bytes[..6] != EMBEDDING_MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let kind = EmbeddingKind::from_code(bytes[6]).ok_or_else(|| corrupt(format!("unknown kind {}", bytes[6])))?;
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (l, d, t) = (u32_at(7), u32_at(11), u32_at(15));
    let checksum = u64::from_le_bytes(bytes[19..27].try_into().unwrap());
    let values = match kind {
        EmbeddingKind::Raw => l.checked_mul(d).and_then(|x| x.checked_mul(t)),
        EmbeddingKind::Pooled => {
            if t != 1 {
                return Err(corrupt(format!("pooled file declares T = {t}")));
            }
            l.checked_mul(d).and_then(|x| x.checked_mul(2))
        }
    }
    .ok_or_else(|| corrupt("dimension overflow".into()))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != values * 4 {
        return Err(corrupt(format!("payload is {} bytes, header implies {}", body.len(), values * 4)));
    }
    if fnv1a64(body) != checksum {
        return Err(corrupt("checksum mismatch".into()));
    }
    let payload = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((kind, l, d, t, payload))
}

/// Publishes an embedding atomically and returns its path.
pub fn cache_put(embedding: &Embedding, cache_dir: &Path) -> Result<PathBuf, CacheError> {
    let path = cache_path(cache_dir, embedding.model_id(), embedding.kind(), embedding.recording_id());
    let bytes = match embedding {
        Embedding::Raw(e) => encode_embedding_file(EmbeddingKind::Raw, e.num_layers, e.hidden_dim, e.frames, &e.data),
        Embedding::Pooled(e) => encode_embedding_file(EmbeddingKind::Pooled, e.num_layers, e.hidden_dim, 1, &e.data),
    };
    write_atomic(&path, &bytes).map_err(|source| CacheError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

pub fn cache_get(
    recording_id: &str,
    model_id: &str,
    kind: EmbeddingKind,
    cache_dir: &Path,
) -> Result<Embedding, CacheError> {
    let path = cache_path(cache_dir, model_id, kind, recording_id);
    let bytes = match fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(CacheError::NotCached),
        Err(source) => return Err(CacheError::Io { path, source }),
    };
    let (found, l, d, t, payload) = decode_embedding_file(&bytes, &path)?;
    if found != kind {
        return Err(CacheError::CacheCorrupt {
            path,
            reason: format!("stored kind {found:?} under {kind:?} directory"),
        });
    }
    Ok(match kind {
        EmbeddingKind::Raw => LayerEmbeddings::new(recording_id, model_id, l, d, t, payload).into(),
        EmbeddingKind::Pooled => PooledEmbedding::new(recording_id, model_id, l, d, payload).into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(id: &str) -> LayerEmbeddings {
        let data = (0..2 * 3 * 5).map(|i| (i as f32).sin() * 1e3).collect();
        LayerEmbeddings::new(id, "synthetic", 2, 3, 5, data)
    }

    #[test]
    fn empty_cache_is_not_cached() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            cache_get("x", "m", EmbeddingKind::Raw, dir.path()),
            Err(CacheError::NotCached)
        ));
    }

    #[test]
    fn header_layout() {
        let bytes = encode_embedding_file(EmbeddingKind::Pooled, 24, 64, 1, &vec![0.5; 24 * 128]);
        assert_eq!(&bytes[..6], b"LPEMB1");
        assert_eq!(bytes[6], 1);
        assert_eq!(&bytes[7..11], &24u32.to_le_bytes());
        assert_eq!(&bytes[11..15], &64u32.to_le_bytes());
        assert_eq!(&bytes[15..19], &1u32.to_le_bytes());
        assert_eq!(bytes.len(), 27 + 24 * 128 * 4);
        assert_eq!(&bytes[27..31], &0.5f32.to_le_bytes());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let e = raw("rec");
        let path = cache_put(&e.clone().into(), dir.path()).unwrap();
        let good = fs::read(&path).unwrap();

        let get = || cache_get("rec", "synthetic", EmbeddingKind::Raw, dir.path());
        for cut in [3, 27, good.len() - 1] {
            fs::write(&path, &good[..cut]).unwrap();
            assert!(matches!(get(), Err(CacheError::CacheCorrupt { .. })), "cut at {cut}");
        }
        let mut flipped = good.clone();
        *flipped.last_mut().unwrap() ^= 0x01;
        fs::write(&path, &flipped).unwrap();
        assert!(matches!(get(), Err(CacheError::CacheCorrupt { .. })));
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        fs::write(&path, &bad_magic).unwrap();
        assert!(matches!(get(), Err(CacheError::CacheCorrupt { .. })));

        fs::write(&path, &good).unwrap();
        assert_eq!(get().unwrap().into_raw().unwrap(), e);
    }

    #[test]
    fn concurrent_writers_for_distinct_keys() {
        let dir = tempfile::tempdir().unwrap();
        std::thread::scope(|s| {
            for i in 0..16 {
                let dir = dir.path();
                s.spawn(move || {
                    for _ in 0..5 {
                        cache_put(&raw(&format!("r{i}")).into(), dir).unwrap();
                    }
                });
            }
        });
        for i in 0..16 {
            let id = format!("r{i}");
            let got = cache_get(&id, "synthetic", EmbeddingKind::Raw, dir.path()).unwrap();
            assert_eq!(got.into_raw().unwrap(), raw(&id));
        }
    }

    #[test]
    fn ids_with_separators_stay_inside_the_cache() {
        let dir = tempfile::tempdir().unwrap();
        let path = cache_path(dir.path(), "org/model", EmbeddingKind::Raw, "../escape");
        assert!(path.starts_with(dir.path()));
        assert_eq!(path.parent().unwrap().parent().unwrap().parent().unwrap(), dir.path());
    }
}
