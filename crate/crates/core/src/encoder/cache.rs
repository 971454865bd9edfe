//! On-disk embedding cache: `magic | N: u64 | d: u64 | N*d f32`, all
//! little-endian, rows contiguous.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use sha2::{Digest, Sha256};

use super::{encode, EmbeddingMatrix, EncoderBackend, EncoderError};

pub const EMBEDDING_MAGIC: [u8; 4] = *b"CCEM";
const HEADER_LEN: usize = 4 + 8 + 8;

pub fn write_embedding_file(path: &Path, m: &EmbeddingMatrix) -> Result<(), EncoderError> {
    let (n, d) = m.values().dim();
    let mut buf = Vec::with_capacity(HEADER_LEN + n * d * 4);
    buf.extend_from_slice(&EMBEDDING_MAGIC);
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    buf.extend_from_slice(&(d as u64).to_le_bytes());
    for v in m.values().iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|source| EncoderError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, buf).map_err(|source| EncoderError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_embedding_file(path: &Path) -> Result<EmbeddingMatrix, EncoderError> {
    let bad = |reason: &str| EncoderError::BadEmbeddingFile {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let bytes = fs::read(path).map_err(|source| EncoderError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if bytes.len() < HEADER_LEN || bytes[..4] != EMBEDDING_MAGIC {
        return Err(bad("missing magic header"));
    }
    let word = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes")) as usize;
    let (n, d) = (word(4), word(12));
    let body = &bytes[HEADER_LEN..];
    if n.checked_mul(d).and_then(|c| c.checked_mul(4)) != Some(body.len()) {
        return Err(bad("payload length does not match N x d"));
    }
    let values: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    EmbeddingMatrix::new(Array2::from_shape_vec((n, d), values).expect("length checked"))
}

fn cache_key(backend: &dyn EncoderBackend, texts: &[String]) -> String {
    let mut h = Sha256::new();
    h.update(backend.id().as_bytes());
    for t in texts {
        h.update([0u8]);
        h.update(t.as_bytes());
    }
    hex::encode(&h.finalize()[..12])
}

/// Encodes through a cache directory keyed by backend id and input texts.
/// Returns the matrix and the cache file used.
pub fn encode_cached(
    texts: &[String],
    backend: &dyn EncoderBackend,
    cache_dir: &Path,
) -> Result<(EmbeddingMatrix, PathBuf), EncoderError> {
    let path = cache_dir.join(format!("{}.emb", cache_key(backend, texts)));
    if path.exists() {
        let m = read_embedding_file(&path)?;
        if m.rows() == texts.len() && m.dim() == backend.dim() {
            return Ok((m, path));
        }
        log::warn!("{}: stale embedding cache, recomputing", path.display());
    }
    let m = encode(texts, backend)?;
    write_embedding_file(&path, &m)?;
    Ok((m, path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::test_backend;

    #[test]
    fn cache_file_round_trip_is_exact_for_backend_output() {
        let dir = tempfile::tempdir().unwrap();
        let texts: Vec<String> = vec!["a b".into(), "c".into(), "".into()];
        let b = test_backend(6, 2);
        let (first, path) = encode_cached(&texts, &b, dir.path()).unwrap();
        let (second, again) = encode_cached(&texts, &b, dir.path()).unwrap();
        assert_eq!(path, again);
        assert_eq!(first, second);
        let raw = fs::read(&path).unwrap();
        assert_eq!(&raw[..4], b"CCEM");
        assert_eq!(u64::from_le_bytes(raw[4..12].try_into().unwrap()), 3);
        assert_eq!(u64::from_le_bytes(raw[12..20].try_into().unwrap()), 6);
        assert_eq!(raw.len(), 20 + 3 * 6 * 4);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.emb");
        fs::write(&p, b"CCEM\x02\0\0\0\0\0\0\0\x02\0\0\0\0\0\0\0\0\0").unwrap();
        assert!(matches!(read_embedding_file(&p), Err(EncoderError::BadEmbeddingFile { .. })));
    }
}
