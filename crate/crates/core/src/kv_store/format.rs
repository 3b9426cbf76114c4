//! Binary chunk-cache files.
//!
//! Little-endian layout:
//!
//! ```text
//! "CCLP" | u32 version | [u8; 32] model fingerprint
//! u32 len | tokenizer id bytes
//! u32 n_layers | u32 rows | u32 kv_dim | u32 prefix_len
//! rows × u32 token ids
//! per layer: rows × kv_dim f32 keys, then rows × kv_dim f32 values
//! u32 CRC32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use super::ChunkCache;
use crate::error::{Error, Result};
use crate::model::Fingerprint;
use crate::tensor::Matrix;

pub const CACHE_MAGIC: [u8; 4] = *b"CCLP";
pub const CACHE_FORMAT_VERSION: u32 = 1;

pub fn encode_chunk_cache(cache: &ChunkCache) -> Result<Vec<u8>> {
    cache.validate()?;
    let rows = cache.len();
    let kv = cache.kv_dim();
    let mut out = Vec::with_capacity(64 + rows * 4 + cache.n_layers() * rows * kv * 8);
    out.extend_from_slice(&CACHE_MAGIC);
    out.extend_from_slice(&CACHE_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&cache.fingerprint.0);
    let tok = cache.tokenizer_id.as_bytes();
    put_u32(&mut out, tok.len())?;
    out.extend_from_slice(tok);
    for v in [cache.n_layers(), rows, kv, cache.prefix_len] {
        put_u32(&mut out, v)?;
    }
    for &t in &cache.token_ids {
        out.extend_from_slice(&t.to_le_bytes());
    }
    for (k, v) in cache.keys.iter().zip(&cache.values) {
        for x in k.data().iter().chain(v.data()) {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit in a u32 header field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Truncated(format!("{what} needs {n} bytes at offset {}", self.at)))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| Error::Truncated(format!("{what} size overflows")))?;
        Ok(self
            .take(bytes, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

pub fn decode_chunk_cache(bytes: &[u8]) -> Result<ChunkCache> {
    if bytes.len() < 4 {
        return Err(Error::Truncated(format!(
            "{} bytes is shorter than the magic",
            bytes.len()
        )));
    }
    if bytes[..4] != CACHE_MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < 12 {
        return Err(Error::Truncated("header ends before the version and checksum".into()));
    }
    let version = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    if version != CACHE_FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: CACHE_FORMAT_VERSION,
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }

    let mut r = Reader { buf: body, at: 8 };
    let mut fp = [0u8; 32];
    fp.copy_from_slice(r.take(32, "fingerprint")?);
    let tok_len = r.u32("tokenizer id length")? as usize;
    let tokenizer_id = String::from_utf8(r.take(tok_len, "tokenizer id")?.to_vec())
        .map_err(|_| Error::Truncated("tokenizer id is not valid UTF-8".into()))?;
    let n_layers = r.u32("layer count")? as usize;
    let rows = r.u32("row count")? as usize;
    let kv = r.u32("kv width")? as usize;
    let prefix_len = r.u32("prefix length")? as usize;
    let token_ids = r
        .take(rows.saturating_mul(4), "token ids")?
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut keys = Vec::with_capacity(n_layers.min(1024));
    let mut values = Vec::with_capacity(n_layers.min(1024));
    for l in 0..n_layers {
        keys.push(Matrix::new(rows, kv, r.f32s(rows * kv, &format!("layer {l} keys"))?)?);
        values.push(Matrix::new(rows, kv, r.f32s(rows * kv, &format!("layer {l} values"))?)?);
    }
    if r.at != body.len() {
        return Err(Error::Truncated(format!(
            "{} trailing bytes after the last layer",
            body.len() - r.at
        )));
    }
    let cache = ChunkCache {
        keys,
        values,
        prefix_len,
        token_ids,
        tokenizer_id,
        fingerprint: Fingerprint(fp),
    };
    cache.validate()?;
    Ok(cache)
}

pub fn save_chunk_cache(cache: &ChunkCache, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_chunk_cache(cache)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_chunk_cache(path: impl AsRef<Path>) -> Result<ChunkCache> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_chunk_cache(&bytes)
}

/// Writes `cache` to `path` and reads it back.
pub fn persist_roundtrip(cache: &ChunkCache, path: impl AsRef<Path>) -> Result<ChunkCache> {
    save_chunk_cache(cache, &path)?;
    load_chunk_cache(&path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kv_store::tests::random_chunk;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> ChunkCache {
        random_chunk(&mut ChaCha8Rng::seed_from_u64(5), &[1, 2, 3], 6, 2, 8)
    }

    #[test]
    fn roundtrip_is_exact() {
        let c = sample();
        let dir = tempfile::tempdir().unwrap();
        let back = persist_roundtrip(&c, dir.path().join("c.bin")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn expected_size() {
        let c = sample();
        let bytes = encode_chunk_cache(&c).unwrap();
        let header = 4 + 4 + 32 + 4 + 1 + 16;
        assert_eq!(bytes.len(), header + 9 * 4 + 2 * 2 * 9 * 8 * 4 + 4);
    }

    #[test]
    fn corruption_is_detected() {
        let good = encode_chunk_cache(&sample()).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_chunk_cache(&bad), Err(Error::BadMagic)));

        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(
            decode_chunk_cache(&bad),
            Err(Error::UnsupportedVersion { found: 2, .. })
        ));

        let mut bad = good.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 0x40;
        assert!(matches!(decode_chunk_cache(&bad), Err(Error::ChecksumMismatch { .. })));

        // A cut file with a recomputed checksum is still reported as truncated.
        let mut cut = good[..good.len() - 40].to_vec();
        let crc = crc32fast::hash(&cut);
        cut.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(decode_chunk_cache(&cut), Err(Error::Truncated(_))));

        assert!(matches!(decode_chunk_cache(&good[..2]), Err(Error::Truncated(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_chunk_cache(dir.path().join("nope")),
            Err(Error::Io { .. })
        ));
    }
}
