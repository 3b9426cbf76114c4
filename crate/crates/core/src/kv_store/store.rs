//! Content-addressed directory of chunk-cache files.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{load_chunk_cache, save_chunk_cache, ChunkCache};
use crate::error::{Error, Result};
use crate::model::Fingerprint;

pub const CACHE_EXTENSION: &str = "cclp";

/// Chunk caches keyed by model, tokenizer, prefix and chunk tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheDir {
    root: PathBuf,
}

impl CacheDir {
    /// Opens `root`, creating it if needed.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn key(fingerprint: &Fingerprint, tokenizer_id: &str, prefix_ids: &[u32], chunk_ids: &[u32]) -> String {
        let mut h = Sha256::new();
        h.update(fingerprint.0);
        h.update((tokenizer_id.len() as u64).to_le_bytes());
        h.update(tokenizer_id.as_bytes());
        h.update((prefix_ids.len() as u64).to_le_bytes());
        for id in prefix_ids.iter().chain(chunk_ids) {
            h.update(id.to_le_bytes());
        }
        let digest = h.finalize();
        digest[..16].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn path_for(
        &self,
        fingerprint: &Fingerprint,
        tokenizer_id: &str,
        prefix_ids: &[u32],
        chunk_ids: &[u32],
    ) -> PathBuf {
        self.root
            .join(Self::key(fingerprint, tokenizer_id, prefix_ids, chunk_ids))
            .with_extension(CACHE_EXTENSION)
    }

    /// The stored cache for these tokens, if one exists and matches them.
    pub fn get(
        &self,
        fingerprint: &Fingerprint,
        tokenizer_id: &str,
        prefix_ids: &[u32],
        chunk_ids: &[u32],
    ) -> Result<Option<ChunkCache>> {
        let path = self.path_for(fingerprint, tokenizer_id, prefix_ids, chunk_ids);
        if !path.exists() {
            return Ok(None);
        }
        let cache = load_chunk_cache(&path)?;
        let matches = cache.fingerprint == *fingerprint
            && cache.tokenizer_id == tokenizer_id
            && cache.prefix_ids() == prefix_ids
            && cache.chunk_ids() == chunk_ids;
        Ok(matches.then_some(cache))
    }

    pub fn put(&self, cache: &ChunkCache) -> Result<PathBuf> {
        let path = self.path_for(
            &cache.fingerprint,
            &cache.tokenizer_id,
            cache.prefix_ids(),
            cache.chunk_ids(),
        );
        save_chunk_cache(cache, &path)?;
        Ok(path)
    }
}
