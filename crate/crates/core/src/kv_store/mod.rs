//! Chunk caches and their assembly into one prompt cache.
//!
//! A [`ChunkCache`] holds the K/V rows of `shared prefix ++ chunk` computed
//! in isolation at local positions, with keys left unrotated. Merging keeps
//! the prefix rows of the first chunk only, lays every retained row out at
//! contiguous positions `0..L`, and rotates keys to those final positions.

mod format;
mod store;

pub use format::{
    decode_chunk_cache, encode_chunk_cache, load_chunk_cache, persist_roundtrip, save_chunk_cache,
    CACHE_FORMAT_VERSION, CACHE_MAGIC,
};
pub use store::{CacheDir, CACHE_EXTENSION};

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Fingerprint, LayerCache};
use crate::tensor::{Matrix, RopeParams};
use crate::trace::Trace;

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkCache {
    /// Per-layer unrotated keys, one row per token.
    pub keys: Vec<Matrix>,
    pub values: Vec<Matrix>,
    /// Leading rows that belong to the shared prefix.
    pub prefix_len: usize,
    /// Prefix followed by chunk token ids.
    pub token_ids: Vec<u32>,
    pub tokenizer_id: String,
    pub fingerprint: Fingerprint,
}

impl ChunkCache {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn n_layers(&self) -> usize {
        self.keys.len()
    }

    pub fn kv_dim(&self) -> usize {
        self.keys.first().map_or(0, Matrix::cols)
    }

    pub fn chunk_len(&self) -> usize {
        self.len() - self.prefix_len
    }

    pub fn prefix_ids(&self) -> &[u32] {
        &self.token_ids[..self.prefix_len]
    }

    pub fn chunk_ids(&self) -> &[u32] {
        &self.token_ids[self.prefix_len..]
    }

    /// Working cache at the chunk's own local positions `0..len`.
    pub fn localized(&self, rope: &RopeParams) -> LayerCache {
        let mut keys = self.keys.clone();
        for k in &mut keys {
            for row in 0..k.rows() {
                rope.rotate_heads(k.row_mut(row), row);
            }
        }
        LayerCache {
            keys,
            values: self.values.clone(),
            positions: (0..self.len()).collect(),
            token_ids: self.token_ids.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.keys.len() != self.values.len() || self.keys.is_empty() {
            return Err(Error::IncompatibleCaches(
                "key/value layer counts differ or are zero".into(),
            ));
        }
        let rows = self.token_ids.len();
        let cols = self.kv_dim();
        for (k, v) in self.keys.iter().zip(&self.values) {
            if k.rows() != rows || v.rows() != rows || k.cols() != cols || v.cols() != cols {
                return Err(Error::IncompatibleCaches(format!(
                    "layer block is {}x{} / {}x{}, expected {rows}x{cols}",
                    k.rows(),
                    k.cols(),
                    v.rows(),
                    v.cols()
                )));
            }
        }
        if self.prefix_len > rows {
            return Err(Error::IncompatibleCaches(format!(
                "prefix_len {} exceeds {rows} rows",
                self.prefix_len
            )));
        }
        Ok(())
    }
}

/// Final row layout of a merged cache.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeLayout {
    /// Retained shared-prefix rows at the front.
    pub sink_len: usize,
    pub chunk_lens: Vec<usize>,
    pub positions: Vec<usize>,
}

impl MergeLayout {
    pub fn total_len(&self) -> usize {
        self.sink_len + self.chunk_lens.iter().sum::<usize>()
    }

    /// Merged-row range of every chunk's own tokens.
    pub fn chunk_ranges(&self) -> Vec<Range<usize>> {
        let mut start = self.sink_len;
        self.chunk_lens
            .iter()
            .map(|&len| {
                let r = start..start + len;
                start += len;
                r
            })
            .collect()
    }
}

/// Where a merged row came from. `chunk` is `None` for a standalone sink.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSource {
    pub chunk: Option<usize>,
    pub local: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergedCache {
    /// Keys rotated to `layout.positions`.
    pub cache: LayerCache,
    pub layout: MergeLayout,
    pub sources: Vec<TokenSource>,
    pub tokenizer_id: String,
    pub fingerprint: Fingerprint,
}

impl MergedCache {
    pub fn len(&self) -> usize {
        self.cache.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cache.is_empty()
    }

    pub fn sink_len(&self) -> usize {
        self.layout.sink_len
    }

    pub fn total_chunk_tokens(&self) -> usize {
        self.layout.chunk_lens.iter().sum()
    }

    /// Rows a selection may touch: everything after the retained prefix.
    pub fn check_selection(&self, rows: &[usize]) -> Result<()> {
        for w in rows.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::UnsortedSelection);
            }
        }
        for &r in rows {
            if r < self.sink_len() {
                return Err(Error::IndexInPrefix {
                    index: r,
                    prefix_len: self.sink_len(),
                });
            }
            if r >= self.len() {
                return Err(Error::IndexOutOfRange {
                    index: r,
                    len: self.len(),
                });
            }
        }
        Ok(())
    }
}

/// Contiguous positions `0..L` for a sink followed by the given chunks.
pub fn compute_positions(sink_len: usize, chunk_lens: &[usize]) -> Result<Vec<usize>> {
    if chunk_lens.is_empty() {
        return Err(Error::InvalidArgument("at least one chunk is required".into()));
    }
    if let Some(i) = chunk_lens.iter().position(|&l| l == 0) {
        return Err(Error::InvalidArgument(format!("chunk {i} is empty")));
    }
    Ok((0..sink_len + chunk_lens.iter().sum::<usize>()).collect())
}

/// Positions that naive concatenation of independently computed chunk
/// caches carries: every chunk restarts right after the sink.
pub fn naive_positions(sink_len: usize, chunk_lens: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = (0..sink_len).collect();
    for &len in chunk_lens {
        out.extend(sink_len..sink_len + len);
    }
    out
}

fn check_compatible<'a>(caches: impl IntoIterator<Item = &'a ChunkCache>) -> Result<()> {
    let mut first: Option<&ChunkCache> = None;
    for c in caches {
        c.validate()?;
        let Some(f) = first else {
            first = Some(c);
            continue;
        };
        if c.fingerprint != f.fingerprint {
            return Err(Error::IncompatibleCaches("model fingerprints differ".into()));
        }
        if c.tokenizer_id != f.tokenizer_id {
            return Err(Error::IncompatibleCaches(format!(
                "tokenizers differ: {} vs {}",
                f.tokenizer_id, c.tokenizer_id
            )));
        }
        if c.n_layers() != f.n_layers() || c.kv_dim() != f.kv_dim() {
            return Err(Error::IncompatibleCaches("layer geometry differs".into()));
        }
    }
    Ok(())
}

struct Segment<'a> {
    cache: &'a ChunkCache,
    rows: Range<usize>,
    chunk: Option<usize>,
}

fn assemble(segments: &[Segment<'_>], sink_len: usize, rope: &RopeParams, trace: &mut Trace) -> Result<MergedCache> {
    rope.validate()?;
    let head = segments[0].cache;
    if !head.kv_dim().is_multiple_of(rope.head_dim) {
        return Err(Error::Dimension(format!(
            "kv width {} is not a multiple of head_dim {}",
            head.kv_dim(),
            rope.head_dim
        )));
    }
    let chunk_lens: Vec<usize> = segments
        .iter()
        .filter(|s| s.chunk.is_some())
        .map(|s| s.rows.len())
        .collect();
    let positions = compute_positions(sink_len, &chunk_lens)?;
    let mut cache = LayerCache::empty(head.n_layers(), head.kv_dim());
    let mut sources = Vec::with_capacity(positions.len());
    for seg in segments {
        for local in seg.rows.clone() {
            sources.push(TokenSource {
                chunk: seg.chunk,
                local,
            });
            cache.token_ids.push(seg.cache.token_ids[local]);
        }
        for l in 0..head.n_layers() {
            cache.keys[l].extend_rows(&seg.cache.keys[l].slice_rows(seg.rows.start, seg.rows.end))?;
            cache.values[l].extend_rows(&seg.cache.values[l].slice_rows(seg.rows.start, seg.rows.end))?;
        }
    }
    for keys in &mut cache.keys {
        for (row, &pos) in positions.iter().enumerate() {
            rope.rotate_heads(keys.row_mut(row), pos);
        }
    }
    trace.rotary(None, positions.len() * head.n_layers(), head.kv_dim());
    cache.positions = positions.clone();
    Ok(MergedCache {
        cache,
        layout: MergeLayout {
            sink_len,
            chunk_lens,
            positions,
        },
        sources,
        tokenizer_id: head.tokenizer_id.clone(),
        fingerprint: head.fingerprint,
    })
}

/// Concatenates chunk caches keeping only the first chunk's shared prefix,
/// then rotates keys to contiguous final positions.
pub fn merge_caches(chunks: &[ChunkCache], rope: &RopeParams, trace: &mut Trace) -> Result<MergedCache> {
    let first = chunks
        .first()
        .ok_or_else(|| Error::InvalidArgument("at least one chunk is required".into()))?;
    check_compatible(chunks)?;
    for (i, c) in chunks.iter().enumerate() {
        if c.prefix_len != first.prefix_len {
            return Err(Error::IncompatibleCaches(format!(
                "chunk {i} has prefix_len {}, chunk 0 has {}",
                c.prefix_len, first.prefix_len
            )));
        }
        if c.prefix_ids() != first.prefix_ids() {
            return Err(Error::IncompatibleCaches(format!(
                "chunk {i} was built on a different prefix"
            )));
        }
    }
    let p = first.prefix_len;
    let mut segments = vec![Segment {
        cache: first,
        rows: 0..p,
        chunk: None,
    }];
    segments.extend(chunks.iter().enumerate().map(|(i, c)| Segment {
        cache: c,
        rows: p..c.len(),
        chunk: Some(i),
    }));
    let mut merged = assemble(&segments, p, rope, trace)?;
    // Prefix rows are attributed to chunk 0, which supplied them.
    for s in merged.sources.iter_mut().take(p) {
        s.chunk = Some(0);
    }
    Ok(merged)
}

/// Concatenates prefix-free chunk caches behind a standalone sink cache
/// without any deduplication; each chunk keeps its own leading tokens.
pub fn concat_caches(
    sink: Option<&ChunkCache>,
    chunks: &[ChunkCache],
    rope: &RopeParams,
    trace: &mut Trace,
) -> Result<MergedCache> {
    if chunks.is_empty() {
        return Err(Error::InvalidArgument("at least one chunk is required".into()));
    }
    check_compatible(sink.into_iter().chain(chunks))?;
    if let Some(i) = chunks.iter().position(|c| c.prefix_len != 0) {
        return Err(Error::IncompatibleCaches(format!(
            "chunk {i} carries a prefix; concatenation expects prefix-free chunks"
        )));
    }
    let mut segments = Vec::with_capacity(chunks.len() + 1);
    let sink_len = sink.map_or(0, ChunkCache::len);
    if let Some(s) = sink {
        segments.push(Segment {
            cache: s,
            rows: 0..s.len(),
            chunk: None,
        });
    }
    segments.extend(chunks.iter().enumerate().map(|(i, c)| Segment {
        cache: c,
        rows: 0..c.len(),
        chunk: Some(i),
    }));
    assemble(&segments, sink_len, rope, trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_chunk(
        rng: &mut ChaCha8Rng,
        prefix: &[u32],
        chunk_len: usize,
        layers: usize,
        kv: usize,
    ) -> ChunkCache {
        let rows = prefix.len() + chunk_len;
        let mut mk = || Matrix::new(rows, kv, (0..rows * kv).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let keys = (0..layers).map(|_| mk()).collect();
        let values = (0..layers).map(|_| mk()).collect();
        let mut token_ids = prefix.to_vec();
        token_ids.extend((0..chunk_len).map(|i| 100 + i as u32));
        ChunkCache {
            keys,
            values,
            prefix_len: prefix.len(),
            token_ids,
            tokenizer_id: "t".into(),
            fingerprint: Fingerprint([7; 32]),
        }
    }

    #[test]
    fn contiguous_positions() {
        assert_eq!(compute_positions(2, &[3, 2]).unwrap(), vec![0, 1, 2, 3, 4, 5, 6]);
        assert_eq!(compute_positions(3, &[4]).unwrap(), (0..7).collect::<Vec<_>>());
        assert!(compute_positions(2, &[]).is_err());
        assert!(compute_positions(2, &[3, 0]).is_err());
    }

    #[test]
    fn corrected_layout_differs_from_naive_pattern() {
        let naive = naive_positions(2, &[3, 2]);
        assert_eq!(naive, vec![0, 1, 2, 3, 4, 2, 3]);
        assert_ne!(naive, compute_positions(2, &[3, 2]).unwrap());
        // A single chunk has nothing to repeat.
        assert_eq!(naive_positions(2, &[3]), compute_positions(2, &[3]).unwrap());
    }

    #[test]
    fn dedup_keeps_one_prefix() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let prefix = [1, 2, 3, 4];
        let chunks: Vec<_> = (0..3).map(|_| random_chunk(&mut rng, &prefix, 10, 2, 4)).collect();
        let rope = RopeParams::new(4, 10_000.0).unwrap();
        let merged = merge_caches(&chunks, &rope, &mut Trace::default()).unwrap();
        assert_eq!(merged.len(), 34);
        assert_eq!(merged.sink_len(), 4);
        assert_eq!(&merged.cache.token_ids[..4], &prefix);
        assert_eq!(merged.cache.token_ids.iter().filter(|&&t| t == 1).count(), 1);
        // Sources form a bijection onto retained rows.
        let mut seen = std::collections::HashSet::new();
        for s in &merged.sources {
            assert!(seen.insert((s.chunk, s.local)));
        }
        assert_eq!(
            merged.sources[4],
            TokenSource {
                chunk: Some(0),
                local: 4
            }
        );
        assert_eq!(
            merged.sources[14],
            TokenSource {
                chunk: Some(1),
                local: 4
            }
        );
        // Values are copied unrotated.
        assert_eq!(merged.cache.values[1].row(14), chunks[1].values[1].row(4));
        // Keys are rotated to the final position.
        let mut k = chunks[2].keys[0].row(13).to_vec();
        rope.rotate_heads(&mut k, 33);
        assert_eq!(merged.cache.keys[0].row(33), k.as_slice());
    }

    #[test]
    fn merge_rejects_mismatched_chunks() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rope = RopeParams::new(4, 10_000.0).unwrap();
        let a = random_chunk(&mut rng, &[1, 2], 3, 1, 4);
        let b = random_chunk(&mut rng, &[1, 2, 3], 3, 1, 4);
        assert!(merge_caches(&[a.clone(), b], &rope, &mut Trace::default()).is_err());
        let mut c = random_chunk(&mut rng, &[1, 2], 3, 1, 4);
        c.fingerprint = Fingerprint([9; 32]);
        assert!(merge_caches(&[a.clone(), c], &rope, &mut Trace::default()).is_err());
        let d = random_chunk(&mut rng, &[1, 5], 3, 1, 4);
        assert!(merge_caches(&[a, d], &rope, &mut Trace::default()).is_err());
        assert!(merge_caches(&[], &rope, &mut Trace::default()).is_err());
    }

    #[test]
    fn concat_keeps_every_chunk_start() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rope = RopeParams::new(4, 10_000.0).unwrap();
        let sink = random_chunk(&mut rng, &[], 3, 1, 4);
        let chunks: Vec<_> = (0..2).map(|_| random_chunk(&mut rng, &[], 5, 1, 4)).collect();
        let merged = concat_caches(Some(&sink), &chunks, &rope, &mut Trace::default()).unwrap();
        assert_eq!(merged.len(), 13);
        assert_eq!(merged.sink_len(), 3);
        assert_eq!(merged.layout.chunk_ranges(), vec![3..8, 8..13]);
        assert_eq!(merged.sources[0].chunk, None);
        assert!(merged.check_selection(&[2]).is_err());
        assert!(merged.check_selection(&[3, 12]).is_ok());
        assert!(merged.check_selection(&[13]).is_err());
        assert!(merged.check_selection(&[5, 4]).is_err());
    }

    proptest! {
        #[test]
        fn merged_positions_are_contiguous(
            lens in prop::collection::vec(1usize..12, 1..=16),
            prefix_len in 0usize..6,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let prefix: Vec<u32> = (0..prefix_len as u32).collect();
            let chunks: Vec<_> = lens.iter().map(|&l| random_chunk(&mut rng, &prefix, l, 1, 4)).collect();
            let rope = RopeParams::new(4, 10_000.0).unwrap();
            let merged = merge_caches(&chunks, &rope, &mut Trace::default()).unwrap();
            let total = prefix_len + lens.iter().sum::<usize>();
            prop_assert_eq!(&merged.cache.positions, &(0..total).collect::<Vec<_>>());
            prop_assert_eq!(&merged.layout.positions, &merged.cache.positions);
        }
    }
}
