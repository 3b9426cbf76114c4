//! Choosing which merged-cache rows to recompute.
//!
//! The CacheClip path scores chunk tokens with an auxiliary model's
//! last-layer query→chunk attention, keeps a top-k budget, then filters it
//! through fixed windows so that only locally dense selections survive.
//! Selections made in the auxiliary tokenizer's space are projected onto
//! primary tokens by character overlap.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv_store::{ChunkCache, MergedCache};
use crate::model::{Capture, Model};
use crate::tensor::AttentionKnobs;
use crate::tokenizer::{align_spans, TokenSpan};
use crate::trace::Trace;

pub const DEFAULT_WINDOW_LEN: usize = 8;
pub const DEFAULT_WINDOW_THRESHOLD: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub recomp_ratio: f64,
    pub window_len: usize,
    pub window_threshold: usize,
    /// Recompute a whole window once it survives, not just its candidates.
    pub expand_full_window: bool,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            recomp_ratio: 0.2,
            window_len: DEFAULT_WINDOW_LEN,
            window_threshold: DEFAULT_WINDOW_THRESHOLD,
            expand_full_window: false,
        }
    }
}

impl SelectionConfig {
    pub fn with_ratio(ratio: f64) -> Self {
        Self {
            recomp_ratio: ratio,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_ratio(self.recomp_ratio)?;
        if self.window_len == 0 {
            return Err(Error::InvalidArgument("window_len must be at least 1".into()));
        }
        if self.window_threshold > self.window_len {
            return Err(Error::InvalidArgument(format!(
                "window_threshold {} exceeds window_len {}",
                self.window_threshold, self.window_len
            )));
        }
        Ok(())
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("ratio {ratio} is outside [0, 1]")));
    }
    Ok(())
}

/// `⌈ratio·n⌉`, treating products within 1e-9 of an integer as that integer.
pub fn budget(ratio: f64, n: usize) -> usize {
    let x = ratio * n as f64;
    let r = x.round();
    let k = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    (k.max(0.0) as usize).min(n)
}

/// Indices of the `k` highest scores, ties broken toward the lower index,
/// returned in ascending index order.
pub fn top_k_indices(scores: &[f32], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

/// One score per chunk token, in chunk order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScores {
    pub scores: Vec<f32>,
    pub chunk_lens: Vec<usize>,
}

impl ImportanceScores {
    pub fn new(scores: Vec<f32>, chunk_lens: Vec<usize>) -> Result<Self> {
        let total: usize = chunk_lens.iter().sum();
        if total != scores.len() {
            return Err(Error::Dimension(format!(
                "{} scores for {total} chunk tokens",
                scores.len()
            )));
        }
        if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite score {s}")));
        }
        Ok(Self { scores, chunk_lens })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub id: usize,
    pub chunk: usize,
    /// Chunk-token range `[start, end)` in the scoring space.
    pub start: usize,
    pub end: usize,
    /// Budgeted candidates falling inside the window.
    pub selected: usize,
    pub kept: bool,
}

/// Result of windowed selection in the scoring tokenizer's space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSelection {
    /// Chunk-token indices, ascending.
    pub indices: Vec<usize>,
    pub windows: Vec<WindowRecord>,
    pub budget: usize,
    pub total: usize,
}

impl TokenSelection {
    pub fn effective_ratio(&self) -> f64 {
        ratio_of(self.indices.len(), self.total)
    }
}

fn ratio_of(n: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        n as f64 / total as f64
    }
}

/// Recomputation plan over merged-cache rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionPlan {
    /// Merged-cache row indices, strictly increasing, never inside the sink.
    pub indices: Vec<usize>,
    pub windows: Vec<WindowRecord>,
    pub effective_ratio: f64,
    pub total_chunk_tokens: usize,
}

impl SelectionPlan {
    pub fn new(indices: Vec<usize>, windows: Vec<WindowRecord>, total_chunk_tokens: usize) -> Self {
        Self {
            effective_ratio: ratio_of(indices.len(), total_chunk_tokens),
            indices,
            windows,
            total_chunk_tokens,
        }
    }

    pub fn empty(total_chunk_tokens: usize) -> Self {
        Self::new(Vec::new(), Vec::new(), total_chunk_tokens)
    }

    /// Every chunk row of `merged`.
    pub fn full(merged: &MergedCache) -> Self {
        Self::new(
            (merged.sink_len()..merged.len()).collect(),
            Vec::new(),
            merged.total_chunk_tokens(),
        )
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Scores every chunk token by the auxiliary model's final-layer attention
/// from the query tokens, head-averaged then query-averaged.
///
/// Each chunk is scored independently: the query is appended to the
/// chunk's own cache at the positions following it. Only query→chunk
/// columns are read; prefix and query columns are ignored and the
/// remaining mass is not renormalized.
pub fn aux_score_tokens(
    aux: &Model,
    chunks: &[ChunkCache],
    query_ids: &[u32],
    trace: &mut Trace,
) -> Result<ImportanceScores> {
    if query_ids.is_empty() {
        return Err(Error::EmptyInput("query token list"));
    }
    if chunks.is_empty() {
        return Err(Error::InvalidArgument("at least one chunk is required".into()));
    }
    for c in chunks {
        if c.fingerprint != aux.fingerprint() {
            return Err(Error::IncompatibleCaches(
                "chunk cache was not built by the scoring model".into(),
            ));
        }
        if c.prefix_len != chunks[0].prefix_len || c.prefix_ids() != chunks[0].prefix_ids() {
            return Err(Error::IncompatibleCaches("scoring chunks do not share a prefix".into()));
        }
    }
    let last = aux.config().n_layers - 1;
    let rope = aux.config().rope();
    let stage = trace.stage();
    let per_chunk: Vec<(Vec<f32>, Trace)> = chunks
        .par_iter()
        .map(|c| -> Result<(Vec<f32>, Trace)> {
            let mut t = Trace::new(stage);
            let mut cache = c.localized(&rope);
            let (_, maps) = aux.append_tokens(
                &mut cache,
                query_ids,
                AttentionKnobs::NEUTRAL,
                Capture::Layers(vec![last]),
                &mut t,
            )?;
            let maps = maps.expect("capture requested");
            let mut acc = vec![0.0f64; c.chunk_len()];
            for row in 0..query_ids.len() {
                let w = maps.head_mean_row(last, row).expect("last layer captured");
                for (a, &x) in acc.iter_mut().zip(&w[c.prefix_len..c.len()]) {
                    *a += x as f64;
                }
            }
            let inv = 1.0 / query_ids.len() as f64;
            Ok((acc.into_iter().map(|a| (a * inv) as f32).collect(), t))
        })
        .collect::<Result<_>>()?;
    let mut scores = Vec::new();
    for (s, t) in per_chunk {
        scores.extend(s);
        trace.append(t);
    }
    ImportanceScores::new(scores, chunks.iter().map(ChunkCache::chunk_len).collect())
}

/// Fixed windows of `window_len` chunk tokens as `(chunk, start, end)`.
///
/// Windows restart at every chunk boundary. A chunk's trailing remainder
/// shorter than `threshold` is folded into the window before it, so a fully
/// selected chunk keeps every token.
pub fn windows_for(chunk_lens: &[usize], window_len: usize, threshold: usize) -> Vec<(usize, usize, usize)> {
    let mut out: Vec<(usize, usize, usize)> = Vec::new();
    let mut base = 0;
    for (chunk, &len) in chunk_lens.iter().enumerate() {
        let first = out.len();
        let mut s = 0;
        while s < len {
            let e = (s + window_len).min(len);
            if e - s < threshold && out.len() > first {
                out.last_mut().expect("previous window").2 = base + e;
            } else {
                out.push((chunk, base + s, base + e));
            }
            s = e;
        }
        base += len;
    }
    out
}

/// Applies the window rule to a candidate set (ascending indices).
pub fn apply_windows(
    candidates: &[usize],
    chunk_lens: &[usize],
    config: &SelectionConfig,
) -> (Vec<usize>, Vec<WindowRecord>) {
    let mut indices = Vec::new();
    let mut records = Vec::new();
    let mut c = 0;
    for (id, (chunk, start, end)) in windows_for(chunk_lens, config.window_len, config.window_threshold)
        .into_iter()
        .enumerate()
    {
        let first = c;
        while c < candidates.len() && candidates[c] < end {
            c += 1;
        }
        let inside = &candidates[first..c];
        let kept = !inside.is_empty() && inside.len() >= config.window_threshold;
        if kept {
            if config.expand_full_window {
                indices.extend(start..end);
            } else {
                indices.extend_from_slice(inside);
            }
        }
        records.push(WindowRecord {
            id,
            chunk,
            start,
            end,
            selected: inside.len(),
            kept,
        });
    }
    (indices, records)
}

/// Budgeted top-k followed by window filtering.
pub fn select_tokens(scores: &ImportanceScores, config: &SelectionConfig) -> Result<TokenSelection> {
    config.validate()?;
    let n = scores.len();
    let k = budget(config.recomp_ratio, n);
    let candidates = top_k_indices(&scores.scores, k);
    let (indices, windows) = apply_windows(&candidates, &scores.chunk_lens, config);
    Ok(TokenSelection {
        indices,
        windows,
        budget: k,
        total: n,
    })
}

/// Projects a scoring-space selection onto merged primary rows.
///
/// Both span lists cover the concatenated chunk text (no prefix); the
/// result is offset by `primary_sink_len` so it indexes the merged cache.
pub fn map_selection(
    selection: &TokenSelection,
    aux_spans: &[TokenSpan],
    primary_spans: &[TokenSpan],
    primary_sink_len: usize,
) -> Result<SelectionPlan> {
    if aux_spans.len() != selection.total {
        return Err(Error::Dimension(format!(
            "selection covers {} tokens, {} auxiliary spans given",
            selection.total,
            aux_spans.len()
        )));
    }
    let map = align_spans(aux_spans, primary_spans)?;
    let projected = map.project(&selection.indices);
    Ok(SelectionPlan::new(
        projected.into_iter().map(|i| i + primary_sink_len).collect(),
        selection.windows.clone(),
        primary_spans.len(),
    ))
}

/// CacheBlend's selection and the discrepancy it ranked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheBlendSelection {
    pub plan: SelectionPlan,
    /// Per chunk token, L2 distance between globally recomputed and cached
    /// second-layer values.
    pub discrepancies: Vec<f32>,
}

/// Recomputes the first layer for every chunk row with global context,
/// projects the resulting states to second-layer values and selects the
/// rows whose cached values deviate most. No windowing.
pub fn cacheblend_select(
    model: &Model,
    merged: &MergedCache,
    ratio: f64,
    trace: &mut Trace,
) -> Result<CacheBlendSelection> {
    check_ratio(ratio)?;
    if model.config().n_layers < 2 {
        return Err(Error::InvalidConfig(
            "cacheblend selection needs at least two layers".into(),
        ));
    }
    if merged.fingerprint != model.fingerprint() {
        return Err(Error::IncompatibleCaches(
            "merged cache was built by a different model".into(),
        ));
    }
    let rows: Vec<usize> = (merged.sink_len()..merged.len()).collect();
    let mut scratch = merged.cache.clone();
    let hidden = model.recompute_rows(&mut scratch, &rows, 0..1, trace)?;
    let fresh = model.value_projection(1, &hidden, trace);
    let cached = &merged.cache.values[1];
    let discrepancies: Vec<f32> = rows
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            fresh
                .row(i)
                .iter()
                .zip(cached.row(r))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f32>()
                .sqrt()
        })
        .collect();
    let k = budget(ratio, rows.len());
    let top = top_k_indices(&discrepancies, k);
    let plan = SelectionPlan::new(
        top.into_iter().map(|i| i + merged.sink_len()).collect(),
        Vec::new(),
        rows.len(),
    );
    Ok(CacheBlendSelection { plan, discrepancies })
}

/// Uniform sample of `⌈ratio·n⌉` chunk rows without replacement.
pub fn random_select(n_tokens: usize, sink_len: usize, ratio: f64, seed: u64) -> Result<SelectionPlan> {
    check_ratio(ratio)?;
    let k = budget(ratio, n_tokens);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, n_tokens, k).into_vec();
    picked.sort_unstable();
    Ok(SelectionPlan::new(
        picked.into_iter().map(|i| i + sink_len).collect(),
        Vec::new(),
        n_tokens,
    ))
}

/// Fraction of selected rows that sit in the first window of their chunk.
pub fn first_window_fraction(plan: &SelectionPlan, merged: &MergedCache, window_len: usize) -> f64 {
    if plan.is_empty() {
        return 0.0;
    }
    let ranges = merged.layout.chunk_ranges();
    let hits = plan
        .indices
        .iter()
        .filter(|&&r| {
            ranges
                .iter()
                .any(|range| range.contains(&r) && r < range.start + window_len)
        })
        .count();
    hits as f64 / plan.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kv_store::merge_caches;
    use crate::model::ModelConfig;
    use proptest::prelude::*;

    fn sel(ratio: f64) -> SelectionConfig {
        SelectionConfig::with_ratio(ratio)
    }

    #[test]
    fn budget_rounding() {
        assert_eq!(budget(0.2, 10), 2);
        assert_eq!(budget(0.3, 10), 3);
        assert_eq!(budget(0.7, 10), 7);
        assert_eq!(budget(0.25, 10), 3);
        assert_eq!(budget(0.0, 10), 0);
        assert_eq!(budget(1.0, 10), 10);
        assert_eq!(budget(0.01, 3), 1);
    }

    #[test]
    fn six_plus_two_example() {
        let mut scores = vec![0.0f32; 16];
        for (rank, i) in [0usize, 1, 2, 4, 5, 7, 9, 14].into_iter().enumerate() {
            scores[i] = 1.0 - rank as f32 * 0.01;
        }
        let s = ImportanceScores::new(scores, vec![16]).unwrap();
        let out = select_tokens(&s, &sel(0.5)).unwrap();
        assert_eq!(out.budget, 8);
        assert_eq!(out.indices, vec![0, 1, 2, 4, 5, 7]);
        assert_eq!(out.windows.len(), 2);
        assert!(out.windows[0].kept && out.windows[0].selected == 6);
        assert!(!out.windows[1].kept && out.windows[1].selected == 2);
        assert_eq!(out.effective_ratio(), 6.0 / 16.0);

        let expanded = select_tokens(
            &s,
            &SelectionConfig {
                expand_full_window: true,
                ..sel(0.5)
            },
        )
        .unwrap();
        assert_eq!(expanded.indices, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn ratio_extremes() {
        let s = ImportanceScores::new((0..20).map(|i| i as f32).collect(), vec![12, 8]).unwrap();
        let all = select_tokens(&s, &sel(1.0)).unwrap();
        assert_eq!(all.indices, (0..20).collect::<Vec<_>>());
        assert!(all.windows.iter().all(|w| w.kept));
        assert!(select_tokens(&s, &sel(0.0)).unwrap().indices.is_empty());
    }

    #[test]
    fn windows_restart_per_chunk() {
        assert_eq!(windows_for(&[13, 5], 8, 5), vec![(0, 0, 8), (0, 8, 13), (1, 13, 18)]);
        assert_eq!(windows_for(&[10, 3], 8, 5), vec![(0, 0, 10), (1, 10, 13)]);
        assert_eq!(windows_for(&[10], 8, 0), vec![(0, 0, 8), (0, 8, 10)]);
    }

    #[test]
    fn short_tail_joins_previous_window() {
        let s = ImportanceScores::new(vec![1.0; 10], vec![10]).unwrap();
        let out = select_tokens(&s, &sel(1.0)).unwrap();
        assert_eq!(out.indices, (0..10).collect::<Vec<_>>());
        assert_eq!(out.windows.len(), 1);
        // A chunk shorter than the threshold can never reach it.
        let s = ImportanceScores::new(vec![1.0; 13], vec![10, 3]).unwrap();
        let out = select_tokens(&s, &sel(1.0)).unwrap();
        assert_eq!(out.indices, (0..10).collect::<Vec<_>>());
        assert!(!out.windows[1].kept);
    }

    #[test]
    fn invalid_configs() {
        let s = ImportanceScores::new(vec![1.0; 4], vec![4]).unwrap();
        assert!(select_tokens(&s, &sel(1.5)).is_err());
        let bad = SelectionConfig {
            window_threshold: 9,
            ..sel(0.5)
        };
        assert!(select_tokens(&s, &bad).is_err());
        assert!(ImportanceScores::new(vec![1.0; 3], vec![4]).is_err());
    }

    fn spans(lens: &[usize]) -> Vec<TokenSpan> {
        let mut at = 0;
        lens.iter()
            .map(|&l| {
                let s = TokenSpan {
                    token_id: 0,
                    char_start: at,
                    char_end: at + l,
                };
                at += l;
                s
            })
            .collect()
    }

    fn token_selection(indices: Vec<usize>, total: usize) -> TokenSelection {
        TokenSelection {
            budget: indices.len(),
            indices,
            windows: Vec::new(),
            total,
        }
    }

    #[test]
    fn mapping_identity_and_overlap() {
        let a = spans(&[2, 3, 1, 4]);
        let plan = map_selection(&token_selection(vec![1, 3], 4), &a, &a, 5).unwrap();
        assert_eq!(plan.indices, vec![6, 8]);

        // aux [0,4) [4,6) [6,8) against primary [0,2) [2,5) [5,8).
        let aux = spans(&[4, 2, 2]);
        let primary = spans(&[2, 3, 3]);
        let plan = map_selection(&token_selection(vec![0], 3), &aux, &primary, 0).unwrap();
        assert_eq!(plan.indices, vec![0, 1]);
        // One aux token of three (1/3) becomes two primary tokens of three.
        assert!(plan.effective_ratio > 1.0 / 3.0);
        assert_eq!(plan.effective_ratio, 2.0 / 3.0);

        let empty = map_selection(&token_selection(vec![], 3), &aux, &primary, 0).unwrap();
        assert!(empty.indices.is_empty());
        assert!(matches!(
            map_selection(&token_selection(vec![0], 3), &aux, &spans(&[2, 3]), 0),
            Err(Error::CoverageMismatch { .. })
        ));
    }

    #[test]
    fn random_plan_contract() {
        let a = random_select(50, 3, 0.3, 9).unwrap();
        assert_eq!(a.len(), 15);
        assert_eq!(a, random_select(50, 3, 0.3, 9).unwrap());
        assert!(a.indices.windows(2).all(|w| w[0] < w[1]));
        assert!(a.indices.iter().all(|&i| (3..53).contains(&i)));
        assert_ne!(a, random_select(50, 3, 0.3, 10).unwrap());
    }

    fn tiny_aux() -> Model {
        let mut cfg = ModelConfig::toy_auxiliary(40, "t");
        cfg.d_model = 16;
        cfg.d_head = 8;
        Model::init(cfg, 11).unwrap()
    }

    #[test]
    fn aux_scores_match_cache_free_forward() {
        let aux = tiny_aux();
        let prefix = [1u32, 2, 3];
        let chunk_ids = [[4u32, 5, 6, 7], [8, 9, 10, 11]];
        let query = [12u32, 13, 14];
        let mut t = Trace::default();
        let chunks: Vec<_> = chunk_ids
            .iter()
            .map(|c| aux.prefill_chunk(&prefix, c, &mut t).unwrap())
            .collect();
        let scores = aux_score_tokens(&aux, &chunks, &query, &mut t).unwrap();
        assert_eq!(scores.len(), 8);

        let last = aux.config().n_layers - 1;
        let mut expect = Vec::new();
        for c in &chunk_ids {
            let ids: Vec<u32> = prefix.iter().chain(c).chain(&query).copied().collect();
            let out = aux
                .prefill_full(&ids, Capture::Layers(vec![last]), &mut Trace::default())
                .unwrap();
            let heads = out.maps.unwrap().layers[last].clone().unwrap();
            let q0 = prefix.len() + c.len();
            for col in prefix.len()..q0 {
                let mut s = 0.0f64;
                for row in q0..ids.len() {
                    let mean: f64 = heads.iter().map(|h| h.get(row, col) as f64).sum::<f64>() / heads.len() as f64;
                    s += mean;
                }
                expect.push(s / query.len() as f64);
            }
        }
        for (a, b) in scores.scores.iter().zip(&expect) {
            assert!((*a as f64 - b).abs() < 1e-6, "{a} vs {b}");
            assert!(*a >= 0.0 && *a <= 1.0);
        }
    }

    #[test]
    fn aux_scoring_rejects_foreign_caches() {
        let aux = tiny_aux();
        let other = Model::init(aux.config().clone(), 12).unwrap();
        let c = other.prefill_chunk(&[1], &[2, 3], &mut Trace::default()).unwrap();
        assert!(aux_score_tokens(&aux, std::slice::from_ref(&c), &[4], &mut Trace::default()).is_err());
        assert!(aux_score_tokens(&other, &[c], &[], &mut Trace::default()).is_err());
    }

    #[test]
    fn cacheblend_single_chunk_has_no_discrepancy() {
        let aux = tiny_aux();
        let mut t = Trace::default();
        let c = aux.prefill_chunk(&[1, 2], &[3, 4, 5, 6, 7], &mut t).unwrap();
        let merged = merge_caches(&[c], &aux.config().rope(), &mut t).unwrap();
        let out = cacheblend_select(&aux, &merged, 0.4, &mut t).unwrap();
        assert!(out.discrepancies.iter().all(|&d| d < 1e-5));
        assert_eq!(out.plan.len(), 2);
        assert_eq!(out.plan.indices, vec![2, 3]);
    }

    proptest! {
        #[test]
        fn selection_respects_budget_and_windows(
            raw in prop::collection::vec(0u8..20, 1..64),
            split in 0usize..64,
            ratio in 0.0f64..=1.0,
            expand in any::<bool>(),
        ) {
            let n = raw.len();
            let split = split.min(n - 1).max(1).min(n);
            let lens: Vec<usize> = if split < n { vec![split, n - split] } else { vec![n] };
            let s = ImportanceScores::new(raw.iter().map(|&x| x as f32).collect(), lens).unwrap();
            let cfg = SelectionConfig { expand_full_window: expand, ..sel(ratio) };
            let out = select_tokens(&s, &cfg).unwrap();
            let top = top_k_indices(&s.scores, out.budget);
            if !expand {
                prop_assert!(out.indices.iter().all(|i| top.binary_search(i).is_ok()));
                prop_assert!(out.effective_ratio() <= ratio + 1.0 / n as f64);
                prop_assert!(out.indices.len() <= out.budget);
            }
            for w in &out.windows {
                if w.kept {
                    prop_assert!(w.selected >= cfg.window_threshold);
                } else {
                    prop_assert!(out.indices.iter().all(|&i| i < w.start || i >= w.end));
                }
            }
        }
    }
}
