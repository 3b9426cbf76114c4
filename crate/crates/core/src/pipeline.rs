//! End-to-end prefill strategies over precomputed chunk caches, and the
//! multiply-accumulate accounting of each stage.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv_store::{concat_caches, merge_caches, CacheDir, ChunkCache, MergedCache};
use crate::model::{Activation, Capture, LayerCache, Model, ModelConfig};
use crate::selector::{
    aux_score_tokens, budget, cacheblend_select, map_selection, random_select, select_tokens, SelectionConfig,
    SelectionPlan,
};
use crate::tensor::AttentionKnobs;
use crate::tokenizer::{TokenSpan, Tokenizer};
use crate::trace::{OpKind, Stage, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApeConfig {
    pub temperature: f32,
    pub scale: f32,
}

impl Default for ApeConfig {
    fn default() -> Self {
        Self {
            temperature: 0.9,
            scale: 0.9,
        }
    }
}

impl ApeConfig {
    pub fn knobs(&self) -> AttentionKnobs {
        AttentionKnobs {
            temperature: self.temperature,
            scale: self.scale,
        }
    }
}

/// Prompt chunks tokenized and cached by one model.
#[derive(Debug, Clone)]
pub struct PreparedChunks {
    pub tokenizer: Tokenizer,
    pub prefix_ids: Vec<u32>,
    pub chunk_ids: Vec<Vec<u32>>,
    /// Token spans over the concatenated chunk text (prefix excluded).
    pub spans: Vec<TokenSpan>,
    pub caches: Vec<ChunkCache>,
    /// Concatenated chunk text the spans refer to.
    pub text: String,
    pub precompute: Trace,
}

impl PreparedChunks {
    /// Tokenizes each chunk separately and builds its cache behind `prefix`.
    pub fn build(model: &Model, tokenizer: &Tokenizer, prefix: &str, chunks: &[String]) -> Result<Self> {
        Self::build_with_store(model, tokenizer, prefix, chunks, None)
    }

    /// As `build`, but reuses caches found in `store` and saves new ones
    /// there. `precompute` only counts chunks that were computed.
    pub fn build_with_store(
        model: &Model,
        tokenizer: &Tokenizer,
        prefix: &str,
        chunks: &[String],
        store: Option<&CacheDir>,
    ) -> Result<Self> {
        if tokenizer.id() != model.config().tokenizer_id {
            return Err(Error::InvalidArgument(format!(
                "tokenizer `{}` does not match model tokenizer `{}`",
                tokenizer.id(),
                model.config().tokenizer_id
            )));
        }
        if chunks.is_empty() {
            return Err(Error::InvalidArgument("at least one chunk is required".into()));
        }
        let prefix_ids = tokenizer.encode(prefix)?;
        let mut spans = Vec::new();
        let mut chunk_ids = Vec::with_capacity(chunks.len());
        let mut offset = 0;
        for c in chunks {
            let s = tokenizer.encode_with_offsets(c)?;
            chunk_ids.push(s.iter().map(|t| t.token_id).collect::<Vec<_>>());
            spans.extend(s.into_iter().map(|t| t.shifted(offset)));
            offset += c.len();
        }
        let fp = model.fingerprint();
        let built: Vec<(ChunkCache, Trace)> = chunk_ids
            .par_iter()
            .map(|ids| {
                let mut t = Trace::new(Stage::ChunkPrecompute);
                if let Some(hit) = store
                    .map(|s| s.get(&fp, tokenizer.id(), &prefix_ids, ids))
                    .transpose()?
                    .flatten()
                {
                    return Ok((hit, t));
                }
                let cache = model.prefill_chunk(&prefix_ids, ids, &mut t)?;
                if let Some(s) = store {
                    s.put(&cache)?;
                }
                Ok((cache, t))
            })
            .collect::<Result<_>>()?;
        let mut precompute = Trace::new(Stage::ChunkPrecompute);
        let mut caches = Vec::with_capacity(built.len());
        for (c, t) in built {
            caches.push(c);
            precompute.append(t);
        }
        Ok(Self {
            tokenizer: tokenizer.clone(),
            prefix_ids,
            chunk_ids,
            spans,
            caches,
            text: chunks.concat(),
            precompute,
        })
    }

    /// Prefix followed by every chunk, as one flat token list.
    pub fn flat_ids(&self) -> Vec<u32> {
        let mut out = self.prefix_ids.clone();
        for c in &self.chunk_ids {
            out.extend_from_slice(c);
        }
        out
    }

    pub fn total_chunk_tokens(&self) -> usize {
        self.chunk_ids.iter().map(Vec::len).sum()
    }
}

/// MACs charged to one stage, split by kernel family.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageMacs {
    pub linear: u64,
    pub attention: u64,
    pub rotary: u64,
}

impl StageMacs {
    pub fn total(&self) -> u64 {
        self.linear + self.attention + self.rotary
    }

    fn add(&mut self, op: OpKind, macs: u64) {
        match op {
            OpKind::Linear => self.linear += macs,
            OpKind::AttentionScore | OpKind::AttentionValue => self.attention += macs,
            OpKind::Rotary => self.rotary += macs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    /// Offline chunk cache construction; excluded from `total`.
    pub chunk_precompute: StageMacs,
    pub prefill: StageMacs,
    pub selection: StageMacs,
    pub recompute: StageMacs,
    pub merge_overhead: StageMacs,
    pub decode: StageMacs,
    pub total: u64,
    /// Closed-form MACs of full-attention prefill over the same prompt.
    pub full_reference: Option<u64>,
    pub ratio_vs_full: Option<f64>,
}

impl FlopReport {
    pub fn with_reference(mut self, full: u64) -> Self {
        self.full_reference = Some(full);
        self.ratio_vs_full = (full > 0).then(|| self.total as f64 / full as f64);
        self
    }

    pub fn stage(&self, stage: Stage) -> StageMacs {
        match stage {
            Stage::ChunkPrecompute => self.chunk_precompute,
            Stage::Prefill => self.prefill,
            Stage::Selection => self.selection,
            Stage::Recompute => self.recompute,
            Stage::MergeOverhead => self.merge_overhead,
            Stage::Decode => self.decode,
        }
    }
}

/// Exact MAC totals from a recorded trace.
pub fn count_flops(trace: &Trace) -> FlopReport {
    let mut by_stage: BTreeMap<Stage, StageMacs> = BTreeMap::new();
    for e in trace.events() {
        by_stage.entry(e.stage).or_default().add(e.op, e.macs());
    }
    let get = |s| by_stage.get(&s).copied().unwrap_or_default();
    let mut report = FlopReport {
        chunk_precompute: get(Stage::ChunkPrecompute),
        prefill: get(Stage::Prefill),
        selection: get(Stage::Selection),
        recompute: get(Stage::Recompute),
        merge_overhead: get(Stage::MergeOverhead),
        decode: get(Stage::Decode),
        total: 0,
        full_reference: None,
        ratio_vs_full: None,
    };
    report.total = [
        report.prefill,
        report.selection,
        report.recompute,
        report.merge_overhead,
        report.decode,
    ]
    .iter()
    .map(StageMacs::total)
    .sum();
    report
}

/// Closed-form MACs of a causal full prefill of `len` tokens, including
/// the output head for the final row.
pub fn full_prefill_macs(config: &ModelConfig, len: usize) -> StageMacs {
    let (l, d, q, kv, ff) = (
        len as u64,
        config.d_model as u64,
        config.q_dim() as u64,
        config.kv_dim() as u64,
        config.d_ff as u64,
    );
    let up = match config.activation {
        Activation::Gelu => ff,
        Activation::SwiGlu => 2 * ff,
    };
    let per_layer_linear = l * d * (q + 2 * kv) + l * q * d + l * d * up + l * ff * d;
    let pairs = l * (l + 1) / 2;
    let per_layer_attention = 2 * pairs * config.n_heads as u64 * config.d_head as u64;
    let per_layer_rotary = l * (q + kv) * 2;
    let layers = config.n_layers as u64;
    StageMacs {
        linear: layers * per_layer_linear + d * config.vocab_size as u64,
        attention: layers * per_layer_attention,
        rotary: layers * per_layer_rotary,
    }
}

#[derive(Debug, Clone)]
pub struct PrefillOutcome {
    /// Assembled prompt cache before the query was appended; `None` for
    /// full attention.
    pub merged: Option<MergedCache>,
    /// Cache including the query rows, ready for decoding.
    pub cache: LayerCache,
    pub logits: Vec<f32>,
    pub flops: FlopReport,
    pub plan: Option<SelectionPlan>,
    pub trace: Trace,
}

/// Ordinary prefill of the flat prompt followed by the query.
pub fn full_prefill(model: &Model, prompt_ids: &[u32], query_ids: &[u32]) -> Result<PrefillOutcome> {
    let ids: Vec<u32> = prompt_ids.iter().chain(query_ids).copied().collect();
    let mut trace = Trace::new(Stage::Prefill);
    let out = model.prefill_full(&ids, Capture::None, &mut trace)?;
    let flops = count_flops(&trace).with_reference(full_prefill_macs(model.config(), ids.len()).total());
    Ok(PrefillOutcome {
        merged: None,
        cache: out.cache,
        logits: out.logits,
        flops,
        plan: None,
        trace,
    })
}

fn finish(
    model: &Model,
    merged: MergedCache,
    plan: Option<SelectionPlan>,
    query_ids: &[u32],
    knobs: AttentionKnobs,
    mut trace: Trace,
) -> Result<PrefillOutcome> {
    trace.set_stage(Stage::Decode);
    let mut cache = merged.cache.clone();
    let (logits, _) = model.append_tokens(&mut cache, query_ids, knobs, Capture::None, &mut trace)?;
    let full = full_prefill_macs(model.config(), cache.len()).total();
    Ok(PrefillOutcome {
        merged: Some(merged),
        cache,
        logits,
        flops: count_flops(&trace).with_reference(full),
        plan,
        trace,
    })
}

/// Merges chunk caches and runs the query over them with no recomputation.
pub fn direct_reuse_prefill(model: &Model, chunks: &[ChunkCache], query_ids: &[u32]) -> Result<PrefillOutcome> {
    ape_prefill_with(model, chunks, query_ids, AttentionKnobs::NEUTRAL)
}

/// Direct reuse with the query's attention sharpened by APE's knobs.
pub fn ape_prefill(model: &Model, chunks: &[ChunkCache], query_ids: &[u32], ape: ApeConfig) -> Result<PrefillOutcome> {
    ape_prefill_with(model, chunks, query_ids, ape.knobs())
}

fn ape_prefill_with(
    model: &Model,
    chunks: &[ChunkCache],
    query_ids: &[u32],
    knobs: AttentionKnobs,
) -> Result<PrefillOutcome> {
    check_model(model, chunks)?;
    let mut trace = Trace::new(Stage::MergeOverhead);
    let merged = merge_caches(chunks, &model.config().rope(), &mut trace)?;
    finish(model, merged, None, query_ids, knobs, trace)
}

fn check_model(model: &Model, chunks: &[ChunkCache]) -> Result<()> {
    if chunks.iter().any(|c| c.fingerprint != model.fingerprint()) {
        return Err(Error::IncompatibleCaches(
            "chunk caches were built by a different model".into(),
        ));
    }
    Ok(())
}

/// Auxiliary-guided selective recomputation.
///
/// Merging the primary caches and scoring with the auxiliary model run
/// concurrently and join before the selected rows are recomputed.
pub fn cacheclip_prefill(
    primary: &Model,
    aux: &Model,
    chunks: &PreparedChunks,
    aux_chunks: &PreparedChunks,
    query_text: &str,
    config: &SelectionConfig,
    knobs: AttentionKnobs,
) -> Result<PrefillOutcome> {
    config.validate()?;
    knobs.validate()?;
    check_model(primary, &chunks.caches)?;
    if chunks.text != aux_chunks.text {
        return Err(Error::InvalidArgument(
            "primary and auxiliary chunks cover different text".into(),
        ));
    }
    let query_ids = chunks.tokenizer.encode(query_text)?;
    let aux_query = aux_chunks.tokenizer.encode(query_text)?;
    let scoring_needed = budget(config.recomp_ratio, aux_chunks.total_chunk_tokens()) > 0;

    // rayon::join rather than a scoped thread: callers may already be on a
    // pool worker, and blocking it on a job queued to the same pool deadlocks.
    let (merged, scored) = rayon::join(
        || {
            let mut t = Trace::new(Stage::MergeOverhead);
            merge_caches(&chunks.caches, &primary.config().rope(), &mut t).map(|m| (m, t))
        },
        || {
            scoring_needed.then(|| {
                let mut t = Trace::new(Stage::Selection);
                aux_score_tokens(aux, &aux_chunks.caches, &aux_query, &mut t).map(|sc| (sc, t))
            })
        },
    );
    let (mut merged, mut trace) = merged?;

    let plan = match scored {
        Some(res) => {
            let (scores, t) = res?;
            trace.append(t);
            let selection = select_tokens(&scores, config)?;
            map_selection(&selection, &aux_chunks.spans, &chunks.spans, merged.sink_len())?
        }
        None => SelectionPlan::empty(merged.total_chunk_tokens()),
    };
    trace.set_stage(Stage::Recompute);
    primary.selective_forward(&mut merged, &plan, &mut trace)?;
    finish(primary, merged, Some(plan), &query_ids, knobs, trace)
}

/// Merges the chunks and recomputes a uniformly random sample of chunk
/// rows; an ablation control for the scored selectors.
pub fn random_prefill(
    model: &Model,
    chunks: &[ChunkCache],
    query_ids: &[u32],
    ratio: f64,
    seed: u64,
) -> Result<PrefillOutcome> {
    check_model(model, chunks)?;
    let mut trace = Trace::new(Stage::MergeOverhead);
    let mut merged = merge_caches(chunks, &model.config().rope(), &mut trace)?;
    let plan = random_select(merged.total_chunk_tokens(), merged.sink_len(), ratio, seed)?;
    trace.set_stage(Stage::Recompute);
    model.selective_forward(&mut merged, &plan, &mut trace)?;
    finish(model, merged, Some(plan), query_ids, AttentionKnobs::NEUTRAL, trace)
}

/// CacheBlend: prefix-free chunk caches concatenated behind a standalone
/// sink cache, first layer fully recomputed to rank second-layer value
/// drift, then the top rows recomputed through every layer.
pub fn cacheblend_prefill(
    model: &Model,
    sink: &ChunkCache,
    chunks: &[ChunkCache],
    query_ids: &[u32],
    ratio: f64,
) -> Result<PrefillOutcome> {
    check_model(model, chunks)?;
    check_model(model, std::slice::from_ref(sink))?;
    let mut trace = Trace::new(Stage::MergeOverhead);
    let mut merged = concat_caches(Some(sink), chunks, &model.config().rope(), &mut trace)?;
    trace.set_stage(Stage::Selection);
    let plan = if budget(ratio, merged.total_chunk_tokens()) > 0 {
        cacheblend_select(model, &merged, ratio, &mut trace)?.plan
    } else {
        SelectionPlan::empty(merged.total_chunk_tokens())
    };
    trace.set_stage(Stage::Recompute);
    model.selective_forward(&mut merged, &plan, &mut trace)?;
    finish(model, merged, Some(plan), query_ids, AttentionKnobs::NEUTRAL, trace)
}

/// Sink cache and prefix-free chunk caches for the CacheBlend baseline.
pub fn cacheblend_caches(model: &Model, prepared: &PreparedChunks) -> Result<(ChunkCache, Vec<ChunkCache>)> {
    if prepared.prefix_ids.is_empty() {
        return Err(Error::EmptyInput("sink prefix"));
    }
    let mut t = Trace::new(Stage::ChunkPrecompute);
    let sink = model.prefill_chunk(&[], &prepared.prefix_ids, &mut t)?;
    let chunks = prepared
        .chunk_ids
        .par_iter()
        .map(|ids| model.prefill_chunk(&[], ids, &mut Trace::new(Stage::ChunkPrecompute)))
        .collect::<Result<Vec<_>>>()?;
    Ok((sink, chunks))
}
