//! Multiply-accumulate trace recorded by every forward pass.

use serde::{Deserialize, Serialize};

/// Pipeline stage a unit of work is charged to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Offline per-chunk cache construction (amortized across requests).
    ChunkPrecompute,
    /// Ordinary full-attention prefill of the whole prompt.
    Prefill,
    /// Token scoring and selection (auxiliary model, or CacheBlend's probe layers).
    Selection,
    /// Selective KV recomputation in the primary model.
    Recompute,
    /// Merging chunk caches: key rotation to final positions.
    MergeOverhead,
    /// Forward of the query tokens over the assembled cache.
    Decode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    /// Dense projection: `rows × inner` by `inner × cols`.
    Linear,
    /// `q·k` products; `rows` is the number of (query, visible key) pairs.
    AttentionScore,
    /// Weighted value sums; same shape convention as the score op.
    AttentionValue,
    /// Rotary embedding; `rows × inner` elements, two MACs per element.
    Rotary,
}

/// One recorded kernel launch with its matrix dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub stage: Stage,
    pub op: OpKind,
    pub layer: Option<usize>,
    pub rows: u64,
    pub inner: u64,
    pub cols: u64,
}

impl TraceEvent {
    pub fn macs(&self) -> u64 {
        self.rows * self.inner * self.cols
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    stage: Stage,
    events: Vec<TraceEvent>,
}

impl Default for Trace {
    fn default() -> Self {
        Self::new(Stage::Prefill)
    }
}

impl Trace {
    pub fn new(stage: Stage) -> Self {
        Self {
            stage,
            events: Vec::new(),
        }
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn set_stage(&mut self, stage: Stage) {
        self.stage = stage;
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn append(&mut self, other: Trace) {
        self.events.extend(other.events);
    }

    pub(crate) fn record(&mut self, op: OpKind, layer: Option<usize>, rows: usize, inner: usize, cols: usize) {
        if rows == 0 || inner == 0 || cols == 0 {
            return;
        }
        self.events.push(TraceEvent {
            stage: self.stage,
            op,
            layer,
            rows: rows as u64,
            inner: inner as u64,
            cols: cols as u64,
        });
    }

    pub(crate) fn linear(&mut self, layer: Option<usize>, rows: usize, inner: usize, cols: usize) {
        self.record(OpKind::Linear, layer, rows, inner, cols);
    }

    pub(crate) fn rotary(&mut self, layer: Option<usize>, rows: usize, width: usize) {
        self.record(OpKind::Rotary, layer, rows, width, 2);
    }

    /// Score and value work for `pairs` (query, key) pairs at head width `d`.
    pub(crate) fn attention(&mut self, layer: usize, pairs: usize, d: usize) {
        self.record(OpKind::AttentionScore, Some(layer), pairs, d, 1);
        self.record(OpKind::AttentionValue, Some(layer), pairs, d, 1);
    }
}
