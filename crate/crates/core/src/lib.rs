//! KV-cache reuse for retrieval-style prompts: precomputed chunk caches are
//! merged behind one shared attention sink, and a small auxiliary model picks
//! which chunk tokens the primary model recomputes.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod bench;
pub mod error;
pub mod fixtures;
pub mod kv_store;
pub mod model;
pub mod pipeline;
pub mod selector;
pub mod tensor;
pub mod tokenizer;
pub mod trace;

pub use error::{Error, Result};
pub use kv_store::{merge_caches, ChunkCache, MergedCache};
pub use model::{Capture, LayerCache, Model, ModelConfig};
pub use selector::{SelectionConfig, SelectionPlan};
pub use tokenizer::Tokenizer;
pub use trace::{Stage, Trace};
