//! Deterministic decoder-only transformer: pre-norm blocks with rotary
//! multi-head attention (optionally grouped KV heads) and a two-layer MLP.
//!
//! All forward entry points funnel into [`Model::forward_rows`], which runs
//! a batch of token rows through the layers against a key/value bank. At
//! each layer the batch's fresh K/V rows are written into the bank first
//! (appending or overwriting), then every batch query attends to the bank
//! rows whose position does not exceed its own. Full prefill, decoding,
//! query extension and selective recomputation are all instances of it.

mod weights;

pub use weights::{load_weights, save_weights, TensorEntry, WeightManifest, MANIFEST_FILE, WEIGHTS_FORMAT_VERSION};

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kv_store::{ChunkCache, MergedCache};
use crate::selector::SelectionPlan;
use crate::tensor::{attend_row, gelu, rms_norm, silu, vec_matmul, AttentionKnobs, Matrix, RopeParams};
use crate::trace::Trace;

/// MLP nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// `down(gelu(up(x)))`, tanh-approximated GELU.
    #[default]
    Gelu,
    /// `down(silu(gate(x)) ⊙ up(x))`.
    SwiGlu,
}

fn default_norm_eps() -> f32 {
    1e-5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    /// Key/value heads; defaults to `n_heads`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_kv_heads: Option<usize>,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub rope_base: f64,
    pub tokenizer_id: String,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f32,
    #[serde(default)]
    pub activation: Activation,
    /// Q/K/V projections carry a bias.
    #[serde(default)]
    pub attn_bias: bool,
    /// Output head reuses the embedding matrix.
    #[serde(default)]
    pub tie_embeddings: bool,
}

impl ModelConfig {
    /// Compact config for the primary toy model.
    pub fn toy_primary(vocab_size: usize, tokenizer_id: impl Into<String>) -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            n_kv_heads: None,
            d_model: 64,
            d_head: 16,
            d_ff: 128,
            vocab_size,
            rope_base: 10_000.0,
            tokenizer_id: tokenizer_id.into(),
            norm_eps: default_norm_eps(),
            activation: Activation::Gelu,
            attn_bias: false,
            tie_embeddings: false,
        }
    }

    /// Smaller config for the auxiliary toy model.
    pub fn toy_auxiliary(vocab_size: usize, tokenizer_id: impl Into<String>) -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            n_kv_heads: None,
            d_model: 32,
            d_head: 16,
            d_ff: 64,
            vocab_size,
            rope_base: 10_000.0,
            tokenizer_id: tokenizer_id.into(),
            norm_eps: default_norm_eps(),
            activation: Activation::Gelu,
            attn_bias: false,
            tie_embeddings: false,
        }
    }

    pub fn kv_heads(&self) -> usize {
        self.n_kv_heads.unwrap_or(self.n_heads)
    }

    pub fn q_dim(&self) -> usize {
        self.n_heads * self.d_head
    }

    pub fn kv_dim(&self) -> usize {
        self.kv_heads() * self.d_head
    }

    pub fn rope(&self) -> RopeParams {
        RopeParams {
            head_dim: self.d_head,
            base: self.rope_base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.kv_heads()),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_ff", self.d_ff),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::InvalidConfig(format!(
                "vocab_size must be at least 2, got {}",
                self.vocab_size
            )));
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::InvalidConfig(format!(
                "d_model ({}) != n_heads ({}) × d_head ({})",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if !self.n_heads.is_multiple_of(self.kv_heads()) {
            return Err(Error::InvalidConfig(format!(
                "n_heads ({}) must be a multiple of n_kv_heads ({})",
                self.n_heads,
                self.kv_heads()
            )));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::InvalidConfig("norm_eps must be positive".into()));
        }
        self.rope().validate().map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        let (d, q, kv, ff) = (self.d_model, self.q_dim(), self.kv_dim(), self.d_ff);
        let attn = d * q + 2 * d * kv + q * d + if self.attn_bias { q + 2 * kv } else { 0 };
        let mlp = match self.activation {
            Activation::Gelu => 2 * d * ff,
            Activation::SwiGlu => 3 * d * ff,
        };
        let per_layer = 2 * d + attn + mlp;
        let embed = self.vocab_size * d;
        let head = if self.tie_embeddings { 0 } else { d * self.vocab_size };
        embed + self.n_layers * per_layer + d + head
    }
}

/// SHA-256 digest identifying a model's config and weights.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Fingerprint(pub [u8; 32]);

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fingerprint({})", &self.to_string()[..16])
    }
}

impl Serialize for Fingerprint {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Fingerprint {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        if s.len() != 64 {
            return Err(serde::de::Error::custom("fingerprint must be 64 hex chars"));
        }
        let mut out = [0u8; 32];
        for (i, byte) in out.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(serde::de::Error::custom)?;
        }
        Ok(Fingerprint(out))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub bq: Option<Vec<f32>>,
    pub bk: Option<Vec<f32>>,
    pub bv: Option<Vec<f32>>,
    pub wo: Matrix,
    pub mlp_norm: Vec<f32>,
    pub w_up: Matrix,
    pub w_gate: Option<Matrix>,
    pub w_down: Matrix,
}

/// Transformer parameters. Projection matrices are stored `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    embed: Matrix,
    layers: Vec<LayerWeights>,
    final_norm: Vec<f32>,
    lm_head: Option<Matrix>,
    fingerprint: Fingerprint,
}

/// Working key/value cache: keys are stored rotated to `positions`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    pub keys: Vec<Matrix>,
    pub values: Vec<Matrix>,
    pub positions: Vec<usize>,
    pub token_ids: Vec<u32>,
}

impl LayerCache {
    pub fn empty(n_layers: usize, kv_dim: usize) -> Self {
        Self {
            keys: (0..n_layers).map(|_| Matrix::zeros(0, kv_dim)).collect(),
            values: (0..n_layers).map(|_| Matrix::zeros(0, kv_dim)).collect(),
            positions: Vec::new(),
            token_ids: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn n_layers(&self) -> usize {
        self.keys.len()
    }

    pub fn last_position(&self) -> Option<usize> {
        self.positions.last().copied()
    }

    /// Exact equality of every stored bit.
    pub fn bit_eq(&self, other: &LayerCache) -> bool {
        let bits =
            |ms: &[Matrix]| -> Vec<u32> { ms.iter().flat_map(|m| m.data().iter().map(|v| v.to_bits())).collect() };
        self.positions == other.positions
            && self.token_ids == other.token_ids
            && bits(&self.keys) == bits(&other.keys)
            && bits(&self.values) == bits(&other.values)
    }
}

/// Which layers' attention weights a forward pass should capture.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub enum Capture {
    #[default]
    None,
    All,
    Layers(Vec<usize>),
}

impl Capture {
    fn wants(&self, layer: usize) -> bool {
        match self {
            Capture::None => false,
            Capture::All => true,
            Capture::Layers(ls) => ls.contains(&layer),
        }
    }

    fn is_none(&self) -> bool {
        matches!(self, Capture::None)
    }
}

/// Captured attention weights. `layers[l][h]` is `[batch rows, bank rows]`
/// with masked entries zero; `None` for layers not captured.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps {
    pub layers: Vec<Option<Vec<Matrix>>>,
    /// Position of each captured query row.
    pub query_positions: Vec<usize>,
}

impl AttentionMaps {
    /// The head-averaged weight row of batch row `row` at `layer`.
    pub fn head_mean_row(&self, layer: usize, row: usize) -> Option<Vec<f32>> {
        let heads = self.layers.get(layer)?.as_ref()?;
        let n = heads.first()?.cols();
        let mut out = vec![0.0f32; n];
        for h in heads {
            for (o, &w) in out.iter_mut().zip(h.row(row)) {
                *o += w;
            }
        }
        let inv = 1.0 / heads.len() as f32;
        out.iter_mut().for_each(|o| *o *= inv);
        Some(out)
    }
}

#[derive(Debug, Clone)]
pub struct PrefillOutput {
    pub cache: LayerCache,
    pub logits: Vec<f32>,
    pub maps: Option<AttentionMaps>,
}

/// Where a batch's fresh K/V rows go in the bank.
enum Placement<'a> {
    Append,
    Overwrite(&'a [usize]),
}

impl Model {
    /// Builds a model with weights drawn from a seeded generator.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, q, kv, ff) = (config.d_model, config.q_dim(), config.kv_dim(), config.d_ff);
        let mut normal = |rows: usize, cols: usize, std: f32| -> Matrix {
            let dist = Normal::new(0.0f32, std).expect("positive std");
            let data = (0..rows * cols).map(|_| dist.sample(&mut rng)).collect();
            Matrix::new(rows, cols, data).expect("sampled values are finite")
        };
        let embed = normal(config.vocab_size, d, 1.0);
        let inv_d = 1.0 / (d as f32).sqrt();
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            // Query/key gain above 1 keeps toy attention away from uniform.
            let wq = normal(d, q, 2.0 * inv_d);
            let wk = normal(d, kv, 2.0 * inv_d);
            let wv = normal(d, kv, inv_d);
            let wo = normal(q, d, 1.0 / (q as f32).sqrt());
            let w_up = normal(d, ff, inv_d);
            let w_gate = (config.activation == Activation::SwiGlu).then(|| normal(d, ff, inv_d));
            let w_down = normal(ff, d, 1.0 / (ff as f32).sqrt());
            let (bq, bk, bv) = if config.attn_bias {
                (
                    Some(normal(1, q, 0.1).into_data()),
                    Some(normal(1, kv, 0.1).into_data()),
                    Some(normal(1, kv, 0.1).into_data()),
                )
            } else {
                (None, None, None)
            };
            layers.push(LayerWeights {
                attn_norm: vec![1.0; d],
                wq,
                wk,
                wv,
                bq,
                bk,
                bv,
                wo,
                mlp_norm: vec![1.0; d],
                w_up,
                w_gate,
                w_down,
            });
        }
        let lm_head = (!config.tie_embeddings).then(|| normal(d, config.vocab_size, inv_d));
        Self::from_parts(config, embed, layers, vec![1.0; d], lm_head)
    }

    /// Assembles a model from explicit tensors, validating every shape.
    pub fn from_parts(
        config: ModelConfig,
        embed: Matrix,
        layers: Vec<LayerWeights>,
        final_norm: Vec<f32>,
        lm_head: Option<Matrix>,
    ) -> Result<Self> {
        config.validate()?;
        let mut model = Self {
            config,
            embed,
            layers,
            final_norm,
            lm_head,
            fingerprint: Fingerprint::default(),
        };
        model.check_shapes()?;
        model.fingerprint = model.compute_fingerprint();
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        let mut problems = Vec::new();
        for (name, shape, expect) in self.tensor_shapes() {
            if shape != expect {
                problems.push(format!("{name}: {shape:?} != {expect:?}"));
            }
        }
        if self.layers.len() != c.n_layers {
            problems.push(format!("{} layers, config says {}", self.layers.len(), c.n_layers));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                name: "model".into(),
                detail: problems.join("; "),
            })
        }
    }

    /// `(name, actual shape, expected shape)` for every tensor present.
    fn tensor_shapes(&self) -> Vec<(String, Vec<usize>, Vec<usize>)> {
        self.named_tensors()
            .into_iter()
            .map(|(name, shape, _)| {
                let expect = weights::expected_shape(&self.config, &name).unwrap_or_default();
                (name, shape, expect)
            })
            .collect()
    }

    /// Every tensor in canonical order, as `(name, shape, data)`.
    pub(crate) fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        let mut out: Vec<(String, Vec<usize>, &[f32])> = Vec::new();
        let mat = |m: &Matrix| vec![m.rows(), m.cols()];
        out.push(("embed".into(), mat(&self.embed), self.embed.data()));
        for (i, l) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("layers.{i}.{s}");
            out.push((p("attn_norm"), vec![l.attn_norm.len()], &l.attn_norm));
            out.push((p("wq"), mat(&l.wq), l.wq.data()));
            out.push((p("wk"), mat(&l.wk), l.wk.data()));
            out.push((p("wv"), mat(&l.wv), l.wv.data()));
            for (s, b) in [("bq", &l.bq), ("bk", &l.bk), ("bv", &l.bv)] {
                if let Some(b) = b {
                    out.push((p(s), vec![b.len()], b));
                }
            }
            out.push((p("wo"), mat(&l.wo), l.wo.data()));
            out.push((p("mlp_norm"), vec![l.mlp_norm.len()], &l.mlp_norm));
            out.push((p("w_up"), mat(&l.w_up), l.w_up.data()));
            if let Some(g) = &l.w_gate {
                out.push((p("w_gate"), mat(g), g.data()));
            }
            out.push((p("w_down"), mat(&l.w_down), l.w_down.data()));
        }
        out.push(("final_norm".into(), vec![self.final_norm.len()], &self.final_norm));
        if let Some(h) = &self.lm_head {
            out.push(("lm_head".into(), mat(h), h.data()));
        }
        out
    }

    fn compute_fingerprint(&self) -> Fingerprint {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for (name, shape, data) in self.named_tensors() {
            h.update(name.as_bytes());
            for s in shape {
                h.update((s as u64).to_le_bytes());
            }
            for v in data {
                h.update(v.to_le_bytes());
            }
        }
        Fingerprint(h.finalize().into())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn fingerprint(&self) -> Fingerprint {
        self.fingerprint
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    pub fn parameter_total(&self) -> usize {
        self.named_tensors().iter().map(|(_, _, d)| d.len()).sum()
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::OutOfVocab {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    pub fn empty_cache(&self) -> LayerCache {
        LayerCache::empty(self.config.n_layers, self.config.kv_dim())
    }

    /// Full-attention prefill of `ids` at positions `0..n`.
    pub fn prefill_full(&self, ids: &[u32], capture: Capture, trace: &mut Trace) -> Result<PrefillOutput> {
        if ids.is_empty() {
            return Err(Error::EmptyInput("prefill token list"));
        }
        let mut cache = self.empty_cache();
        let (logits, maps) = self.append_tokens(&mut cache, ids, AttentionKnobs::NEUTRAL, capture, trace)?;
        Ok(PrefillOutput { cache, logits, maps })
    }

    /// Computes the cache of `prefix ++ chunk` at local positions `0..len`,
    /// keeping keys unrotated.
    pub fn prefill_chunk(&self, prefix_ids: &[u32], chunk_ids: &[u32], trace: &mut Trace) -> Result<ChunkCache> {
        if chunk_ids.is_empty() {
            return Err(Error::EmptyInput("chunk token list"));
        }
        let ids: Vec<u32> = prefix_ids.iter().chain(chunk_ids).copied().collect();
        self.check_ids(&ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let mut cache = self.empty_cache();
        let mut raw_keys = Vec::with_capacity(self.config.n_layers);
        self.forward_rows(
            &mut cache,
            &ids,
            &positions,
            Placement::Append,
            0..self.config.n_layers,
            AttentionKnobs::NEUTRAL,
            &Capture::None,
            Some(&mut raw_keys),
            trace,
        )?;
        Ok(ChunkCache {
            keys: raw_keys,
            values: cache.values,
            prefix_len: prefix_ids.len(),
            token_ids: ids,
            tokenizer_id: self.config.tokenizer_id.clone(),
            fingerprint: self.fingerprint,
        })
    }

    /// Appends one token at `position` and returns next-token logits.
    pub fn decode_step(
        &self,
        cache: &mut LayerCache,
        token_id: u32,
        position: usize,
        trace: &mut Trace,
    ) -> Result<Vec<f32>> {
        if let Some(last) = cache.last_position() {
            if position <= last {
                return Err(Error::NonMonotonePosition { position, last });
            }
        }
        self.check_ids(&[token_id])?;
        let hidden = self.forward_rows(
            cache,
            &[token_id],
            &[position],
            Placement::Append,
            0..self.config.n_layers,
            AttentionKnobs::NEUTRAL,
            &Capture::None,
            None,
            trace,
        )?;
        Ok(self.logits(hidden.row(0), trace))
    }

    /// Appends `ids` at the positions following the cache's last one and
    /// returns the logits after the final appended token.
    pub fn append_tokens(
        &self,
        cache: &mut LayerCache,
        ids: &[u32],
        knobs: AttentionKnobs,
        capture: Capture,
        trace: &mut Trace,
    ) -> Result<(Vec<f32>, Option<AttentionMaps>)> {
        if ids.is_empty() {
            return Err(Error::EmptyInput("appended token list"));
        }
        self.check_ids(ids)?;
        knobs.validate()?;
        let start = cache.last_position().map_or(0, |p| p + 1);
        let positions: Vec<usize> = (start..start + ids.len()).collect();
        let mut maps = (!capture.is_none()).then(|| AttentionMaps {
            layers: vec![None; self.config.n_layers],
            query_positions: positions.clone(),
        });
        let hidden = self.forward_rows_capturing(
            cache,
            ids,
            &positions,
            Placement::Append,
            0..self.config.n_layers,
            knobs,
            &capture,
            maps.as_mut(),
            None,
            trace,
        )?;
        let logits = self.logits(hidden.row(ids.len() - 1), trace);
        Ok((logits, maps))
    }

    /// Recomputes the selected merged-cache rows with global context.
    ///
    /// At every layer the selected rows' fresh K/V (rotated to their final
    /// positions) overwrite the cached rows, then the selected queries attend
    /// over the resulting hybrid bank. Unselected rows are never written.
    pub fn selective_forward(&self, merged: &mut MergedCache, plan: &SelectionPlan, trace: &mut Trace) -> Result<()> {
        let rows = plan.indices.as_slice();
        merged.check_selection(rows)?;
        if merged.fingerprint != self.fingerprint {
            return Err(Error::IncompatibleCaches(
                "merged cache was built by a different model".into(),
            ));
        }
        if rows.is_empty() {
            return Ok(());
        }
        let ids: Vec<u32> = rows.iter().map(|&r| merged.cache.token_ids[r]).collect();
        let positions: Vec<usize> = rows.iter().map(|&r| merged.cache.positions[r]).collect();
        self.forward_rows(
            &mut merged.cache,
            &ids,
            &positions,
            Placement::Overwrite(rows),
            0..self.config.n_layers,
            AttentionKnobs::NEUTRAL,
            &Capture::None,
            None,
            trace,
        )?;
        Ok(())
    }

    /// Runs layers `layers` for the given rows, overwriting their K/V in
    /// `cache`; returns the hidden states after the last layer in range.
    pub(crate) fn recompute_rows(
        &self,
        cache: &mut LayerCache,
        rows: &[usize],
        layers: std::ops::Range<usize>,
        trace: &mut Trace,
    ) -> Result<Matrix> {
        let ids: Vec<u32> = rows.iter().map(|&r| cache.token_ids[r]).collect();
        let positions: Vec<usize> = rows.iter().map(|&r| cache.positions[r]).collect();
        self.forward_rows(
            cache,
            &ids,
            &positions,
            Placement::Overwrite(rows),
            layers,
            AttentionKnobs::NEUTRAL,
            &Capture::None,
            None,
            trace,
        )
    }

    /// Value projection of `layer` applied to hidden states entering it.
    pub(crate) fn value_projection(&self, layer: usize, hidden: &Matrix, trace: &mut Trace) -> Matrix {
        let c = &self.config;
        let w = &self.layers[layer];
        let n = hidden.rows();
        let mut normed = Matrix::zeros(n, c.d_model);
        for i in 0..n {
            rms_norm(hidden.row(i), &w.attn_norm, c.norm_eps, normed.row_mut(i));
        }
        let mut v = Matrix::zeros(n, c.kv_dim());
        for i in 0..n {
            vec_matmul(normed.row(i), &w.wv, v.row_mut(i));
        }
        if let Some(b) = &w.bv {
            v.add_row_vector(b);
        }
        trace.linear(Some(layer), n, c.d_model, c.kv_dim());
        v
    }

    /// Final norm and output head for one hidden row.
    pub fn logits(&self, hidden: &[f32], trace: &mut Trace) -> Vec<f32> {
        let c = &self.config;
        let mut normed = vec![0.0; c.d_model];
        rms_norm(hidden, &self.final_norm, c.norm_eps, &mut normed);
        trace.linear(None, 1, c.d_model, c.vocab_size);
        match &self.lm_head {
            Some(head) => {
                let mut out = vec![0.0; c.vocab_size];
                vec_matmul(&normed, head, &mut out);
                out
            }
            None => (0..c.vocab_size)
                .map(|t| crate::tensor::dot(&normed, self.embed.row(t)))
                .collect(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn forward_rows(
        &self,
        cache: &mut LayerCache,
        ids: &[u32],
        positions: &[usize],
        placement: Placement<'_>,
        layers: std::ops::Range<usize>,
        knobs: AttentionKnobs,
        capture: &Capture,
        raw_keys: Option<&mut Vec<Matrix>>,
        trace: &mut Trace,
    ) -> Result<Matrix> {
        self.forward_rows_capturing(
            cache, ids, positions, placement, layers, knobs, capture, None, raw_keys, trace,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn forward_rows_capturing(
        &self,
        cache: &mut LayerCache,
        ids: &[u32],
        positions: &[usize],
        placement: Placement<'_>,
        layers: std::ops::Range<usize>,
        knobs: AttentionKnobs,
        capture: &Capture,
        mut maps: Option<&mut AttentionMaps>,
        mut raw_keys: Option<&mut Vec<Matrix>>,
        trace: &mut Trace,
    ) -> Result<Matrix> {
        let c = &self.config;
        let n = ids.len();
        debug_assert_eq!(n, positions.len());
        if cache.n_layers() != c.n_layers {
            return Err(Error::IncompatibleCaches(format!(
                "cache has {} layers, model has {}",
                cache.n_layers(),
                c.n_layers
            )));
        }
        let targets: Vec<usize> = match placement {
            Placement::Append => {
                if let (Some(last), Some(&first)) = (cache.last_position(), positions.first()) {
                    if first <= last {
                        return Err(Error::NonMonotonePosition { position: first, last });
                    }
                }
                let start = cache.len();
                for m in cache.keys.iter_mut().chain(cache.values.iter_mut()) {
                    m.grow(n);
                }
                cache.positions.extend_from_slice(positions);
                cache.token_ids.extend_from_slice(ids);
                (start..start + n).collect()
            }
            Placement::Overwrite(rows) => rows.to_vec(),
        };

        let rope = c.rope();
        let (d, dh, q_dim, kv_dim) = (c.d_model, c.d_head, c.q_dim(), c.kv_dim());
        let group = c.n_heads / c.kv_heads();
        let factor = knobs.logit_factor(dh);

        let mut hidden = Matrix::zeros(n, d);
        for (i, &id) in ids.iter().enumerate() {
            hidden.row_mut(i).copy_from_slice(self.embed.row(id as usize));
        }
        // Visible bank prefix for each batch row; positions are sorted.
        let visible: Vec<usize> = positions
            .iter()
            .map(|&p| cache.positions.partition_point(|&q| q <= p))
            .collect();
        let pairs: usize = visible.iter().sum();

        let mut normed = Matrix::zeros(n, d);
        let mut q = Matrix::zeros(n, q_dim);
        let mut k = Matrix::zeros(n, kv_dim);
        let mut v = Matrix::zeros(n, kv_dim);
        let mut attn = Matrix::zeros(n, q_dim);
        let mut proj = Matrix::zeros(n, d);
        let mut wbuf = vec![0.0f32; cache.len()];
        let mut head_out = vec![0.0f32; dh];

        for l in layers {
            let w = &self.layers[l];
            for i in 0..n {
                rms_norm(hidden.row(i), &w.attn_norm, c.norm_eps, normed.row_mut(i));
                vec_matmul(normed.row(i), &w.wq, q.row_mut(i));
                vec_matmul(normed.row(i), &w.wk, k.row_mut(i));
                vec_matmul(normed.row(i), &w.wv, v.row_mut(i));
            }
            trace.linear(Some(l), n, d, q_dim + 2 * kv_dim);
            if let Some(b) = &w.bq {
                q.add_row_vector(b);
            }
            if let Some(b) = &w.bk {
                k.add_row_vector(b);
            }
            if let Some(b) = &w.bv {
                v.add_row_vector(b);
            }
            if let Some(raw) = raw_keys.as_deref_mut() {
                raw.push(k.clone());
            }
            for i in 0..n {
                rope.rotate_heads(q.row_mut(i), positions[i]);
                rope.rotate_heads(k.row_mut(i), positions[i]);
            }
            trace.rotary(Some(l), n, q_dim + kv_dim);

            for (i, &t) in targets.iter().enumerate() {
                cache.keys[l].row_mut(t).copy_from_slice(k.row(i));
                cache.values[l].row_mut(t).copy_from_slice(v.row(i));
            }

            let mut captured = capture.wants(l).then(|| vec![Matrix::zeros(n, cache.len()); c.n_heads]);
            let (bank_k, bank_v) = (&cache.keys[l], &cache.values[l]);
            for i in 0..n {
                for h in 0..c.n_heads {
                    let col = (h / group) * dh;
                    let q_head = &q.row(i)[h * dh..(h + 1) * dh];
                    attend_row(
                        q_head,
                        bank_k,
                        bank_v,
                        col,
                        visible[i],
                        factor,
                        &mut wbuf,
                        &mut head_out,
                    );
                    attn.row_mut(i)[h * dh..(h + 1) * dh].copy_from_slice(&head_out);
                    if let Some(maps) = captured.as_mut() {
                        maps[h].row_mut(i)[..visible[i]].copy_from_slice(&wbuf[..visible[i]]);
                    }
                }
            }
            trace.attention(l, pairs * c.n_heads, dh);
            if let (Some(maps), Some(captured)) = (maps.as_deref_mut(), captured) {
                maps.layers[l] = Some(captured);
            }

            for i in 0..n {
                vec_matmul(attn.row(i), &w.wo, proj.row_mut(i));
            }
            trace.linear(Some(l), n, q_dim, d);
            hidden.add_assign(&proj);

            self.mlp(w, &hidden, &mut normed, &mut proj, Some(l), trace);
            hidden.add_assign(&proj);
        }
        Ok(hidden)
    }

    fn mlp(
        &self,
        w: &LayerWeights,
        hidden: &Matrix,
        normed: &mut Matrix,
        out: &mut Matrix,
        layer: Option<usize>,
        trace: &mut Trace,
    ) {
        let c = &self.config;
        let n = hidden.rows();
        let mut up = vec![0.0f32; c.d_ff];
        let mut gate = vec![0.0f32; c.d_ff];
        for i in 0..n {
            rms_norm(hidden.row(i), &w.mlp_norm, c.norm_eps, normed.row_mut(i));
            vec_matmul(normed.row(i), &w.w_up, &mut up);
            match &w.w_gate {
                Some(g) => {
                    vec_matmul(normed.row(i), g, &mut gate);
                    for (u, &gv) in up.iter_mut().zip(&gate) {
                        *u *= silu(gv);
                    }
                }
                None => up.iter_mut().for_each(|u| *u = gelu(*u)),
            }
            vec_matmul(&up, &w.w_down, out.row_mut(i));
        }
        let up_cols = if w.w_gate.is_some() { 2 * c.d_ff } else { c.d_ff };
        trace.linear(layer, n, c.d_model, up_cols);
        trace.linear(layer, n, c.d_ff, c.d_model);
    }
}
