//! Needle-in-a-haystack cases and the strategy × ratio sweep over them.

pub mod text;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{arc_score, next_token_kl};
use crate::error::{Error, Result};
use crate::model::{load_weights, LayerCache, Model, ModelConfig};
use crate::pipeline::{
    ape_prefill, cacheblend_caches, cacheblend_prefill, cacheclip_prefill, direct_reuse_prefill, full_prefill,
    random_prefill, ApeConfig, FlopReport, PrefillOutcome, PreparedChunks,
};
use crate::selector::{first_window_fraction, SelectionConfig};
use crate::tensor::AttentionKnobs;
use crate::tokenizer::{Tokenizer, AUXILIARY_TOKENIZER_ID, PRIMARY_TOKENIZER_ID};
use crate::trace::Trace;

use text::{ESSAY_SENTENCES, KEY_ADJECTIVES, KEY_NOUNS, NOISE_SENTENCES, SYSTEM_PROMPT};

pub const DEFAULT_CHUNKS: usize = 4;
pub const MIN_LENGTH_TOKENS: usize = 256;
/// Chunk overlap as a fraction of chunk length (50 of 1000 tokens).
pub const OVERLAP_FRACTION: f64 = 0.05;
const MULTI_COUNT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Single1,
    Single2,
    Single3,
    Multikey1,
    Multivalue,
    Multiquery,
}

impl TaskKind {
    pub const ALL: [TaskKind; 6] = [
        TaskKind::Single1,
        TaskKind::Single2,
        TaskKind::Single3,
        TaskKind::Multikey1,
        TaskKind::Multivalue,
        TaskKind::Multiquery,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Single1 => "single1",
            TaskKind::Single2 => "single2",
            TaskKind::Single3 => "single3",
            TaskKind::Multikey1 => "multikey1",
            TaskKind::Multivalue => "multivalue",
            TaskKind::Multiquery => "multiquery",
        }
    }

    fn noise_haystack(self) -> bool {
        self == TaskKind::Single1
    }

    fn uuid_values(self) -> bool {
        self == TaskKind::Single3
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown task `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Needle {
    pub key: String,
    pub value: String,
    pub chunk: usize,
    /// Character range of the value within the haystack.
    pub value_start: usize,
    pub value_end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchCase {
    pub id: String,
    pub task: TaskKind,
    pub seed: u64,
    pub target_tokens: usize,
    pub prefix: String,
    pub chunks: Vec<String>,
    pub query: String,
    pub needles: Vec<Needle>,
    pub references: Vec<String>,
}

impl BenchCase {
    pub fn haystack(&self) -> String {
        self.chunks.concat()
    }
}

struct Filler {
    sentences: &'static [&'static str],
    next: usize,
}

impl Filler {
    fn pull(&mut self) -> &'static str {
        let s = self.sentences[self.next % self.sentences.len()];
        self.next += 1;
        s
    }
}

fn needle_sentence(task: TaskKind, key: &str, value: &str) -> String {
    let kind = if task.uuid_values() { "uuids" } else { "numbers" };
    format!("One of the special magic {kind} for {key} is: {value}.")
}

fn query_text(task: TaskKind, keys: &[String]) -> String {
    let kind = if task.uuid_values() { "uuid" } else { "number" };
    match task {
        TaskKind::Multivalue => format!(
            "\nWhat are all the special magic numbers for {} mentioned in the provided text? Answer:",
            keys[0]
        ),
        TaskKind::Multiquery => {
            let (last, rest) = keys.split_last().expect("keys present");
            format!(
                "\nWhat are all the special magic numbers for {} and {last} mentioned in the provided text? Answer:",
                rest.join(", ")
            )
        }
        _ => format!(
            "\nWhat is the special magic {kind} for {} mentioned in the provided text? Answer:",
            keys[0]
        ),
    }
}

/// Suffix of `text` holding its last `tokens` tokens.
fn token_tail<'a>(tok: &Tokenizer, text: &'a str, tokens: usize) -> Result<&'a str> {
    let spans = tok.encode_with_offsets(text)?;
    if spans.len() <= tokens {
        return Ok(text);
    }
    Ok(&text[spans[spans.len() - tokens].char_start..])
}

/// Generates a case with the default chunk count.
pub fn gen_niah(task: TaskKind, length_tokens: usize, seed: u64) -> Result<BenchCase> {
    gen_niah_with(task, length_tokens, DEFAULT_CHUNKS, seed)
}

/// Builds a haystack of about `length_tokens` primary tokens split into
/// `n_chunks` chunks. Each chunk opens with the last few tokens of the one
/// before it; needles sit in chunk interiors so none falls in an overlap.
pub fn gen_niah_with(task: TaskKind, length_tokens: usize, n_chunks: usize, seed: u64) -> Result<BenchCase> {
    if length_tokens < MIN_LENGTH_TOKENS {
        return Err(Error::InvalidArgument(format!(
            "length {length_tokens} is below the minimum of {MIN_LENGTH_TOKENS} tokens"
        )));
    }
    if n_chunks == 0 {
        return Err(Error::InvalidArgument("at least one chunk is required".into()));
    }
    let n_needles = match task {
        TaskKind::Single1 | TaskKind::Single2 | TaskKind::Single3 => 1,
        _ => MULTI_COUNT,
    };
    if task == TaskKind::Multivalue && n_chunks < n_needles {
        return Err(Error::InvalidArgument(format!(
            "multivalue places {n_needles} values in distinct chunks but only {n_chunks} chunks were requested"
        )));
    }
    let tok = Tokenizer::primary();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ task as u64);

    let mut keys: Vec<String> = Vec::new();
    while keys.len() < n_needles {
        let k = format!(
            "{}-{}",
            KEY_ADJECTIVES[rng.random_range(0..KEY_ADJECTIVES.len())],
            KEY_NOUNS[rng.random_range(0..KEY_NOUNS.len())]
        );
        if !keys.contains(&k) {
            keys.push(k);
        }
        if task == TaskKind::Multivalue {
            break;
        }
    }
    let mut values: Vec<String> = Vec::new();
    while values.len() < n_needles {
        let v = if task.uuid_values() {
            uuid::Builder::from_random_bytes(rng.random()).into_uuid().to_string()
        } else {
            rng.random_range(1_000_000u32..10_000_000).to_string()
        };
        if !values.contains(&v) {
            values.push(v);
        }
    }
    let needle_keys: Vec<String> = (0..n_needles)
        .map(|i| keys[if task == TaskKind::Multivalue { 0 } else { i }].clone())
        .collect();

    let mut chunk_order: Vec<usize> = (0..n_chunks).collect();
    chunk_order.shuffle(&mut rng);
    let placement: Vec<usize> = (0..n_needles)
        .map(|i| {
            if n_needles <= n_chunks {
                chunk_order[i]
            } else {
                rng.random_range(0..n_chunks)
            }
        })
        .collect();

    let (queried, references): (Vec<String>, Vec<String>) = match task {
        TaskKind::Multikey1 => {
            let q = rng.random_range(0..n_needles);
            (vec![keys[q].clone()], vec![values[q].clone()])
        }
        TaskKind::Multivalue => (vec![keys[0].clone()], values.clone()),
        _ => (keys.clone(), values.clone()),
    };

    let sentences = if task.noise_haystack() {
        NOISE_SENTENCES
    } else {
        ESSAY_SENTENCES
    };
    let mut filler = Filler {
        sentences,
        next: if task.noise_haystack() {
            0
        } else {
            rng.random_range(0..sentences.len())
        },
    };
    let budget = length_tokens / n_chunks;
    let overlap = ((budget as f64 * OVERLAP_FRACTION).round() as usize).max(1);
    let count = |s: &str| -> Result<usize> { Ok(tok.encode(s)?.len()) };

    let mut chunks: Vec<String> = Vec::with_capacity(n_chunks);
    let mut needles_out: Vec<Needle> = Vec::new();
    let mut chunk_start = 0usize;
    for c in 0..n_chunks {
        let head = match chunks.last() {
            Some(prev) => token_tail(&tok, prev, overlap)?.to_string(),
            None => String::new(),
        };
        let mine: Vec<usize> = (0..n_needles).filter(|&i| placement[i] == c).collect();
        let needle_texts: Vec<String> = mine
            .iter()
            .map(|&i| needle_sentence(task, &needle_keys[i], &values[i]))
            .collect();
        let fixed = count(&head)?
            + needle_texts
                .iter()
                .map(|s| count(s).map(|n| n + 1))
                .sum::<Result<usize>>()?;
        if fixed + overlap > budget {
            return Err(Error::InvalidArgument(format!(
                "chunk budget of {budget} tokens cannot hold its needles; use a longer length or fewer chunks"
            )));
        }
        let mut fills: Vec<&str> = Vec::new();
        let mut have = fixed;
        while have < budget || fills.len() < needle_texts.len() + 1 {
            let s = filler.pull();
            have += count(s)? + 1;
            fills.push(s);
        }
        // Needle `j` goes before filler `slots[j]`; start evenly spaced and
        // move needles earlier while one would spill into the overlap tail.
        let m = needle_texts.len();
        let mut slots: Vec<usize> = (0..m).map(|j| (j + 1) * fills.len() / (m + 1)).collect();
        loop {
            let mut text = head.clone();
            let mut offsets = Vec::new();
            for (fi, f) in fills.iter().enumerate() {
                for (j, needle) in needle_texts.iter().enumerate() {
                    if slots[j] == fi {
                        offsets.push(text.len());
                        text.push_str(needle);
                        text.push(' ');
                    }
                }
                text.push_str(f);
                text.push(' ');
            }
            let spans = tok.encode_with_offsets(&text)?;
            if spans.len() < budget {
                fills.push(filler.pull());
                continue;
            }
            let last_needle_end = offsets.last().zip(needle_texts.last()).map_or(0, |(o, t)| o + t.len());
            let guard = if c + 1 == n_chunks { budget } else { budget - overlap };
            let guard_at = spans.get(guard).map_or(text.len(), |s| s.char_start);
            if last_needle_end > guard_at {
                let movable = (0..m).rev().find(|&j| slots[j] > if j == 0 { 0 } else { slots[j - 1] });
                match movable {
                    Some(j) => slots[j] -= 1,
                    None => return Err(Error::InvalidArgument(format!(
                        "chunk budget of {budget} tokens cannot hold its needles; use a longer length or fewer chunks"
                    ))),
                }
                continue;
            }
            if let Some(s) = spans.get(budget) {
                text.truncate(s.char_start);
            }
            for (j, &i) in mine.iter().enumerate() {
                let local = offsets[j] + needle_texts[j].rfind(&values[i]).expect("value in needle");
                needles_out.push(Needle {
                    key: needle_keys[i].clone(),
                    value: values[i].clone(),
                    chunk: c,
                    value_start: chunk_start + local,
                    value_end: chunk_start + local + values[i].len(),
                });
            }
            chunk_start += text.len();
            chunks.push(text);
            break;
        }
    }
    needles_out.sort_by_key(|n| n.value_start);

    Ok(BenchCase {
        id: format!("{}-{seed}", task.name()),
        task,
        seed,
        target_tokens: length_tokens,
        prefix: SYSTEM_PROMPT.to_string(),
        chunks,
        query: query_text(task, &queried),
        needles: needles_out,
        references,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Full,
    Direct,
    Ape,
    Cacheblend,
    Cacheclip,
    Random,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Full,
        Strategy::Direct,
        Strategy::Ape,
        Strategy::Cacheblend,
        Strategy::Cacheclip,
        Strategy::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Full => "full",
            Strategy::Direct => "direct",
            Strategy::Ape => "ape",
            Strategy::Cacheblend => "cacheblend",
            Strategy::Cacheclip => "cacheclip",
            Strategy::Random => "random",
        }
    }

    /// Whether the strategy is swept over recomputation ratios.
    pub fn uses_ratio(self) -> bool {
        matches!(self, Strategy::Cacheblend | Strategy::Cacheclip | Strategy::Random)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown strategy `{s}`")))
    }
}

/// Where a model comes from: a weight manifest, or seeded toy weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// Vocab file for a manifest whose tokenizer is not built in.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<PathBuf>,
    pub seed: u64,
}

impl ModelSpec {
    pub fn toy(seed: u64) -> Self {
        Self {
            manifest: None,
            vocab: None,
            seed,
        }
    }
}

/// A model paired with its tokenizer.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub model: Model,
    pub tokenizer: Tokenizer,
}

/// Loads `spec`; without a manifest builds the toy primary or auxiliary
/// model over the matching built-in tokenizer.
pub fn load_model(spec: &ModelSpec, auxiliary: bool) -> Result<LoadedModel> {
    match &spec.manifest {
        Some(path) => {
            let model = load_weights(path)?;
            let id = model.config().tokenizer_id.clone();
            let tokenizer = match &spec.vocab {
                Some(v) => Tokenizer::from_file(id.clone(), v)?,
                None => Tokenizer::builtin(&id).ok_or_else(|| {
                    Error::InvalidArgument(format!("tokenizer `{id}` is not built in; pass a vocab file"))
                })?,
            };
            if tokenizer.vocab_size() > model.config().vocab_size {
                return Err(Error::InvalidArgument(format!(
                    "tokenizer has {} entries but the model vocabulary is {}",
                    tokenizer.vocab_size(),
                    model.config().vocab_size
                )));
            }
            Ok(LoadedModel { model, tokenizer })
        }
        None => {
            let (tokenizer, config) = if auxiliary {
                let t = Tokenizer::auxiliary();
                let c = ModelConfig::toy_auxiliary(t.vocab_size(), AUXILIARY_TOKENIZER_ID);
                (t, c)
            } else {
                let t = Tokenizer::primary();
                let c = ModelConfig::toy_primary(t.vocab_size(), PRIMARY_TOKENIZER_ID);
                (t, c)
            };
            Ok(LoadedModel {
                model: Model::init(config, spec.seed)?,
                tokenizer,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub tasks: Vec<TaskKind>,
    /// Cases are assigned to tasks round-robin; case `i` uses seed `base_seed + i`.
    pub cases: usize,
    pub base_seed: u64,
    pub length_tokens: usize,
    pub n_chunks: usize,
    pub strategies: Vec<Strategy>,
    pub ratios: Vec<f64>,
    pub window_len: usize,
    pub window_threshold: usize,
    pub expand_full_window: bool,
    pub ape: ApeConfig,
    pub primary: ModelSpec,
    pub auxiliary: ModelSpec,
    /// Greedy-decode this many tokens per run and score ARC; off when `None`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arc_decode_tokens: Option<usize>,
    pub random_seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            tasks: TaskKind::ALL.to_vec(),
            cases: 12,
            base_seed: 0,
            length_tokens: 512,
            n_chunks: DEFAULT_CHUNKS,
            strategies: Strategy::ALL.to_vec(),
            ratios: vec![0.0, 0.2, 0.5, 1.0],
            window_len: crate::selector::DEFAULT_WINDOW_LEN,
            window_threshold: crate::selector::DEFAULT_WINDOW_THRESHOLD,
            expand_full_window: false,
            ape: ApeConfig::default(),
            primary: ModelSpec::toy(1),
            auxiliary: ModelSpec::toy(2),
            arc_decode_tokens: None,
            random_seed: 7,
        }
    }
}

impl SuiteConfig {
    pub fn selection(&self, ratio: f64) -> SelectionConfig {
        SelectionConfig {
            recomp_ratio: ratio,
            window_len: self.window_len,
            window_threshold: self.window_threshold,
            expand_full_window: self.expand_full_window,
        }
    }

    pub fn case_list(&self) -> Result<Vec<(TaskKind, u64)>> {
        if self.tasks.is_empty() {
            return Err(Error::InvalidArgument("no tasks configured".into()));
        }
        Ok((0..self.cases)
            .map(|i| (self.tasks[i % self.tasks.len()], self.base_seed + i as u64))
            .collect())
    }

    fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() {
            return Err(Error::InvalidArgument("no strategies configured".into()));
        }
        if self.strategies.iter().any(|s| s.uses_ratio()) && self.ratios.is_empty() {
            return Err(Error::InvalidArgument(
                "ratio-swept strategies need at least one ratio".into(),
            ));
        }
        for &r in &self.ratios {
            self.selection(r).validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub case_id: String,
    pub task: TaskKind,
    pub seed: u64,
    pub strategy: Strategy,
    /// `None` for strategies that are not swept over ratios.
    pub ratio: Option<f64>,
    pub prompt_tokens: usize,
    pub kl: f64,
    pub needle_coverage: f64,
    pub effective_ratio: f64,
    pub recomputed_rows: usize,
    /// Share of recomputed rows in the first window of their chunk (CacheBlend).
    pub first_window_fraction: Option<f64>,
    /// That share under uniform selection.
    pub first_window_baseline: Option<f64>,
    pub arc: Option<f64>,
    pub macs_selection: u64,
    pub macs_recompute: u64,
    pub macs_merge: u64,
    pub macs_decode: u64,
    pub macs_prefill: u64,
    pub macs_total: u64,
    pub macs_full: u64,
    pub ratio_vs_full: f64,
}

pub const CSV_COLUMNS: [&str; 20] = [
    "case_id",
    "task",
    "seed",
    "strategy",
    "ratio",
    "prompt_tokens",
    "kl",
    "needle_coverage",
    "effective_ratio",
    "recomputed_rows",
    "first_window_fraction",
    "first_window_baseline",
    "arc",
    "macs_selection",
    "macs_recompute",
    "macs_merge",
    "macs_decode",
    "macs_prefill",
    "macs_total",
    "macs_full",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub strategy: Strategy,
    pub ratio: Option<f64>,
    pub cases: usize,
    pub mean_kl: f64,
    pub mean_needle_coverage: f64,
    pub mean_effective_ratio: f64,
    pub mean_ratio_vs_full: f64,
    pub mean_arc: Option<f64>,
}

/// Where CacheBlend's recomputed rows land relative to chunk starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringDiagnostic {
    pub ratio: f64,
    pub cases: usize,
    pub mean_first_window_fraction: f64,
    pub mean_uniform_baseline: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: SuiteConfig,
    pub rows: Vec<BenchRow>,
    pub summary: Vec<SummaryRow>,
    pub cacheblend_clustering: Vec<ClusteringDiagnostic>,
}

/// Rounds to 6 significant digits.
pub fn round_sig(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().expect("formatted float parses")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::InvalidArgument(format!("unknown format `{other}`"))),
        }
    }
}

fn opt<T: fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

pub fn render_report(report: &BenchReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => Ok(serde_json::to_string_pretty(report)?),
        ReportFormat::Csv => {
            let mut out = CSV_COLUMNS.join(",");
            out.push_str(",ratio_vs_full\n");
            for r in &report.rows {
                let fields = [
                    r.case_id.clone(),
                    r.task.to_string(),
                    r.seed.to_string(),
                    r.strategy.to_string(),
                    opt(&r.ratio),
                    r.prompt_tokens.to_string(),
                    r.kl.to_string(),
                    r.needle_coverage.to_string(),
                    r.effective_ratio.to_string(),
                    r.recomputed_rows.to_string(),
                    opt(&r.first_window_fraction),
                    opt(&r.first_window_baseline),
                    opt(&r.arc),
                    r.macs_selection.to_string(),
                    r.macs_recompute.to_string(),
                    r.macs_merge.to_string(),
                    r.macs_decode.to_string(),
                    r.macs_prefill.to_string(),
                    r.macs_total.to_string(),
                    r.macs_full.to_string(),
                    r.ratio_vs_full.to_string(),
                ];
                out.push_str(&fields.join(","));
                out.push('\n');
            }
            Ok(out)
        }
    }
}

pub fn emit_report(report: &BenchReport, format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, render_report(report, format)?).map_err(|e| Error::io(path, e))
}

/// Greedily extends `cache` by `steps` tokens starting from `logits`.
pub fn greedy_decode(model: &Model, cache: &mut LayerCache, logits: &[f32], steps: usize) -> Result<Vec<u32>> {
    let mut out = Vec::with_capacity(steps);
    let mut logits = logits.to_vec();
    let mut trace = Trace::default();
    for _ in 0..steps {
        let next = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i as u32)
            .ok_or(Error::EmptyInput("logits"))?;
        out.push(next);
        let pos = cache.last_position().map_or(0, |p| p + 1);
        logits = model.decode_step(cache, next, pos, &mut trace)?;
    }
    Ok(out)
}

struct CaseContext<'a> {
    case: BenchCase,
    primary: &'a LoadedModel,
    aux: &'a LoadedModel,
    pc: PreparedChunks,
    ac: Option<PreparedChunks>,
    blend: Option<(crate::kv_store::ChunkCache, Vec<crate::kv_store::ChunkCache>)>,
    query_ids: Vec<u32>,
    full: PrefillOutcome,
    /// Merged rows carrying needle values.
    needle_rows: Vec<usize>,
    first_window_baseline: f64,
}

impl CaseContext<'_> {
    fn coverage(&self, rows: &[usize]) -> f64 {
        if self.needle_rows.is_empty() {
            return 0.0;
        }
        let hit = self
            .needle_rows
            .iter()
            .filter(|r| rows.binary_search(r).is_ok())
            .count();
        hit as f64 / self.needle_rows.len() as f64
    }
}

fn prepare_case<'a>(
    case: BenchCase,
    primary: &'a LoadedModel,
    aux: &'a LoadedModel,
    config: &SuiteConfig,
) -> Result<CaseContext<'a>> {
    let pc = PreparedChunks::build(&primary.model, &primary.tokenizer, &case.prefix, &case.chunks)?;
    let ac = config
        .strategies
        .contains(&Strategy::Cacheclip)
        .then(|| PreparedChunks::build(&aux.model, &aux.tokenizer, &case.prefix, &case.chunks))
        .transpose()?;
    let blend = config
        .strategies
        .contains(&Strategy::Cacheblend)
        .then(|| cacheblend_caches(&primary.model, &pc))
        .transpose()?;
    let query_ids = primary.tokenizer.encode(&case.query)?;
    let full = full_prefill(&primary.model, &pc.flat_ids(), &query_ids)?;
    let sink = pc.prefix_ids.len();
    let needle_rows = pc
        .spans
        .iter()
        .enumerate()
        .filter(|(_, s)| {
            case.needles
                .iter()
                .any(|n| s.char_start < n.value_end && n.value_start < s.char_end)
        })
        .map(|(i, _)| sink + i)
        .collect();
    let total = pc.total_chunk_tokens();
    let in_first: usize = pc.chunk_ids.iter().map(|c| c.len().min(config.window_len)).sum();
    Ok(CaseContext {
        case,
        primary,
        aux,
        pc,
        ac,
        blend,
        query_ids,
        full,
        needle_rows,
        first_window_baseline: in_first as f64 / total.max(1) as f64,
    })
}

fn run_one(ctx: &CaseContext<'_>, strategy: Strategy, ratio: Option<f64>, config: &SuiteConfig) -> Result<BenchRow> {
    let p = &ctx.primary.model;
    let ratio_v = ratio.unwrap_or(0.0);
    let outcome_owned;
    let outcome: &PrefillOutcome = match strategy {
        Strategy::Full => &ctx.full,
        Strategy::Direct => {
            outcome_owned = direct_reuse_prefill(p, &ctx.pc.caches, &ctx.query_ids)?;
            &outcome_owned
        }
        Strategy::Ape => {
            outcome_owned = ape_prefill(p, &ctx.pc.caches, &ctx.query_ids, config.ape)?;
            &outcome_owned
        }
        Strategy::Cacheclip => {
            let ac = ctx.ac.as_ref().expect("aux chunks prepared");
            outcome_owned = cacheclip_prefill(
                p,
                &ctx.aux.model,
                &ctx.pc,
                ac,
                &ctx.case.query,
                &config.selection(ratio_v),
                AttentionKnobs::NEUTRAL,
            )?;
            &outcome_owned
        }
        Strategy::Cacheblend => {
            let (sink, chunks) = ctx.blend.as_ref().expect("cacheblend caches prepared");
            outcome_owned = cacheblend_prefill(p, sink, chunks, &ctx.query_ids, ratio_v)?;
            &outcome_owned
        }
        Strategy::Random => {
            let seed = config.random_seed ^ ctx.case.seed.wrapping_mul(31);
            outcome_owned = random_prefill(p, &ctx.pc.caches, &ctx.query_ids, ratio_v, seed)?;
            &outcome_owned
        }
    };
    let kl = if strategy == Strategy::Full {
        0.0
    } else {
        next_token_kl(&ctx.full.logits, &outcome.logits)?
    };
    let (coverage, effective, recomputed) = match (&outcome.plan, strategy) {
        (_, Strategy::Full) => (1.0, 1.0, ctx.pc.total_chunk_tokens()),
        (Some(plan), _) => (ctx.coverage(&plan.indices), plan.effective_ratio, plan.len()),
        (None, _) => (0.0, 0.0, 0),
    };
    let (fwf, fwb) = match (strategy, &outcome.plan, &outcome.merged) {
        (Strategy::Cacheblend, Some(plan), Some(merged)) => (
            Some(round_sig(first_window_fraction(plan, merged, config.window_len))),
            Some(round_sig(ctx.first_window_baseline)),
        ),
        _ => (None, None),
    };
    let arc = match config.arc_decode_tokens {
        Some(steps) => {
            let mut cache = outcome.cache.clone();
            let ids = greedy_decode(p, &mut cache, &outcome.logits, steps)?;
            let text = ctx.primary.tokenizer.decode(&ids)?;
            Some(round_sig(arc_score(&text, &ctx.case.references)))
        }
        None => None,
    };
    Ok(make_row(
        ctx,
        strategy,
        ratio,
        kl,
        coverage,
        effective,
        recomputed,
        fwf,
        fwb,
        arc,
        &outcome.flops,
    ))
}

#[allow(clippy::too_many_arguments)]
fn make_row(
    ctx: &CaseContext<'_>,
    strategy: Strategy,
    ratio: Option<f64>,
    kl: f64,
    coverage: f64,
    effective: f64,
    recomputed: usize,
    first_window_fraction: Option<f64>,
    first_window_baseline: Option<f64>,
    arc: Option<f64>,
    flops: &FlopReport,
) -> BenchRow {
    BenchRow {
        case_id: ctx.case.id.clone(),
        task: ctx.case.task,
        seed: ctx.case.seed,
        strategy,
        ratio: ratio.map(round_sig),
        prompt_tokens: ctx.full.cache.len(),
        kl: round_sig(kl),
        needle_coverage: round_sig(coverage),
        effective_ratio: round_sig(effective),
        recomputed_rows: recomputed,
        first_window_fraction,
        first_window_baseline,
        arc,
        macs_selection: flops.selection.total(),
        macs_recompute: flops.recompute.total(),
        macs_merge: flops.merge_overhead.total(),
        macs_decode: flops.decode.total(),
        macs_prefill: flops.prefill.total(),
        macs_total: flops.total,
        macs_full: flops.full_reference.unwrap_or(0),
        ratio_vs_full: round_sig(flops.ratio_vs_full.unwrap_or(0.0)),
    }
}

fn run_case(ctx: &CaseContext<'_>, config: &SuiteConfig) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &s in &config.strategies {
        if s.uses_ratio() {
            for &r in &config.ratios {
                rows.push(run_one(ctx, s, Some(r), config)?);
            }
        } else {
            rows.push(run_one(ctx, s, None, config)?);
        }
    }
    Ok(rows)
}

fn mean(xs: impl Iterator<Item = f64>) -> (f64, usize) {
    let (mut s, mut n) = (0.0, 0);
    for x in xs {
        s += x;
        n += 1;
    }
    (if n == 0 { 0.0 } else { s / n as f64 }, n)
}

fn summarize(rows: &[BenchRow], config: &SuiteConfig) -> (Vec<SummaryRow>, Vec<ClusteringDiagnostic>) {
    let mut keys: Vec<(Strategy, Option<f64>)> = Vec::new();
    for &s in &config.strategies {
        if s.uses_ratio() {
            keys.extend(config.ratios.iter().map(|&r| (s, Some(round_sig(r)))));
        } else {
            keys.push((s, None));
        }
    }
    let summary = keys
        .iter()
        .map(|&(strategy, ratio)| {
            let sel: Vec<&BenchRow> = rows
                .iter()
                .filter(|r| r.strategy == strategy && r.ratio == ratio)
                .collect();
            let (mean_kl, cases) = mean(sel.iter().map(|r| r.kl));
            let arcs: Vec<f64> = sel.iter().filter_map(|r| r.arc).collect();
            SummaryRow {
                strategy,
                ratio,
                cases,
                mean_kl: round_sig(mean_kl),
                mean_needle_coverage: round_sig(mean(sel.iter().map(|r| r.needle_coverage)).0),
                mean_effective_ratio: round_sig(mean(sel.iter().map(|r| r.effective_ratio)).0),
                mean_ratio_vs_full: round_sig(mean(sel.iter().map(|r| r.ratio_vs_full)).0),
                mean_arc: (!arcs.is_empty()).then(|| round_sig(mean(arcs.into_iter()).0)),
            }
        })
        .collect();
    let clustering = if config.strategies.contains(&Strategy::Cacheblend) {
        config
            .ratios
            .iter()
            .map(|&ratio| {
                let sel: Vec<&BenchRow> = rows
                    .iter()
                    .filter(|r| r.strategy == Strategy::Cacheblend && r.ratio == Some(round_sig(ratio)))
                    .filter(|r| r.recomputed_rows > 0)
                    .collect();
                let (f, n) = mean(sel.iter().filter_map(|r| r.first_window_fraction));
                ClusteringDiagnostic {
                    ratio: round_sig(ratio),
                    cases: n,
                    mean_first_window_fraction: round_sig(f),
                    mean_uniform_baseline: round_sig(mean(sel.iter().filter_map(|r| r.first_window_baseline)).0),
                }
            })
            .collect()
    } else {
        Vec::new()
    };
    (summary, clustering)
}

/// Loads both models from the config and runs the sweep.
pub fn run_suite(config: &SuiteConfig) -> Result<BenchReport> {
    let primary = load_model(&config.primary, false)?;
    let aux = load_model(&config.auxiliary, true)?;
    run_suite_with(config, &primary, &aux)
}

/// Runs every configured case through every strategy and ratio.
pub fn run_suite_with(config: &SuiteConfig, primary: &LoadedModel, aux: &LoadedModel) -> Result<BenchReport> {
    config.validate()?;
    let cases = config.case_list()?;
    let per_case: Vec<Vec<BenchRow>> = cases
        .par_iter()
        .map(|&(task, seed)| {
            let case = gen_niah_with(task, config.length_tokens, config.n_chunks, seed)?;
            let ctx = prepare_case(case, primary, aux, config)?;
            run_case(&ctx, config)
        })
        .collect::<Result<_>>()?;
    let rows: Vec<BenchRow> = per_case.into_iter().flatten().collect();
    let (summary, cacheblend_clustering) = summarize(&rows, config);
    Ok(BenchReport {
        config: config.clone(),
        rows,
        summary,
        cacheblend_clustering,
    })
}
