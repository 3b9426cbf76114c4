use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use kvreuse_core::analysis::{alignment_study, AlignmentStats};
use kvreuse_core::bench::{
    gen_niah_with, load_model, render_report, run_suite_with, LoadedModel, ModelSpec, ReportFormat, Strategy,
    SuiteConfig, TaskKind, DEFAULT_CHUNKS,
};
use kvreuse_core::kv_store::{load_chunk_cache, merge_caches, CacheDir};
use kvreuse_core::model::{Model, ModelConfig};
use kvreuse_core::pipeline::{
    ape_prefill, cacheblend_caches, cacheblend_prefill, cacheclip_prefill, direct_reuse_prefill, full_prefill,
    random_prefill, ApeConfig, FlopReport, PrefillOutcome, PreparedChunks,
};
use kvreuse_core::selector::{aux_score_tokens, map_selection, select_tokens, SelectionConfig, SelectionPlan};
use kvreuse_core::tensor::AttentionKnobs;
use kvreuse_core::trace::{Stage, Trace};
use kvreuse_core::Tokenizer;

const CACHE_DIR_ENV: &str = "KVREUSE_CACHE_DIR";

/// Chunk KV-cache reuse: precompute, merge, select, prefill, benchmark.
#[derive(Parser)]
#[command(name = "kvreuse", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build chunk caches and store them in the cache directory.
    Precompute(PrecomputeArgs),
    /// Merge stored chunk caches and describe the result.
    Merge(MergeArgs),
    /// Score chunks with the auxiliary model and print the selection plan.
    Select(SelectArgs),
    /// Run one prefill strategy and report logits digest and MAC counts.
    Prefill(PrefillArgs),
    /// Sweep strategies and ratios over generated needle-in-a-haystack cases.
    Bench(BenchArgs),
    /// Compare final-row attention of two models that share a tokenizer.
    Analyze(AnalyzeArgs),
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Weight manifest for the primary model; a seeded toy model otherwise.
    #[arg(long)]
    primary_manifest: Option<PathBuf>,
    /// Vocab file for a primary tokenizer that is not built in.
    #[arg(long)]
    primary_vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    primary_seed: u64,
    #[arg(long)]
    aux_manifest: Option<PathBuf>,
    #[arg(long)]
    aux_vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    aux_seed: u64,
}

impl ModelArgs {
    fn primary_spec(&self) -> ModelSpec {
        ModelSpec {
            manifest: self.primary_manifest.clone(),
            vocab: self.primary_vocab.clone(),
            seed: self.primary_seed,
        }
    }

    fn aux_spec(&self) -> ModelSpec {
        ModelSpec {
            manifest: self.aux_manifest.clone(),
            vocab: self.aux_vocab.clone(),
            seed: self.aux_seed,
        }
    }

    fn primary(&self) -> Result<LoadedModel> {
        load_model(&self.primary_spec(), false).context("loading primary model")
    }

    fn aux(&self) -> Result<LoadedModel> {
        load_model(&self.aux_spec(), true).context("loading auxiliary model")
    }
}

/// Prompt source: chunk files, or a generated case when none are given.
#[derive(Args, Clone)]
struct InputArgs {
    /// Chunk text file; repeat for several chunks.
    #[arg(long = "chunk")]
    chunks: Vec<PathBuf>,
    /// Shared prefix text file (defaults to the built-in system prompt).
    #[arg(long)]
    prefix_file: Option<PathBuf>,
    /// Query text appended after the chunks.
    #[arg(long)]
    query: Option<String>,
    #[arg(long, default_value = "single2")]
    task: String,
    /// Haystack length in primary tokens for generated cases.
    #[arg(long, default_value_t = 384)]
    length: usize,
    #[arg(long = "n-chunks", default_value_t = DEFAULT_CHUNKS)]
    n_chunks: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

struct Prompt {
    prefix: String,
    chunks: Vec<String>,
    query: String,
}

impl InputArgs {
    fn load(&self) -> Result<Prompt> {
        if self.chunks.is_empty() {
            let task: TaskKind = self.task.parse()?;
            let case = gen_niah_with(task, self.length, self.n_chunks, self.seed)?;
            let prefix = match &self.prefix_file {
                Some(p) => read_text(p)?,
                None => case.prefix,
            };
            return Ok(Prompt {
                prefix,
                chunks: case.chunks,
                query: self.query.clone().unwrap_or(case.query),
            });
        }
        let chunks = self.chunks.iter().map(|p| read_text(p)).collect::<Result<Vec<_>>>()?;
        let prefix = match &self.prefix_file {
            Some(p) => read_text(p)?,
            None => kvreuse_core::bench::text::SYSTEM_PROMPT.to_string(),
        };
        let query = self.query.clone().context("--query is required with --chunk files")?;
        Ok(Prompt { prefix, chunks, query })
    }
}

#[derive(Args, Clone)]
struct CacheArgs {
    /// Chunk-cache directory.
    #[arg(long, env = CACHE_DIR_ENV, default_value = ".kvreuse-cache")]
    cache_dir: PathBuf,
    /// Compute everything in memory and leave the cache directory alone.
    #[arg(long)]
    no_cache: bool,
}

impl CacheArgs {
    fn open(&self) -> Result<Option<CacheDir>> {
        if self.no_cache {
            return Ok(None);
        }
        Ok(Some(CacheDir::open(&self.cache_dir).with_context(|| {
            format!("opening cache directory {}", self.cache_dir.display())
        })?))
    }
}

#[derive(Args, Clone)]
struct WindowArgs {
    #[arg(long, default_value_t = kvreuse_core::selector::DEFAULT_WINDOW_LEN)]
    window_len: usize,
    #[arg(long, default_value_t = kvreuse_core::selector::DEFAULT_WINDOW_THRESHOLD)]
    window_threshold: usize,
    /// Recompute whole windows that pass the threshold.
    #[arg(long)]
    expand_window: bool,
}

impl WindowArgs {
    fn config(&self, ratio: f64) -> SelectionConfig {
        SelectionConfig {
            recomp_ratio: ratio,
            window_len: self.window_len,
            window_threshold: self.window_threshold,
            expand_full_window: self.expand_window,
        }
    }
}

#[derive(Args)]
struct PrecomputeArgs {
    #[command(flatten)]
    models: ModelArgs,
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    cache: CacheArgs,
    /// Also build auxiliary-model caches.
    #[arg(long)]
    aux: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MergeArgs {
    #[command(flatten)]
    models: ModelArgs,
    /// Chunk-cache file, in prompt order; repeat for each chunk.
    #[arg(long = "cache", required = true)]
    caches: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SelectArgs {
    #[command(flatten)]
    models: ModelArgs,
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    cache: CacheArgs,
    #[command(flatten)]
    window: WindowArgs,
    #[arg(long, default_value_t = 0.2)]
    ratio: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Full,
    Direct,
    Ape,
    Cacheblend,
    Cacheclip,
    Random,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Full => Strategy::Full,
            StrategyArg::Direct => Strategy::Direct,
            StrategyArg::Ape => Strategy::Ape,
            StrategyArg::Cacheblend => Strategy::Cacheblend,
            StrategyArg::Cacheclip => Strategy::Cacheclip,
            StrategyArg::Random => Strategy::Random,
        }
    }
}

#[derive(Args)]
struct PrefillArgs {
    #[command(flatten)]
    models: ModelArgs,
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    cache: CacheArgs,
    #[command(flatten)]
    window: WindowArgs,
    #[arg(long, value_enum, default_value = "cacheclip")]
    strategy: StrategyArg,
    #[arg(long, default_value_t = 0.2)]
    ratio: f64,
    #[arg(long, default_value_t = 0.9)]
    ape_temperature: f32,
    #[arg(long, default_value_t = 0.9)]
    ape_scale: f32,
    /// Seed for the random strategy.
    #[arg(long, default_value_t = 7)]
    random_seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Json => ReportFormat::Json,
            FormatArg::Csv => ReportFormat::Csv,
        }
    }
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    models: ModelArgs,
    #[command(flatten)]
    window: WindowArgs,
    /// Comma-separated task kinds.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "single1,single2,single3,multikey1,multivalue,multiquery"
    )]
    tasks: Vec<String>,
    #[arg(long, default_value_t = 12)]
    cases: usize,
    #[arg(long, default_value_t = 384)]
    length: usize,
    #[arg(long = "n-chunks", default_value_t = DEFAULT_CHUNKS)]
    n_chunks: usize,
    /// Comma-separated strategies.
    #[arg(
        long,
        value_enum,
        value_delimiter = ',',
        default_value = "full,direct,ape,cacheblend,cacheclip,random"
    )]
    strategy: Vec<StrategyArg>,
    /// Comma-separated recomputation ratios.
    #[arg(long, value_delimiter = ',', default_value = "0,0.2,0.5,1")]
    ratio: Vec<f64>,
    /// Base seed; case `i` uses `seed + i`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 7)]
    random_seed: u64,
    #[arg(long, default_value_t = 0.9)]
    ape_temperature: f32,
    #[arg(long, default_value_t = 0.9)]
    ape_scale: f32,
    /// Greedy-decode this many tokens for ARC; defaults to 16 with an
    /// imported primary model and off for toy weights.
    #[arg(long)]
    arc_tokens: Option<usize>,
    #[arg(long, value_enum, default_value = "json")]
    format: FormatArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    models: ModelArgs,
    /// Comma-separated sequence lengths in tokens.
    #[arg(long, value_delimiter = ',', default_value = "32,64,128")]
    lengths: Vec<usize>,
    /// Sequences per length.
    #[arg(long, default_value_t = 20)]
    sequences: usize,
    /// Top fraction compared by the Jaccard track.
    #[arg(long, default_value_t = 0.2)]
    frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "json")]
    format: FormatArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => match writeln!(io::stdout().lock(), "{text}") {
            Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e).context("writing to stdout"),
            _ => Ok(()),
        },
    }
}

fn emit_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    emit(&serde_json::to_string_pretty(value)?, out)
}

fn digest_f32(values: &[f32]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize)]
struct StoredCache {
    path: PathBuf,
    tokens: usize,
    prefix_len: usize,
}

#[derive(Serialize)]
struct PrecomputeReport {
    cache_dir: Option<PathBuf>,
    primary: Vec<StoredCache>,
    aux: Vec<StoredCache>,
    chunk_precompute_macs: u64,
}

fn stored(store: Option<&CacheDir>, prepared: &PreparedChunks) -> Vec<StoredCache> {
    prepared
        .caches
        .iter()
        .map(|c| StoredCache {
            path: store
                .map(|s| s.path_for(&c.fingerprint, &c.tokenizer_id, c.prefix_ids(), c.chunk_ids()))
                .unwrap_or_default(),
            tokens: c.len(),
            prefix_len: c.prefix_len,
        })
        .collect()
}

fn precompute(args: PrecomputeArgs) -> Result<()> {
    let prompt = args.input.load()?;
    let store = args.cache.open()?;
    let primary = args.models.primary()?;
    let pc = PreparedChunks::build_with_store(
        &primary.model,
        &primary.tokenizer,
        &prompt.prefix,
        &prompt.chunks,
        store.as_ref(),
    )?;
    let mut macs = kvreuse_core::pipeline::count_flops(&pc.precompute)
        .chunk_precompute
        .total();
    let aux = if args.aux {
        let aux = args.models.aux()?;
        let ac = PreparedChunks::build_with_store(
            &aux.model,
            &aux.tokenizer,
            &prompt.prefix,
            &prompt.chunks,
            store.as_ref(),
        )?;
        macs += kvreuse_core::pipeline::count_flops(&ac.precompute)
            .chunk_precompute
            .total();
        stored(store.as_ref(), &ac)
    } else {
        Vec::new()
    };
    let report = PrecomputeReport {
        cache_dir: store.as_ref().map(|s| s.root().to_path_buf()),
        primary: stored(store.as_ref(), &pc),
        aux,
        chunk_precompute_macs: macs,
    };
    emit_json(&report, args.out.as_deref())
}

#[derive(Serialize)]
struct MergeReport {
    chunks: usize,
    sink_len: usize,
    chunk_lens: Vec<usize>,
    total_len: usize,
    positions_contiguous: bool,
    fingerprint: String,
    keys_digest: String,
    values_digest: String,
    merge_macs: u64,
}

fn merge(args: MergeArgs) -> Result<()> {
    let primary = args.models.primary()?;
    let caches = args
        .caches
        .iter()
        .map(|p| load_chunk_cache(p).with_context(|| format!("loading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    if caches[0].fingerprint != primary.model.fingerprint() {
        bail!("caches were built by a different model than the one configured");
    }
    let mut trace = Trace::new(Stage::MergeOverhead);
    let merged = merge_caches(&caches, &primary.model.config().rope(), &mut trace)?;
    let flat =
        |ms: &[kvreuse_core::tensor::Matrix]| ms.iter().flat_map(|m| m.data().iter().copied()).collect::<Vec<f32>>();
    let report = MergeReport {
        chunks: caches.len(),
        sink_len: merged.sink_len(),
        chunk_lens: merged.layout.chunk_lens.clone(),
        total_len: merged.len(),
        positions_contiguous: merged.cache.positions.iter().enumerate().all(|(i, &p)| i == p),
        fingerprint: merged.fingerprint.to_string(),
        keys_digest: digest_f32(&flat(&merged.cache.keys)),
        values_digest: digest_f32(&flat(&merged.cache.values)),
        merge_macs: kvreuse_core::pipeline::count_flops(&trace).merge_overhead.total(),
    };
    emit_json(&report, args.out.as_deref())
}

fn prepare_both(
    models: &ModelArgs,
    prompt: &Prompt,
    store: Option<&CacheDir>,
) -> Result<(LoadedModel, LoadedModel, PreparedChunks, PreparedChunks)> {
    let primary = models.primary()?;
    let aux = models.aux()?;
    let pc = PreparedChunks::build_with_store(
        &primary.model,
        &primary.tokenizer,
        &prompt.prefix,
        &prompt.chunks,
        store,
    )?;
    let ac = PreparedChunks::build_with_store(&aux.model, &aux.tokenizer, &prompt.prefix, &prompt.chunks, store)?;
    Ok((primary, aux, pc, ac))
}

fn select(args: SelectArgs) -> Result<()> {
    let prompt = args.input.load()?;
    let store = args.cache.open()?;
    let config = args.window.config(args.ratio);
    config.validate()?;
    let (_, aux, pc, ac) = prepare_both(&args.models, &prompt, store.as_ref())?;
    let query = aux.tokenizer.encode(&prompt.query)?;
    let scores = aux_score_tokens(&aux.model, &ac.caches, &query, &mut Trace::new(Stage::Selection))?;
    let selection = select_tokens(&scores, &config)?;
    let plan: SelectionPlan = map_selection(&selection, &ac.spans, &pc.spans, pc.prefix_ids.len())?;
    emit_json(&plan, args.out.as_deref())
}

#[derive(Serialize)]
struct PrefillReport {
    strategy: Strategy,
    ratio: Option<f64>,
    prompt_tokens: usize,
    logits_digest: String,
    argmax_token: u32,
    effective_ratio: Option<f64>,
    recomputed_rows: Option<usize>,
    flops: FlopReport,
}

fn prefill(args: PrefillArgs) -> Result<()> {
    let prompt = args.input.load()?;
    let store = args.cache.open()?;
    let strategy: Strategy = args.strategy.into();
    let config = args.window.config(args.ratio);
    config.validate()?;
    let primary = args.models.primary()?;
    let pc = PreparedChunks::build_with_store(
        &primary.model,
        &primary.tokenizer,
        &prompt.prefix,
        &prompt.chunks,
        store.as_ref(),
    )?;
    let q = primary.tokenizer.encode(&prompt.query)?;
    let p = &primary.model;
    let outcome: PrefillOutcome = match strategy {
        Strategy::Full => full_prefill(p, &pc.flat_ids(), &q)?,
        Strategy::Direct => direct_reuse_prefill(p, &pc.caches, &q)?,
        Strategy::Ape => ape_prefill(
            p,
            &pc.caches,
            &q,
            ApeConfig {
                temperature: args.ape_temperature,
                scale: args.ape_scale,
            },
        )?,
        Strategy::Cacheblend => {
            let (sink, chunks) = cacheblend_caches(p, &pc)?;
            cacheblend_prefill(p, &sink, &chunks, &q, args.ratio)?
        }
        Strategy::Cacheclip => {
            let aux = args.models.aux()?;
            let ac = PreparedChunks::build_with_store(
                &aux.model,
                &aux.tokenizer,
                &prompt.prefix,
                &prompt.chunks,
                store.as_ref(),
            )?;
            cacheclip_prefill(p, &aux.model, &pc, &ac, &prompt.query, &config, AttentionKnobs::NEUTRAL)?
        }
        Strategy::Random => random_prefill(p, &pc.caches, &q, args.ratio, args.random_seed)?,
    };
    let argmax = outcome
        .logits
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .map_or(0, |(i, _)| i as u32);
    let report = PrefillReport {
        strategy,
        ratio: strategy.uses_ratio().then_some(args.ratio),
        prompt_tokens: outcome.cache.len(),
        logits_digest: digest_f32(&outcome.logits),
        argmax_token: argmax,
        effective_ratio: outcome.plan.as_ref().map(|p| p.effective_ratio),
        recomputed_rows: outcome.plan.as_ref().map(SelectionPlan::len),
        flops: outcome.flops,
    };
    emit_json(&report, args.out.as_deref())
}

fn bench(args: BenchArgs) -> Result<()> {
    let tasks = args
        .tasks
        .iter()
        .map(|t| t.parse::<TaskKind>())
        .collect::<kvreuse_core::Result<Vec<_>>>()?;
    let arc_decode_tokens = args
        .arc_tokens
        .or(args.models.primary_manifest.as_ref().map(|_| 16))
        .filter(|&n| n > 0);
    let config = SuiteConfig {
        tasks,
        cases: args.cases,
        base_seed: args.seed,
        length_tokens: args.length,
        n_chunks: args.n_chunks,
        strategies: args.strategy.iter().map(|&s| s.into()).collect(),
        ratios: args.ratio.clone(),
        window_len: args.window.window_len,
        window_threshold: args.window.window_threshold,
        expand_full_window: args.window.expand_window,
        ape: ApeConfig {
            temperature: args.ape_temperature,
            scale: args.ape_scale,
        },
        primary: args.models.primary_spec(),
        auxiliary: args.models.aux_spec(),
        arc_decode_tokens,
        random_seed: args.random_seed,
    };
    let primary = args.models.primary()?;
    let aux = args.models.aux()?;
    let report = run_suite_with(&config, &primary, &aux)?;
    emit(
        render_report(&report, args.format.into())?.trim_end(),
        args.out.as_deref(),
    )
}

/// Auxiliary model for the alignment study: the configured one, or a toy
/// model built over the primary tokenizer.
fn analysis_aux(models: &ModelArgs, tokenizer: &Tokenizer) -> Result<Model> {
    if models.aux_manifest.is_some() {
        return Ok(models.aux()?.model);
    }
    let config = ModelConfig::toy_auxiliary(tokenizer.vocab_size(), tokenizer.id());
    Ok(Model::init(config, models.aux_seed)?)
}

fn analyze(args: AnalyzeArgs) -> Result<()> {
    let primary = args.models.primary()?;
    let aux = analysis_aux(&args.models, &primary.tokenizer)?;
    if args.lengths.is_empty() || args.sequences == 0 {
        bail!("need at least one length and one sequence");
    }
    let max_len = *args.lengths.iter().max().expect("non-empty");
    let mut corpus = Vec::new();
    for (li, &len) in args.lengths.iter().enumerate() {
        for s in 0..args.sequences {
            let seed = args.seed + (li * args.sequences + s) as u64;
            let task = TaskKind::ALL[s % TaskKind::ALL.len()];
            let case = gen_niah_with(task, max_len.max(kvreuse_core::bench::MIN_LENGTH_TOKENS), 1, seed)?;
            let ids = primary.tokenizer.encode(&case.haystack())?;
            if ids.len() < len {
                bail!(
                    "generated text holds {} tokens, fewer than the requested {len}",
                    ids.len()
                );
            }
            corpus.push(ids[..len].to_vec());
        }
    }
    let stats: AlignmentStats = alignment_study(&aux, &primary.model, &corpus, args.frac)?;
    match args.format {
        FormatArg::Json => emit_json(&stats, args.out.as_deref()),
        FormatArg::Csv => emit(stats.to_csv().trim_end(), args.out.as_deref()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Precompute(a) => precompute(a),
        Command::Merge(a) => merge(a),
        Command::Select(a) => select(a),
        Command::Prefill(a) => prefill(a),
        Command::Bench(a) => bench(a),
        Command::Analyze(a) => analyze(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
