//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kvreuse_core::analysis::{arc_score, jaccard_topk, kl_divergence, next_token_kl};
use kvreuse_core::bench::{gen_niah_with, load_model, run_suite, LoadedModel, Strategy, SuiteConfig, TaskKind};
use kvreuse_core::kv_store::{concat_caches, merge_caches};
use kvreuse_core::model::{Capture, Model, ModelConfig};
use kvreuse_core::pipeline::{
    ape_prefill, cacheclip_prefill, count_flops, direct_reuse_prefill, full_prefill, full_prefill_macs, ApeConfig,
    PreparedChunks,
};
use kvreuse_core::selector::{cacheblend_select, select_tokens, ImportanceScores, SelectionConfig};
use kvreuse_core::tensor::AttentionKnobs;
use kvreuse_core::trace::{Stage, Trace};

struct Models {
    primary: LoadedModel,
    aux: LoadedModel,
}

fn models() -> Models {
    let d = SuiteConfig::default();
    Models {
        primary: load_model(&d.primary, false).unwrap(),
        aux: load_model(&d.auxiliary, true).unwrap(),
    }
}

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(name: &'static str, pass: bool, detail: String) -> Outcome {
    println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    Outcome { name, pass, detail }
}

fn max_abs(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn prepared(
    m: &Models,
    task: TaskKind,
    len: usize,
    seed: u64,
) -> (kvreuse_core::bench::BenchCase, PreparedChunks, PreparedChunks) {
    let case = gen_niah_with(task, len, 4, seed).unwrap();
    let pc = PreparedChunks::build(&m.primary.model, &m.primary.tokenizer, &case.prefix, &case.chunks).unwrap();
    let ac = PreparedChunks::build(&m.aux.model, &m.aux.tokenizer, &case.prefix, &case.chunks).unwrap();
    (case, pc, ac)
}

fn full_selection_oracle(m: &Models) -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f32;
    let mut longest = 0;
    for i in 0..100u64 {
        let task = TaskKind::ALL[i as usize % TaskKind::ALL.len()];
        let (case, pc, ac) = prepared(m, task, 384, i);
        let q = m.primary.tokenizer.encode(&case.query).unwrap();
        let full = full_prefill(&m.primary.model, &pc.flat_ids(), &q).unwrap();
        let clip = cacheclip_prefill(
            &m.primary.model,
            &m.aux.model,
            &pc,
            &ac,
            &case.query,
            &SelectionConfig::with_ratio(1.0),
            AttentionKnobs::NEUTRAL,
        )
        .unwrap();
        worst = worst.max(max_abs(&full.logits, &clip.logits));
        longest = longest.max(full.cache.len());
    }
    let elapsed = start.elapsed();
    report(
        "full-selection oracle",
        worst <= 1e-4 && longest <= 512 && elapsed < Duration::from_secs(120),
        format!(
            "100 prompts (max {longest} tokens, 4 chunks), max |logit diff| {worst:.3e} (tol 1e-4), {:.1}s (limit 120s)",
            elapsed.as_secs_f64()
        ),
    )
}

fn strategy_lattice(m: &Models) -> Outcome {
    let mut bit_equal = true;
    let mut ape_worst = 0.0f32;
    for i in 0..24u64 {
        let task = TaskKind::ALL[i as usize % TaskKind::ALL.len()];
        let (case, pc, ac) = prepared(m, task, 384, 500 + i);
        let q = m.primary.tokenizer.encode(&case.query).unwrap();
        let direct = direct_reuse_prefill(&m.primary.model, &pc.caches, &q).unwrap();
        let clip0 = cacheclip_prefill(
            &m.primary.model,
            &m.aux.model,
            &pc,
            &ac,
            &case.query,
            &SelectionConfig::with_ratio(0.0),
            AttentionKnobs::NEUTRAL,
        )
        .unwrap();
        let (dm, cm) = (direct.merged.as_ref().unwrap(), clip0.merged.as_ref().unwrap());
        bit_equal &= dm.cache.bit_eq(&cm.cache)
            && direct.cache.bit_eq(&clip0.cache)
            && direct
                .logits
                .iter()
                .zip(&clip0.logits)
                .all(|(a, b)| a.to_bits() == b.to_bits());
        let ape = ape_prefill(
            &m.primary.model,
            &pc.caches,
            &q,
            ApeConfig {
                temperature: 1.0,
                scale: 1.0,
            },
        )
        .unwrap();
        ape_worst = ape_worst.max(max_abs(&ape.logits, &direct.logits));
    }
    report(
        "strategy-lattice identities",
        bit_equal && ape_worst <= 1e-6,
        format!(
            "24 cases: ratio 0 vs direct bit-identical = {bit_equal}; APE(1,1) vs direct max |logit diff| {ape_worst:.3e} (tol 1e-6)"
        ),
    )
}

fn position_contract() -> Outcome {
    let tiny = ModelConfig {
        n_layers: 1,
        n_heads: 2,
        n_kv_heads: None,
        d_model: 8,
        d_head: 4,
        d_ff: 8,
        vocab_size: 32,
        ..ModelConfig::toy_primary(32, "t")
    };
    let model = Model::init(tiny, 3).unwrap();
    let rope = model.config().rope();
    let mut runner = TestRunner::new(PropConfig {
        cases: 256,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let strategy = (0usize..6, prop::collection::vec(1usize..24, 1..=16), any::<u64>());
    let checked = std::cell::Cell::new(0usize);
    let result = runner.run(&strategy, |(prefix_len, lens, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prefix: Vec<u32> = (0..prefix_len).map(|_| rng.random_range(0..32)).collect();
        let chunks: Vec<_> = lens
            .iter()
            .map(|&n| {
                let ids: Vec<u32> = (0..n).map(|_| rng.random_range(0..32)).collect();
                model.prefill_chunk(&prefix, &ids, &mut Trace::default()).unwrap()
            })
            .collect();
        let merged = merge_caches(&chunks, &rope, &mut Trace::default()).unwrap();
        let l = prefix_len + lens.iter().sum::<usize>();
        let expect: Vec<usize> = (0..l).collect();
        prop_assert_eq!(&merged.cache.positions, &expect);
        prop_assert_eq!(&merged.layout.positions, &expect);
        let free: Vec<_> = lens
            .iter()
            .map(|&n| {
                let ids: Vec<u32> = (0..n).map(|_| rng.random_range(0..32)).collect();
                model.prefill_chunk(&[], &ids, &mut Trace::default()).unwrap()
            })
            .collect();
        let sink = (prefix_len > 0).then(|| model.prefill_chunk(&[], &prefix, &mut Trace::default()).unwrap());
        let cat = concat_caches(sink.as_ref(), &free, &rope, &mut Trace::default()).unwrap();
        prop_assert_eq!(&cat.cache.positions, &expect);
        checked.set(checked.get() + 1);
        Ok(())
    });
    report(
        "position contract",
        result.is_ok(),
        match result {
            Ok(()) => format!(
                "{} random layouts of 1-16 chunks: positions are exactly 0..L-1",
                checked.get()
            ),
            Err(e) => format!("counterexample: {e}"),
        },
    )
}

/// Window of chunk token `t`, computed from the rule directly.
fn oracle_window(len: usize, t: usize, window_len: usize, threshold: usize) -> usize {
    let full = len / window_len;
    let rem = len % window_len;
    let count = if rem == 0 || (rem < threshold && full > 0) {
        full
    } else {
        full + 1
    };
    (t / window_len).min(count.max(1) - 1)
}

fn check_plan(subset: &[usize], chunk_lens: &[usize], config: &SelectionConfig) -> std::result::Result<(), String> {
    let n: usize = chunk_lens.iter().sum();
    let mut scores = vec![0.0f32; n];
    for &i in subset {
        scores[i] = 1.0;
    }
    let ratio = subset.len() as f64 / n as f64;
    let sel = select_tokens(
        &ImportanceScores::new(scores, chunk_lens.to_vec()).unwrap(),
        &SelectionConfig {
            recomp_ratio: ratio,
            ..*config
        },
    )
    .map_err(|e| e.to_string())?;
    if sel.budget != subset.len() {
        return Err(format!("budget {} for {} candidates", sel.budget, subset.len()));
    }
    let locate = |i: usize| {
        let mut base = 0;
        for (c, &len) in chunk_lens.iter().enumerate() {
            if i < base + len {
                return (
                    c,
                    oracle_window(len, i - base, config.window_len, config.window_threshold),
                );
            }
            base += len;
        }
        unreachable!()
    };
    let count_in = |w: (usize, usize)| subset.iter().filter(|&&j| locate(j) == w).count();
    for &i in &sel.indices {
        if count_in(locate(i)) < config.window_threshold {
            return Err(format!(
                "token {i} kept from a window with fewer than {} candidates",
                config.window_threshold
            ));
        }
    }
    for &i in subset {
        let kept = sel.indices.binary_search(&i).is_ok();
        if kept != (count_in(locate(i)) >= config.window_threshold) {
            return Err(format!("candidate {i} kept={kept} disagrees with its window count"));
        }
    }
    Ok(())
}

fn window_rule() -> Outcome {
    let config = SelectionConfig::default();
    let mut layouts: Vec<Vec<usize>> = Vec::new();
    for n in 1..=18 {
        layouts.push(vec![n]);
    }
    for n in 2..=16 {
        for a in 1..n {
            layouts.push(vec![a, n - a]);
        }
    }
    let mut exhaustive = 0u64;
    let mut failure = None;
    'outer: for lens in &layouts {
        let n: usize = lens.iter().sum();
        for mask in 0u32..(1 << n) {
            let subset: Vec<usize> = (0..n).filter(|&i| mask >> i & 1 == 1).collect();
            if let Err(e) = check_plan(&subset, lens, &config) {
                failure = Some(format!("{lens:?} {subset:?}: {e}"));
                break 'outer;
            }
            exhaustive += 1;
        }
    }
    let mut sampled = 0u64;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    'sampled: for n in 19..=32usize {
        for split in [vec![n], vec![n / 3, n - n / 3], vec![7, 9, n - 16]] {
            for k in 0..=n {
                for _ in 0..40 {
                    let subset = {
                        let mut s = rand::seq::index::sample(&mut rng, n, k).into_vec();
                        s.sort_unstable();
                        s
                    };
                    if let Err(e) = check_plan(&subset, &split, &config) {
                        failure = Some(format!("{split:?} {subset:?}: {e}"));
                        break 'sampled;
                    }
                    sampled += 1;
                }
            }
        }
    }
    report(
        "window rule",
        failure.is_none(),
        failure.unwrap_or_else(|| {
            format!(
                "window 8 / threshold 5: every candidate subset of every budget for N <= 18 and two-chunk N <= 16 ({exhaustive} plans), plus {sampled} sampled plans for 19 <= N <= 32; no token kept from a window with < 5 candidates"
            )
        }),
    )
}

fn quality_trend(m: &Models) -> Outcome {
    let ratios = vec![0.0, 0.2, 0.5, 1.0];
    let config = SuiteConfig {
        cases: 100,
        length_tokens: 384,
        strategies: vec![Strategy::Full, Strategy::Cacheclip],
        ratios: ratios.clone(),
        ..SuiteConfig::default()
    };
    let r = kvreuse_core::bench::run_suite_with(&config, &m.primary, &m.aux).unwrap();
    let means: Vec<f64> = ratios
        .iter()
        .map(|&x| {
            let kls: Vec<f64> = r
                .rows
                .iter()
                .filter(|row| row.strategy == Strategy::Cacheclip && row.ratio == Some(x))
                .map(|row| row.kl)
                .collect();
            kls.iter().sum::<f64>() / kls.len() as f64
        })
        .collect();
    let monotone = means.windows(2).all(|w| w[1] <= w[0]);
    let violations = (0..config.cases)
        .filter(|&c| {
            let kl: Vec<f64> = ratios
                .iter()
                .map(|&x| {
                    r.rows
                        .iter()
                        .filter(|row| row.strategy == Strategy::Cacheclip && row.ratio == Some(x))
                        .nth(c)
                        .unwrap()
                        .kl
                })
                .collect();
            kl.windows(2).any(|w| w[1] > w[0])
        })
        .count();
    report(
        "quality-vs-ratio trend",
        monotone,
        format!(
            "mean next-token KL at ratios {{0, 0.2, 0.5, 1.0}} = [{:.4e}, {:.4e}, {:.4e}, {:.4e}] over 100 NIAH cases; {violations} cases non-monotone individually",
            means[0], means[1], means[2], means[3]
        ),
    )
}

fn flop_accounting(m: &Models) -> Outcome {
    let cfg = m.primary.model.config();
    let mut worst = 0.0f64;
    let mut closed_form_ok = true;
    let mut lens = Vec::new();
    for i in 0..12u64 {
        let task = TaskKind::ALL[i as usize % TaskKind::ALL.len()];
        let (case, pc, ac) = prepared(m, task, 436, 900 + i);
        let q = m.primary.tokenizer.encode(&case.query).unwrap();
        let full = full_prefill(&m.primary.model, &pc.flat_ids(), &q).unwrap();
        let l = full.cache.len();
        lens.push(l);
        let traced = count_flops(&full.trace).stage(Stage::Prefill);
        closed_form_ok &= traced == full_prefill_macs(cfg, l);
        let clip = cacheclip_prefill(
            &m.primary.model,
            &m.aux.model,
            &pc,
            &ac,
            &case.query,
            &SelectionConfig::with_ratio(0.2),
            AttentionKnobs::NEUTRAL,
        )
        .unwrap();
        let overhead = clip.flops.recompute.total() + clip.flops.selection.total();
        worst = worst.max(overhead as f64 / full_prefill_macs(cfg, l).total() as f64);
    }
    let (lo, hi) = (lens.iter().min().unwrap(), lens.iter().max().unwrap());
    report(
        "FLOP accounting",
        closed_form_ok && worst <= 0.35,
        format!(
            "ratio 0.2, L = {lo}..{hi}, 4 chunks: max (recompute + selection) / full prefill MACs = {worst:.4} (limit 0.35); traced full prefill equals closed form = {closed_form_ok}"
        ),
    )
}

fn cacheblend_fidelity(m: &Models) -> Outcome {
    let model = &m.primary.model;
    let rope = model.config().rope();
    let vocab = model.config().vocab_size as u32;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut instances = 0usize;
    let mut failure = None;
    'outer: for n in 2..=64usize {
        let n_chunks = rng.random_range(1..=4usize.min(n));
        let mut cuts: Vec<usize> = rand::seq::index::sample(&mut rng, n - 1, n_chunks - 1)
            .into_iter()
            .map(|c| c + 1)
            .collect();
        cuts.sort_unstable();
        cuts.insert(0, 0);
        cuts.push(n);
        let ids: Vec<u32> = (0..n).map(|_| rng.random_range(0..vocab)).collect();
        let prefix: Vec<u32> = (0..rng.random_range(1..6))
            .map(|_| rng.random_range(0..vocab))
            .collect();
        let sink = model.prefill_chunk(&[], &prefix, &mut Trace::default()).unwrap();
        let chunks: Vec<_> = cuts
            .windows(2)
            .map(|w| {
                model
                    .prefill_chunk(&[], &ids[w[0]..w[1]], &mut Trace::default())
                    .unwrap()
            })
            .collect();
        let merged = concat_caches(Some(&sink), &chunks, &rope, &mut Trace::default()).unwrap();
        // Every chunk row recomputed at layer 1 sees exactly the full-attention
        // bank, so the fresh layer-2 values are those of a full prefill.
        let all: Vec<u32> = prefix.iter().chain(&ids).copied().collect();
        let full = model.prefill_full(&all, Capture::None, &mut Trace::default()).unwrap();
        let p = prefix.len();
        let oracle: Vec<f64> = (0..n)
            .map(|i| {
                full.cache.values[1]
                    .row(p + i)
                    .iter()
                    .zip(merged.cache.values[1].row(p + i))
                    .map(|(a, b)| ((a - b) as f64).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| oracle[b].total_cmp(&oracle[a]).then(a.cmp(&b)));
        for k in 0..=n {
            let sel = cacheblend_select(model, &merged, k as f64 / n as f64, &mut Trace::default()).unwrap();
            let mut want: Vec<usize> = order[..k].iter().map(|&i| i + p).collect();
            want.sort_unstable();
            if sel.plan.indices != want {
                // Accept only swaps among scores tied to float precision.
                let boundary = if k > 0 { oracle[order[k - 1]] } else { f64::INFINITY };
                let tied = sel.plan.indices.iter().chain(&want).all(|&r| {
                    want.contains(&r) && sel.plan.indices.contains(&r) || (oracle[r - p] - boundary).abs() <= 1e-6
                });
                if !tied {
                    failure = Some(format!(
                        "N={n} k={k}: got {:?}, brute force {:?}",
                        sel.plan.indices, want
                    ));
                    break 'outer;
                }
            }
            instances += 1;
        }
    }
    let diag = run_suite(&SuiteConfig {
        cases: 24,
        length_tokens: 384,
        strategies: vec![Strategy::Cacheblend],
        ratios: vec![0.1, 0.2, 0.5],
        ..SuiteConfig::default()
    })
    .unwrap();
    for d in &diag.cacheblend_clustering {
        println!(
            "  cacheblend clustering (measured): ratio {} first-window share {:.4} vs uniform {:.4} over {} cases",
            d.ratio, d.mean_first_window_fraction, d.mean_uniform_baseline, d.cases
        );
    }
    report(
        "CacheBlend baseline fidelity",
        failure.is_none() && !diag.cacheblend_clustering.is_empty(),
        failure.unwrap_or_else(|| {
            format!("{instances} (N, budget) instances with N <= 64 match the brute-force sort of layer-2 value discrepancies; clustering diagnostic emitted")
        }),
    )
}

fn metric_suite() -> Outcome {
    let mut checks: Vec<(&str, bool)> = Vec::new();
    let close = |a: f64, b: f64, tol: f64| (a - b).abs() <= tol;
    let p = [0.2f32, 0.3, 0.5];
    checks.push(("kl(p,p)=0", close(kl_divergence(&p, &p).unwrap(), 0.0, 1e-9)));
    let point = [1.0f32, 0.0, 0.0, 0.0];
    let uniform = [0.25f32; 4];
    checks.push((
        "kl(point,uniform)=ln 4",
        close(kl_divergence(&point, &uniform).unwrap(), 4f64.ln(), 1e-6),
    ));
    checks.push((
        "kl([.5,.5],[.9,.1])=0.5108",
        close(kl_divergence(&[0.5, 0.5], &[0.9, 0.1]).unwrap(), 0.5108, 1e-4),
    ));
    checks.push(("kl length mismatch errors", kl_divergence(&[1.0], &[0.5, 0.5]).is_err()));
    let s = [0.9f32, 0.1, 0.5, 0.3];
    checks.push((
        "jaccard identical=1",
        close(jaccard_topk(&s, &s, 0.5).unwrap(), 1.0, 0.0),
    ));
    checks.push((
        "jaccard disjoint=0",
        close(
            jaccard_topk(&[1.0, 1.0, 0.0, 0.0], &[0.0, 0.0, 1.0, 1.0], 0.5).unwrap(),
            0.0,
            0.0,
        ),
    ));
    checks.push((
        "jaccard 1/3",
        close(
            jaccard_topk(&[3.0, 2.0, 0.0, 0.0], &[3.0, 0.0, 2.0, 0.0], 0.5).unwrap(),
            1.0 / 3.0,
            1e-12,
        ),
    ));
    checks.push((
        "next_token_kl identical=0",
        close(next_token_kl(&s, &s).unwrap(), 0.0, 1e-12),
    ));
    let shifted: Vec<f32> = s.iter().map(|x| x + 3.0).collect();
    checks.push((
        "next_token_kl shift=0",
        close(next_token_kl(&s, &shifted).unwrap(), 0.0, 1e-9),
    ));
    checks.push((
        "arc single needle=1",
        arc_score("the answer is 5663623.", &["5663623"]) == 1.0,
    ));
    checks.push((
        "arc 2 of 4=0.5",
        arc_score("1111111 and 2222222", &["1111111", "2222222", "3333333", "4444444"]) == 0.5,
    ));
    checks.push((
        "arc truncated 566362=0",
        arc_score("The number is 566362.", &["5663623"]) == 0.0,
    ));
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    report(
        "metric unit suite",
        failed.is_empty(),
        if failed.is_empty() {
            format!("{} closed-form checks", checks.len())
        } else {
            format!("failed: {}", failed.join(", "))
        },
    )
}

fn main() {
    let m = models();
    let outcomes = [
        full_selection_oracle(&m),
        strategy_lattice(&m),
        position_contract(),
        window_rule(),
        quality_trend(&m),
        flop_accounting(&m),
        cacheblend_fidelity(&m),
        metric_suite(),
    ];
    let failed: Vec<&Outcome> = outcomes.iter().filter(|o| !o.pass).collect();
    println!(
        "acceptance: {} of {} criteria pass",
        outcomes.len() - failed.len(),
        outcomes.len()
    );
    if !failed.is_empty() {
        for o in failed {
            eprintln!("failed: {} ({})", o.name, o.detail);
        }
        std::process::exit(1);
    }
}
