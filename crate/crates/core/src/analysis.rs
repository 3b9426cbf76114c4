//! Distribution and retrieval metrics, and the cross-model attention
//! alignment study.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Capture, Model};
use crate::selector::top_k_indices;
use crate::trace::Trace;

pub const KL_EPSILON: f64 = 1e-10;

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!("lengths differ: {a} vs {b}")));
    }
    Ok(())
}

fn smoothed(p: &[f32]) -> Vec<f64> {
    let raw: Vec<f64> = p.iter().map(|&x| x.max(0.0) as f64 + KL_EPSILON).collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / z).collect()
}

/// `Σ p log(p/q)` in nats after adding 1e-10 to every entry of both
/// distributions and renormalizing.
pub fn kl_divergence(p: &[f32], q: &[f32]) -> Result<f64> {
    same_len(p.len(), q.len())?;
    if p.is_empty() {
        return Err(Error::EmptyInput("distribution"));
    }
    let (p, q) = (smoothed(p), smoothed(q));
    let kl: f64 = p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum();
    Ok(kl.max(0.0))
}

/// Jaccard index of the two top-`⌈frac·n⌉` index sets.
pub fn jaccard_topk(a: &[f32], b: &[f32], frac: f64) -> Result<f64> {
    same_len(a.len(), b.len())?;
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(Error::InvalidArgument(format!("frac {frac} is outside (0, 1]")));
    }
    if a.is_empty() {
        return Err(Error::EmptyInput("score vector"));
    }
    let k = crate::selector::budget(frac, a.len()).max(1);
    let (ta, tb) = (top_k_indices(a, k), top_k_indices(b, k));
    let inter = ta.iter().filter(|i| tb.binary_search(i).is_ok()).count();
    let union = ta.len() + tb.len() - inter;
    Ok(inter as f64 / union as f64)
}

fn log_softmax(logits: &[f32]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = logits.iter().map(|&x| (x as f64 - m).exp()).sum::<f64>().ln() + m;
    logits.iter().map(|&x| x as f64 - lse).collect()
}

/// `KL(softmax(a) ‖ softmax(b))` in nats.
pub fn next_token_kl(a: &[f32], b: &[f32]) -> Result<f64> {
    same_len(a.len(), b.len())?;
    if a.is_empty() {
        return Err(Error::EmptyInput("logits"));
    }
    let (la, lb) = (log_softmax(a), log_softmax(b));
    let kl: f64 = la.iter().zip(&lb).map(|(x, y)| x.exp() * (x - y)).sum();
    Ok(kl.max(0.0))
}

/// Fraction of references that occur verbatim in `prediction`; 0 when
/// there are no references.
pub fn arc_score(prediction: &str, references: &[impl AsRef<str>]) -> f64 {
    if references.is_empty() {
        return 0.0;
    }
    let hits = references.iter().filter(|r| prediction.contains(r.as_ref())).count();
    hits as f64 / references.len() as f64
}

/// Alignment figures for one input length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRow {
    pub length: usize,
    pub sequences: usize,
    /// Mean KL(aux last layer ‖ primary last layer).
    pub kl_aux_last: f64,
    /// Mean KL(primary first layer ‖ primary last layer).
    pub kl_primary_first: f64,
    pub jaccard_aux_last: f64,
    pub jaccard_primary_first: f64,
    /// Whether the auxiliary model's last layer is closer (lower KL) than
    /// the primary model's own first layer.
    pub aux_closer: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentStats {
    pub frac: f64,
    pub rows: Vec<AlignmentRow>,
}

impl AlignmentStats {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "length,sequences,kl_aux_last,kl_primary_first,jaccard_aux_last,jaccard_primary_first,aux_closer\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.length,
                r.sequences,
                crate::bench::round_sig(r.kl_aux_last),
                crate::bench::round_sig(r.kl_primary_first),
                crate::bench::round_sig(r.jaccard_aux_last),
                crate::bench::round_sig(r.jaccard_primary_first),
                r.aux_closer
            ));
        }
        out
    }
}

struct SeqStats {
    kl_aux: f64,
    kl_first: f64,
    jac_aux: f64,
    jac_first: f64,
}

fn final_row(model: &Model, ids: &[u32], layers: &[usize]) -> Result<Vec<Vec<f32>>> {
    let out = model.prefill_full(ids, Capture::Layers(layers.to_vec()), &mut Trace::default())?;
    let maps = out.maps.expect("capture requested");
    Ok(layers
        .iter()
        .map(|&l| maps.head_mean_row(l, ids.len() - 1).expect("layer captured"))
        .collect())
}

/// Compares the final position's head-averaged attention distribution of
/// `aux`'s last layer and `primary`'s first layer against `primary`'s last
/// layer, per sequence, then averages per input length.
pub fn alignment_study(aux: &Model, primary: &Model, corpus: &[Vec<u32>], frac: f64) -> Result<AlignmentStats> {
    if aux.config().tokenizer_id != primary.config().tokenizer_id {
        return Err(Error::InvalidArgument(format!(
            "models use different tokenizers (`{}` vs `{}`)",
            aux.config().tokenizer_id,
            primary.config().tokenizer_id
        )));
    }
    if corpus.is_empty() {
        return Err(Error::EmptyInput("corpus"));
    }
    let a_last = aux.config().n_layers - 1;
    let p_last = primary.config().n_layers - 1;
    let per_seq: Vec<(usize, SeqStats)> = corpus
        .par_iter()
        .map(|ids| -> Result<(usize, SeqStats)> {
            let a = final_row(aux, ids, &[a_last])?.remove(0);
            let mut p = final_row(primary, ids, &[0, p_last])?;
            let p_last_row = p.pop().expect("two layers");
            let p_first_row = p.pop().expect("two layers");
            Ok((
                ids.len(),
                SeqStats {
                    kl_aux: kl_divergence(&a, &p_last_row)?,
                    kl_first: kl_divergence(&p_first_row, &p_last_row)?,
                    jac_aux: jaccard_topk(&a, &p_last_row, frac)?,
                    jac_first: jaccard_topk(&p_first_row, &p_last_row, frac)?,
                },
            ))
        })
        .collect::<Result<_>>()?;
    let mut groups: BTreeMap<usize, Vec<SeqStats>> = BTreeMap::new();
    for (len, s) in per_seq {
        groups.entry(len).or_default().push(s);
    }
    let rows = groups
        .into_iter()
        .map(|(length, ss)| {
            let n = ss.len() as f64;
            let mean = |f: fn(&SeqStats) -> f64| ss.iter().map(f).sum::<f64>() / n;
            let kl_aux_last = mean(|s| s.kl_aux);
            let kl_primary_first = mean(|s| s.kl_first);
            AlignmentRow {
                length,
                sequences: ss.len(),
                kl_aux_last,
                kl_primary_first,
                jaccard_aux_last: mean(|s| s.jac_aux),
                jaccard_primary_first: mean(|s| s.jac_first),
                aux_closer: kl_aux_last < kl_primary_first,
            }
        })
        .collect();
    Ok(AlignmentStats { frac, rows })
}
