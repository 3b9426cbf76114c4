//! Numerical fixtures for checking the engine against an independent
//! implementation of the same checkpoint.
//!
//! A fixture file is JSON:
//!
//! ```text
//! {
//!   "model_digest": "optional tag of the exporting checkpoint",
//!   "tokenizer_id": "...",
//!   "fixtures": [
//!     { "prompt": "Hello", "token_ids": [..], "logits": [..V floats..],
//!       "last_attention": [..n floats..] }
//!   ]
//! }
//! ```
//!
//! `logits` are the next-token logits after the final prompt token and
//! `last_attention` is the final row's last-layer attention, averaged over
//! heads.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Capture, Model};
use crate::tokenizer::Tokenizer;
use crate::trace::Trace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fixture {
    pub prompt: String,
    pub token_ids: Vec<u32>,
    pub logits: Vec<f32>,
    pub last_attention: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSet {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_digest: Option<String>,
    pub tokenizer_id: String,
    pub fixtures: Vec<Fixture>,
}

impl FixtureSet {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Largest deviations over a fixture set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixtureCheck {
    pub prompts: usize,
    pub max_logit_diff: f32,
    pub max_attention_diff: f32,
}

impl FixtureCheck {
    pub fn within(&self, tol: f32) -> bool {
        self.max_logit_diff <= tol && self.max_attention_diff <= tol
    }
}

fn run(model: &Model, ids: &[u32]) -> Result<(Vec<f32>, Vec<f32>)> {
    let last = model.config().n_layers - 1;
    let out = model.prefill_full(ids, Capture::Layers(vec![last]), &mut Trace::default())?;
    let row = out
        .maps
        .and_then(|m| m.head_mean_row(last, ids.len() - 1))
        .ok_or(Error::EmptyInput("attention capture"))?;
    Ok((out.logits, row))
}

/// Records the engine's own outputs in fixture form.
pub fn generate_fixtures(model: &Model, tokenizer: &Tokenizer, prompts: &[String]) -> Result<FixtureSet> {
    if prompts.is_empty() {
        return Err(Error::EmptyInput("fixture prompts"));
    }
    let fixtures = prompts
        .iter()
        .map(|p| {
            let token_ids = tokenizer.encode(p)?;
            let (logits, last_attention) = run(model, &token_ids)?;
            Ok(Fixture {
                prompt: p.clone(),
                token_ids,
                logits,
                last_attention,
            })
        })
        .collect::<Result<_>>()?;
    Ok(FixtureSet {
        model_digest: Some(model.fingerprint().to_string()),
        tokenizer_id: tokenizer.id().to_string(),
        fixtures,
    })
}

/// Replays every fixture through `model` and reports the worst deviations.
pub fn check_fixtures(model: &Model, set: &FixtureSet) -> Result<FixtureCheck> {
    if set.tokenizer_id != model.config().tokenizer_id {
        return Err(Error::InvalidArgument(format!(
            "fixtures use tokenizer `{}`, model uses `{}`",
            set.tokenizer_id,
            model.config().tokenizer_id
        )));
    }
    let mut check = FixtureCheck {
        prompts: 0,
        max_logit_diff: 0.0,
        max_attention_diff: 0.0,
    };
    for f in &set.fixtures {
        let (logits, attn) = run(model, &f.token_ids)?;
        if logits.len() != f.logits.len() || attn.len() != f.last_attention.len() {
            return Err(Error::Dimension(format!(
                "fixture `{}` has {} logits and {} attention weights, engine gives {} and {}",
                f.prompt,
                f.logits.len(),
                f.last_attention.len(),
                logits.len(),
                attn.len()
            )));
        }
        let diff = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        check.max_logit_diff = check.max_logit_diff.max(diff(&logits, &f.logits));
        check.max_attention_diff = check.max_attention_diff.max(diff(&attn, &f.last_attention));
        check.prompts += 1;
    }
    Ok(check)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{load_weights, save_weights, ModelConfig};

    fn model() -> (Model, Tokenizer) {
        let tok = Tokenizer::primary();
        let cfg = ModelConfig::toy_primary(tok.vocab_size(), tok.id());
        (Model::init(cfg, 4).unwrap(), tok)
    }

    #[test]
    fn fixtures_replay_through_saved_weights() {
        let (m, tok) = model();
        let prompts: Vec<String> = (0..20)
            .map(|i| format!("Hello number {i}, the grass is green."))
            .collect();
        let set = generate_fixtures(&m, &tok, &prompts).unwrap();
        let dir = tempfile::tempdir().unwrap();
        set.save(dir.path().join("fx.json")).unwrap();
        let back = FixtureSet::load(dir.path().join("fx.json")).unwrap();
        assert_eq!(back, set);
        for f in &back.fixtures {
            assert!(f.token_ids.iter().all(|&t| (t as usize) < m.config().vocab_size));
            assert!((f.last_attention.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
        save_weights(&m, dir.path().join("w")).unwrap();
        let loaded = load_weights(dir.path().join("w")).unwrap();
        let check = check_fixtures(&loaded, &back).unwrap();
        assert_eq!(check.prompts, 20);
        assert!(check.within(1e-3));
    }

    #[test]
    fn deviations_are_reported() {
        let (m, tok) = model();
        let mut set = generate_fixtures(&m, &tok, &["Hello".to_string()]).unwrap();
        set.fixtures[0].logits[3] += 0.5;
        let check = check_fixtures(&m, &set).unwrap();
        assert!((check.max_logit_diff - 0.5).abs() < 1e-5);
        assert!(!check.within(1e-3));
        set.fixtures[0].logits.pop();
        assert!(check_fixtures(&m, &set).is_err());
        set.tokenizer_id = "other".into();
        assert!(check_fixtures(&m, &set).is_err());
        assert!(generate_fixtures(&m, &tok, &[]).is_err());
    }
}
