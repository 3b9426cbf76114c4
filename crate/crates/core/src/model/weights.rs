//! Weight manifest: a directory holding `manifest.json` plus raw
//! little-endian f32 tensor files.
//!
//! ```text
//! {
//!   "format": "kvreuse-weights",
//!   "version": 1,
//!   "dtype": "f32",
//!   "config": { ...ModelConfig... },
//!   "tensors": [ { "name": "embed", "shape": [V, D], "file": "weights.bin", "offset": 0 }, ... ],
//!   "source_digest": "optional free-form provenance string",
//!   "source_dtype": "optional dtype of the original checkpoint, e.g. bf16"
//! }
//! ```
//!
//! `offset` is in bytes; each tensor occupies `4 · Π shape` contiguous bytes
//! in row-major order. Projection matrices are `[in, out]`. Query/key
//! projection columns must be laid out so that rotary pairs are adjacent
//! `(2i, 2i+1)` within each head.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Activation, LayerWeights, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FORMAT_VERSION: u32 = 1;
const FORMAT_TAG: &str = "kvreuse-weights";
const DATA_FILE: &str = "weights.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightManifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_digest: Option<String>,
    /// Set when the converter upcast from a narrower dtype.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_dtype: Option<String>,
}

/// Tensors the forward pass needs for `config`, in canonical order.
pub(crate) fn expected_tensors(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, q, kv, ff) = (config.d_model, config.q_dim(), config.kv_dim(), config.d_ff);
    let mut out = vec![("embed".to_string(), vec![config.vocab_size, d])];
    for i in 0..config.n_layers {
        let p = |s: &str| format!("layers.{i}.{s}");
        out.push((p("attn_norm"), vec![d]));
        out.push((p("wq"), vec![d, q]));
        out.push((p("wk"), vec![d, kv]));
        out.push((p("wv"), vec![d, kv]));
        if config.attn_bias {
            out.push((p("bq"), vec![q]));
            out.push((p("bk"), vec![kv]));
            out.push((p("bv"), vec![kv]));
        }
        out.push((p("wo"), vec![q, d]));
        out.push((p("mlp_norm"), vec![d]));
        out.push((p("w_up"), vec![d, ff]));
        if config.activation == Activation::SwiGlu {
            out.push((p("w_gate"), vec![d, ff]));
        }
        out.push((p("w_down"), vec![ff, d]));
    }
    out.push(("final_norm".into(), vec![d]));
    if !config.tie_embeddings {
        out.push(("lm_head".into(), vec![d, config.vocab_size]));
    }
    out
}

pub(crate) fn expected_shape(config: &ModelConfig, name: &str) -> Option<Vec<usize>> {
    expected_tensors(config)
        .into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, s)| s)
}

fn manifest_location(path: &Path) -> (PathBuf, PathBuf) {
    if path.is_dir() {
        (path.join(MANIFEST_FILE), path.to_path_buf())
    } else {
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        (path.to_path_buf(), dir)
    }
}

/// Loads a model from a manifest directory (or the manifest file itself).
pub fn load_weights(manifest_path: impl AsRef<Path>) -> Result<Model> {
    let (manifest_file, dir) = manifest_location(manifest_path.as_ref());
    let text = fs::read_to_string(&manifest_file).map_err(|e| Error::io(&manifest_file, e))?;
    let manifest: WeightManifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT_TAG {
        return Err(Error::Manifest(format!(
            "format tag `{}`, expected `{FORMAT_TAG}`",
            manifest.format
        )));
    }
    if manifest.version != WEIGHTS_FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: manifest.version,
            expected: WEIGHTS_FORMAT_VERSION,
        });
    }
    if manifest.dtype != "f32" {
        return Err(Error::UnsupportedDtype(manifest.dtype));
    }
    let config = manifest.config.clone();
    config.validate()?;

    let entries: HashMap<&str, &TensorEntry> = manifest.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let mut files: HashMap<String, Vec<u8>> = HashMap::new();
    let mut tensors: HashMap<String, Vec<f32>> = HashMap::new();
    for (name, shape) in expected_tensors(&config) {
        let entry = entries
            .get(name.as_str())
            .ok_or_else(|| Error::MissingTensor(name.clone()))?;
        if entry.shape != shape {
            return Err(Error::ShapeMismatch {
                name,
                detail: format!("manifest shape {:?}, config implies {:?}", entry.shape, shape),
            });
        }
        if !files.contains_key(&entry.file) {
            let p = dir.join(&entry.file);
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            files.insert(entry.file.clone(), bytes);
        }
        let bytes = &files[&entry.file];
        let numel: usize = shape.iter().product();
        let start = entry.offset as usize;
        let end = start + numel * 4;
        if end > bytes.len() {
            return Err(Error::ShapeMismatch {
                name,
                detail: format!(
                    "needs bytes {start}..{end} of `{}` but the file has {}",
                    entry.file,
                    bytes.len()
                ),
            });
        }
        let data = bytes[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.insert(name, data);
    }

    let mut take_vec = |name: &str| -> Vec<f32> { tensors.remove(name).expect("checked above") };
    let embed = Matrix::new(config.vocab_size, config.d_model, take_vec("embed"))?;
    let (d, q, kv, ff) = (config.d_model, config.q_dim(), config.kv_dim(), config.d_ff);
    let mut layers = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        let p = |s: &str| format!("layers.{i}.{s}");
        let mut mat = |s: &str, r: usize, c: usize| Matrix::new(r, c, take_vec(&p(s)));
        let attn_norm = mat("attn_norm", 1, d)?.into_data();
        let wq = mat("wq", d, q)?;
        let wk = mat("wk", d, kv)?;
        let wv = mat("wv", d, kv)?;
        let (bq, bk, bv) = if config.attn_bias {
            (
                Some(mat("bq", 1, q)?.into_data()),
                Some(mat("bk", 1, kv)?.into_data()),
                Some(mat("bv", 1, kv)?.into_data()),
            )
        } else {
            (None, None, None)
        };
        let wo = mat("wo", q, d)?;
        let mlp_norm = mat("mlp_norm", 1, d)?.into_data();
        let w_up = mat("w_up", d, ff)?;
        let w_gate = if config.activation == Activation::SwiGlu {
            Some(mat("w_gate", d, ff)?)
        } else {
            None
        };
        let w_down = mat("w_down", ff, d)?;
        layers.push(LayerWeights {
            attn_norm,
            wq,
            wk,
            wv,
            bq,
            bk,
            bv,
            wo,
            mlp_norm,
            w_up,
            w_gate,
            w_down,
        });
    }
    let final_norm = take_vec("final_norm");
    let lm_head = if config.tie_embeddings {
        None
    } else {
        Some(Matrix::new(d, config.vocab_size, take_vec("lm_head"))?)
    };
    Model::from_parts(config, embed, layers, final_norm, lm_head)
}

/// Writes `model` as a manifest directory.
pub fn save_weights(model: &Model, dir: impl AsRef<Path>) -> Result<WeightManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (name, shape, data) in model.named_tensors() {
        tensors.push(TensorEntry {
            name,
            shape,
            file: DATA_FILE.into(),
            offset: blob.len() as u64,
        });
        for v in data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let data_path = dir.join(DATA_FILE);
    fs::write(&data_path, &blob).map_err(|e| Error::io(&data_path, e))?;
    let manifest = WeightManifest {
        format: FORMAT_TAG.into(),
        version: WEIGHTS_FORMAT_VERSION,
        dtype: "f32".into(),
        config: model.config().clone(),
        tensors,
        source_digest: Some(model.fingerprint().to_string()),
        source_dtype: None,
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest)
}
