//! Checkpoint archive: `INTENTCK` magic, little-endian `u32` header length,
//! a JSON header (format version, model config, tensor names and shapes,
//! free-form metadata), then every tensor as little-endian `f64` in header
//! order.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::{IntentModel, ModelConfig, ParamSet};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"INTENTCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub version: u32,
    pub model: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

/// Parameter names and shapes a model with this config registers, computed
/// without allocating the parameters.
pub fn param_layout(cfg: &ModelConfig) -> Vec<TensorEntry> {
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>| out.push(TensorEntry { name, shape });
    let mut in_ch = cfg.in_channels;
    for (i, &c) in cfg.backbone.channels.iter().enumerate() {
        push(format!("backbone.conv{i}.weight"), vec![c, in_ch, 3, 3]);
        push(format!("backbone.conv{i}.bias"), vec![c]);
        in_ch = c;
    }
    let mut fused = in_ch;
    if cfg.hashtag_dim > 0 {
        let [h0, h1] = cfg.mlp_hidden;
        push("mlp.fc0.weight".into(), vec![h0, cfg.hashtag_dim]);
        push("mlp.fc0.bias".into(), vec![h0]);
        push("mlp.fc1.weight".into(), vec![h1, h0]);
        push("mlp.fc1.bias".into(), vec![h1]);
        fused += h1;
    }
    push("classifier.weight".into(), vec![cfg.num_classes, fused]);
    push("classifier.bias".into(), vec![cfg.num_classes]);
    out
}

pub fn encode_checkpoint(model: &IntentModel, meta: &BTreeMap<String, String>) -> Vec<u8> {
    let params = model.params();
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        model: model.config().clone(),
        tensors: params
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        meta: meta.clone(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + header.len() + 8 * params.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in params.scalars() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn bad(msg: impl std::fmt::Display) -> Error {
    Error::parse("checkpoint", msg)
}

/// Parses and validates an archive, returning the header and model.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, IntentModel)> {
    let rest = bytes.strip_prefix(MAGIC.as_slice()).ok_or_else(|| bad("missing magic"))?;
    if rest.len() < 4 {
        return Err(bad("truncated header length"));
    }
    let (len, rest) = rest.split_at(4);
    let len = u32::from_le_bytes(len.try_into().expect("4 bytes")) as usize;
    if rest.len() < len {
        return Err(bad("truncated header"));
    }
    let (header, data) = rest.split_at(len);
    let header: CheckpointHeader = serde_json::from_slice(header).map_err(bad)?;
    if header.version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {}", header.version)));
    }
    header.model.validate()?;
    if header.tensors != param_layout(&header.model) {
        return Err(bad("tensor layout does not match the model config"));
    }
    let mut total = 0usize;
    for t in &header.tensors {
        let n = t
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| bad("tensor size overflows"))?;
        total = total.checked_add(n).ok_or_else(|| bad("tensor size overflows"))?;
    }
    if total.checked_mul(8) != Some(data.len()) {
        return Err(bad(format!(
            "expected {} tensor bytes, found {}",
            total.saturating_mul(8),
            data.len()
        )));
    }
    let mut params = ParamSet::new();
    let mut values = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        let v: Vec<f64> = values.by_ref().take(n).collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(bad(format!("non-finite value in {}", t.name)));
        }
        params.register(t.name.clone(), ArrayD::from_shape_vec(IxDyn(&t.shape), v).expect("sized"));
    }
    let model = IntentModel::from_parts(header.model.clone(), params)?;
    Ok((header, model))
}

pub fn save_checkpoint(model: &IntentModel, meta: &BTreeMap<String, String>, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, encode_checkpoint(model, meta)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, IntentModel)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TinyConvConfig;

    fn cfg(hashtag_dim: usize) -> ModelConfig {
        ModelConfig {
            num_classes: 4,
            backbone: TinyConvConfig {
                channels: vec![3, 5],
                strides: vec![2, 1],
            },
            hashtag_dim,
            mlp_hidden: [6, 2],
            ..Default::default()
        }
    }

    #[test]
    fn layout_matches_built_model() {
        for d in [0, 3] {
            let m = IntentModel::new(cfg(d), 0.01, 0).unwrap();
            let built: Vec<TensorEntry> = m
                .params()
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect();
            assert_eq!(built, param_layout(&cfg(d)));
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let m = IntentModel::new(cfg(3), 0.01, 7).unwrap();
        let meta: BTreeMap<String, String> = [("epoch".to_string(), "3".to_string())].into();
        let bytes = encode_checkpoint(&m, &meta);
        let (h, back) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(h.meta, meta);
        assert_eq!(back.params(), m.params());
        assert_eq!(encode_checkpoint(&back, &meta), bytes);
    }

    #[test]
    fn corrupt_archives_are_rejected() {
        let m = IntentModel::new(cfg(0), 0.01, 7).unwrap();
        let bytes = encode_checkpoint(&m, &BTreeMap::new());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_checkpoint(&bytes[1..]).is_err());
        assert!(decode_checkpoint(b"INTENTCK\xff\xff\xff\xff{}").is_err());
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0; 8]);
        assert!(decode_checkpoint(&extra).is_err());
        let mut nan = bytes.clone();
        let n = nan.len();
        nan[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(decode_checkpoint(&nan).is_err());
    }
}
