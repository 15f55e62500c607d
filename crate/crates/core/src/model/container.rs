//! Binary tensor container.
//!
//! Layout: 8-byte unsigned little-endian header length `N`, then `N` bytes
//! of UTF-8 JSON mapping each tensor name to
//! `{"dtype": "F32", "shape": [...], "data_offsets": [begin, end]}`
//! (offsets into the payload that follows), then the concatenated raw
//! little-endian f32 payload. A `__metadata__` entry carries the model
//! config as a JSON string. Tensors are written in sorted name order, so
//! saving is byte-deterministic.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::config::ModelConfig;
use super::tokenizer::Tokenizer;
use super::weights::{Block, Model};
use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

fn expected_tensors(cfg: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
    let d = cfg.d_model;
    let dm = cfg.d_mlp;
    let mut m = BTreeMap::new();
    m.insert("tok_emb".into(), vec![cfg.vocab_size, d]);
    m.insert("pos_emb".into(), vec![cfg.max_seq, d]);
    m.insert("unembed".into(), vec![d, cfg.vocab_size]);
    m.insert("ln_f.w".into(), vec![d]);
    m.insert("ln_f.b".into(), vec![d]);
    for l in 0..cfg.n_layers {
        m.insert(format!("blocks.{l}.ln1.w"), vec![d]);
        m.insert(format!("blocks.{l}.ln1.b"), vec![d]);
        for name in ["q", "k", "v", "o"] {
            m.insert(format!("blocks.{l}.attn.{name}.w"), vec![d, d]);
            m.insert(format!("blocks.{l}.attn.{name}.b"), vec![d]);
        }
        m.insert(format!("blocks.{l}.ln2.w"), vec![d]);
        m.insert(format!("blocks.{l}.ln2.b"), vec![d]);
        m.insert(format!("blocks.{l}.mlp.fc.w"), vec![d, dm]);
        m.insert(format!("blocks.{l}.mlp.fc.b"), vec![dm]);
        m.insert(format!("blocks.{l}.mlp.proj.w"), vec![dm, d]);
        m.insert(format!("blocks.{l}.mlp.proj.b"), vec![d]);
    }
    m
}

fn collect_tensors<'m>(model: &'m Model) -> BTreeMap<String, (&'m [f32], Vec<usize>)> {
    let cfg = &model.config;
    let d = cfg.d_model;
    let dm = cfg.d_mlp;
    let mut m: BTreeMap<String, (&[f32], Vec<usize>)> = BTreeMap::new();
    m.insert("tok_emb".into(), (&model.tok_emb.data, vec![cfg.vocab_size, d]));
    m.insert("pos_emb".into(), (&model.pos_emb.data, vec![cfg.max_seq, d]));
    m.insert("unembed".into(), (&model.unembed.data, vec![d, cfg.vocab_size]));
    m.insert("ln_f.w".into(), (&model.ln_f_w, vec![d]));
    m.insert("ln_f.b".into(), (&model.ln_f_b, vec![d]));
    for (l, b) in model.blocks.iter().enumerate() {
        m.insert(format!("blocks.{l}.ln1.w"), (&b.ln1_w, vec![d]));
        m.insert(format!("blocks.{l}.ln1.b"), (&b.ln1_b, vec![d]));
        m.insert(format!("blocks.{l}.attn.q.w"), (&b.attn_q_w.data, vec![d, d]));
        m.insert(format!("blocks.{l}.attn.q.b"), (&b.attn_q_b, vec![d]));
        m.insert(format!("blocks.{l}.attn.k.w"), (&b.attn_k_w.data, vec![d, d]));
        m.insert(format!("blocks.{l}.attn.k.b"), (&b.attn_k_b, vec![d]));
        m.insert(format!("blocks.{l}.attn.v.w"), (&b.attn_v_w.data, vec![d, d]));
        m.insert(format!("blocks.{l}.attn.v.b"), (&b.attn_v_b, vec![d]));
        m.insert(format!("blocks.{l}.attn.o.w"), (&b.attn_o_w.data, vec![d, d]));
        m.insert(format!("blocks.{l}.attn.o.b"), (&b.attn_o_b, vec![d]));
        m.insert(format!("blocks.{l}.ln2.w"), (&b.ln2_w, vec![d]));
        m.insert(format!("blocks.{l}.ln2.b"), (&b.ln2_b, vec![d]));
        m.insert(format!("blocks.{l}.mlp.fc.w"), (&b.w_fc.data, vec![d, dm]));
        m.insert(format!("blocks.{l}.mlp.fc.b"), (&b.b_fc, vec![dm]));
        m.insert(format!("blocks.{l}.mlp.proj.w"), (&b.w_proj.data, vec![dm, d]));
        m.insert(format!("blocks.{l}.mlp.proj.b"), (&b.b_proj, vec![d]));
    }
    m
}

/// Serialize a model to container bytes.
pub fn save_to_vec(model: &Model) -> Result<Vec<u8>> {
    let tensors = collect_tensors(model);
    let mut header: BTreeMap<String, Value> = BTreeMap::new();
    let mut offset = 0usize;
    let mut payload: Vec<u8> = Vec::new();
    for (name, (data, shape)) in &tensors {
        let nbytes = data.len() * 4;
        header.insert(
            name.clone(),
            serde_json::to_value(TensorEntry {
                dtype: "F32".into(),
                shape: shape.clone(),
                data_offsets: [offset, offset + nbytes],
            })?,
        );
        for &v in *data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        offset += nbytes;
    }
    let mut meta = serde_json::Map::new();
    meta.insert(
        "config".into(),
        Value::String(serde_json::to_string(&model.config)?),
    );
    header.insert("__metadata__".into(), Value::Object(meta));

    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + header_bytes.len() + payload.len());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save_weights(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, save_to_vec(model)?)?;
    Ok(())
}

/// Parse container bytes into a model.
pub fn load_from_slice(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 8 {
        return Err(Error::MalformedHeader(format!(
            "file is {} bytes, need at least 8",
            bytes.len()
        )));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    if n > bytes.len() - 8 {
        return Err(Error::MalformedHeader(format!(
            "header length field {} larger than remaining file size {}",
            n,
            bytes.len() - 8
        )));
    }
    let header_text = std::str::from_utf8(&bytes[8..8 + n])
        .map_err(|e| Error::BadMetadata(format!("header is not UTF-8: {e}")))?;
    let header: BTreeMap<String, Value> = serde_json::from_str(header_text)
        .map_err(|e| Error::BadMetadata(format!("header is not valid JSON: {e}")))?;
    let payload = &bytes[8 + n..];

    let config: ModelConfig = match header.get("__metadata__").and_then(|m| m.get("config")) {
        Some(Value::String(s)) => serde_json::from_str(s)
            .map_err(|e| Error::BadMetadata(format!("bad config metadata: {e}")))?,
        _ => {
            return Err(Error::BadMetadata(
                "missing __metadata__.config entry".into(),
            ))
        }
    };
    config.validate()?;

    let expected = expected_tensors(&config);
    let mut entries: BTreeMap<String, TensorEntry> = BTreeMap::new();
    for (name, value) in &header {
        if name == "__metadata__" {
            continue;
        }
        let entry: TensorEntry = serde_json::from_value(value.clone())
            .map_err(|e| Error::BadMetadata(format!("tensor {name}: {e}")))?;
        entries.insert(name.clone(), entry);
    }

    let missing: Vec<String> = expected
        .keys()
        .filter(|k| !entries.contains_key(*k))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingTensors(missing));
    }
    let extra: Vec<String> = entries
        .keys()
        .filter(|k| !expected.contains_key(*k))
        .cloned()
        .collect();
    if !extra.is_empty() {
        return Err(Error::ExtraTensors(extra));
    }

    let read_tensor = |name: &str| -> Result<Vec<f32>> {
        let entry = &entries[name];
        let shape = &expected[name];
        if entry.dtype != "F32" {
            return Err(Error::TensorMismatch {
                name: name.into(),
                expected: "F32".into(),
                got: entry.dtype.clone(),
            });
        }
        if &entry.shape != shape {
            return Err(Error::TensorMismatch {
                name: name.into(),
                expected: format!("{shape:?}"),
                got: format!("{:?}", entry.shape),
            });
        }
        let [begin, end] = entry.data_offsets;
        let numel: usize = shape.iter().product();
        if end < begin || end - begin != numel * 4 {
            return Err(Error::TensorMismatch {
                name: name.into(),
                expected: format!("{} bytes", numel * 4),
                got: format!("offsets [{begin}, {end})"),
            });
        }
        if end > payload.len() {
            return Err(Error::TruncatedPayload(format!(
                "tensor {name} ends at {end} but payload is {} bytes",
                payload.len()
            )));
        }
        Ok(payload[begin..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };

    let d = config.d_model;
    let dm = config.d_mlp;
    let mut blocks = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        blocks.push(Block {
            ln1_w: read_tensor(&format!("blocks.{l}.ln1.w"))?,
            ln1_b: read_tensor(&format!("blocks.{l}.ln1.b"))?,
            attn_q_w: Mat::from_vec(d, d, read_tensor(&format!("blocks.{l}.attn.q.w"))?),
            attn_q_b: read_tensor(&format!("blocks.{l}.attn.q.b"))?,
            attn_k_w: Mat::from_vec(d, d, read_tensor(&format!("blocks.{l}.attn.k.w"))?),
            attn_k_b: read_tensor(&format!("blocks.{l}.attn.k.b"))?,
            attn_v_w: Mat::from_vec(d, d, read_tensor(&format!("blocks.{l}.attn.v.w"))?),
            attn_v_b: read_tensor(&format!("blocks.{l}.attn.v.b"))?,
            attn_o_w: Mat::from_vec(d, d, read_tensor(&format!("blocks.{l}.attn.o.w"))?),
            attn_o_b: read_tensor(&format!("blocks.{l}.attn.o.b"))?,
            ln2_w: read_tensor(&format!("blocks.{l}.ln2.w"))?,
            ln2_b: read_tensor(&format!("blocks.{l}.ln2.b"))?,
            w_fc: Mat::from_vec(d, dm, read_tensor(&format!("blocks.{l}.mlp.fc.w"))?),
            b_fc: read_tensor(&format!("blocks.{l}.mlp.fc.b"))?,
            w_proj: Mat::from_vec(dm, d, read_tensor(&format!("blocks.{l}.mlp.proj.w"))?),
            b_proj: read_tensor(&format!("blocks.{l}.mlp.proj.b"))?,
        });
    }

    let tokenizer = match config.tokenizer_mode {
        super::config::TokenizerMode::Byte => Tokenizer::Byte,
        // BPE vocab/merges ship separately; loading them replaces this.
        super::config::TokenizerMode::Bpe => {
            return Err(Error::BpeFilesMissing);
        }
    };

    Ok(Model {
        tok_emb: Mat::from_vec(config.vocab_size, d, read_tensor("tok_emb")?),
        pos_emb: Mat::from_vec(config.max_seq, d, read_tensor("pos_emb")?),
        unembed: Mat::from_vec(d, config.vocab_size, read_tensor("unembed")?),
        ln_f_w: read_tensor("ln_f.w")?,
        ln_f_b: read_tensor("ln_f.b")?,
        blocks,
        tokenizer,
        config,
    })
}

pub fn load_weights(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path)?;
    load_from_slice(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::rng_for;

    fn model(seed: u64) -> Model {
        let cfg = ModelConfig::byte(2, 8, 16, 2);
        Model::random(cfg, &mut rng_for(seed, "container", 0)).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise_exact() {
        let m = model(1);
        let bytes = save_to_vec(&m).unwrap();
        let loaded = load_from_slice(&bytes).unwrap();
        assert_eq!(m, loaded);
        // saving again yields identical bytes
        assert_eq!(bytes, save_to_vec(&loaded).unwrap());
    }

    #[test]
    fn oversized_header_length_is_truncated_payload_class_error() {
        let m = model(2);
        let mut bytes = save_to_vec(&m).unwrap();
        let huge = (bytes.len() as u64) * 2;
        bytes[..8].copy_from_slice(&huge.to_le_bytes());
        assert!(matches!(
            load_from_slice(&bytes),
            Err(Error::MalformedHeader(_))
        ));
    }

    #[test]
    fn truncated_payload_is_detected() {
        let m = model(3);
        let bytes = save_to_vec(&m).unwrap();
        let cut = &bytes[..bytes.len() - 10];
        assert!(matches!(
            load_from_slice(cut),
            Err(Error::TruncatedPayload(_))
        ));
    }

    #[test]
    fn non_json_metadata_is_rejected() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&4u64.to_le_bytes());
        bytes.extend_from_slice(b"not{");
        assert!(matches!(load_from_slice(&bytes), Err(Error::BadMetadata(_))));
    }

    #[test]
    fn missing_tensor_is_reported_by_name() {
        let m = model(4);
        let bytes = save_to_vec(&m).unwrap();
        // rebuild the container without one tensor
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let text = std::str::from_utf8(&bytes[8..8 + n]).unwrap();
        let mut header: BTreeMap<String, Value> = serde_json::from_str(text).unwrap();
        header.remove("tok_emb").unwrap();
        let new_header = serde_json::to_vec(&header).unwrap();
        let mut out = Vec::new();
        out.extend_from_slice(&(new_header.len() as u64).to_le_bytes());
        out.extend_from_slice(&new_header);
        out.extend_from_slice(&bytes[8 + n..]);
        match load_from_slice(&out) {
            Err(Error::MissingTensors(names)) => assert_eq!(names, vec!["tok_emb".to_string()]),
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.st");
        let m = model(5);
        save_weights(&m, &path).unwrap();
        let loaded = load_weights(&path).unwrap();
        assert_eq!(m, loaded);
    }
}
