//! Weight file format.
//!
//! ```text
//! [u64 LE header length][JSON header][tensor data, f64 LE]
//! ```
//!
//! The header carries the [`ModelConfig`] and one record per tensor with its
//! name, shape and byte offset relative to the start of the data section.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{LayerWeights, Matrix, ModelConfig, ModelWeights};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsHeader {
    pub config: ModelConfig,
    pub tensors: Vec<TensorInfo>,
}

fn expected_tensors(c: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = c.model_dim();
    let q = c.n_query_heads * c.head_dim;
    let kv = c.n_kv_heads * c.head_dim;
    let h = c.ffn_hidden();
    let mut out = vec![("embed".to_string(), vec![c.vocab_size, d])];
    for i in 0..c.n_layers {
        let p = |n: &str| format!("layers.{i}.{n}");
        out.extend([
            (p("attn_norm"), vec![d]),
            (p("wq"), vec![d, q]),
            (p("wk"), vec![d, kv]),
            (p("wv"), vec![d, kv]),
            (p("wo"), vec![q, d]),
            (p("ffn_norm"), vec![d]),
            (p("w_gate"), vec![d, h]),
            (p("w_up"), vec![d, h]),
            (p("w_down"), vec![h, d]),
        ]);
    }
    out.push(("final_norm".to_string(), vec![d]));
    out.push(("lm_head".to_string(), vec![d, c.vocab_size]));
    out
}

fn flatten(w: &ModelWeights) -> Vec<&[f64]> {
    let mut out: Vec<&[f64]> = vec![&w.embed.data];
    for l in &w.layers {
        out.extend([
            l.attn_norm.as_slice(),
            &l.wq.data,
            &l.wk.data,
            &l.wv.data,
            &l.wo.data,
            &l.ffn_norm,
            &l.w_gate.data,
            &l.w_up.data,
            &l.w_down.data,
        ]);
    }
    out.push(&w.final_norm);
    out.push(&w.lm_head.data);
    out
}

pub(crate) fn check_shapes(config: &ModelConfig, w: &ModelWeights) -> Result<()> {
    if w.layers.len() != config.n_layers {
        return Err(Error::config("layer count does not match config"));
    }
    let shapes = expected_tensors(config);
    for ((name, shape), data) in shapes.iter().zip(flatten(w)) {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::config(format!("tensor {name} has the wrong size")));
        }
    }
    Ok(())
}

/// Serialise a model into the weight file format.
pub fn write_weights(config: &ModelConfig, weights: &ModelWeights) -> Result<Vec<u8>> {
    config.validate()?;
    check_shapes(config, weights)?;
    let mut offset = 0u64;
    let tensors = expected_tensors(config)
        .into_iter()
        .map(|(name, shape)| {
            let info = TensorInfo {
                name,
                offset,
                shape: shape.clone(),
            };
            offset += shape.iter().product::<usize>() as u64 * 8;
            info
        })
        .collect();
    let header = serde_json::to_vec(&WeightsHeader {
        config: config.clone(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(8 + header.len() + offset as usize);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in flatten(weights) {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parse a weight file. Every malformed input is an error, never a panic.
pub fn read_weights(bytes: &[u8]) -> Result<(ModelConfig, ModelWeights)> {
    let len_bytes: [u8; 8] = bytes
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::format("weight file shorter than its length prefix"))?;
    let header_len = usize::try_from(u64::from_le_bytes(len_bytes))
        .map_err(|_| Error::format("header length overflows"))?;
    let data_start = header_len
        .checked_add(8)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::format("header extends past end of file"))?;
    let header: WeightsHeader = serde_json::from_slice(&bytes[8..data_start])
        .map_err(|e| Error::format(format!("weight header: {e}")))?;
    header.config.validate()?;
    let data = &bytes[data_start..];

    let mut by_name: HashMap<&str, &TensorInfo> = HashMap::new();
    for t in &header.tensors {
        if by_name.insert(t.name.as_str(), t).is_some() {
            return Err(Error::format(format!("duplicate tensor {}", t.name)));
        }
    }
    let expected = expected_tensors(&header.config);
    if by_name.len() != expected.len() {
        return Err(Error::format(format!(
            "expected {} tensors, header lists {}",
            expected.len(),
            by_name.len()
        )));
    }

    let mut tensors = Vec::with_capacity(expected.len());
    for (name, shape) in &expected {
        let info = by_name
            .get(name.as_str())
            .ok_or_else(|| Error::format(format!("missing tensor {name}")))?;
        if &info.shape != shape {
            return Err(Error::format(format!(
                "tensor {name} has shape {:?}, expected {shape:?}",
                info.shape
            )));
        }
        let start = usize::try_from(info.offset)
            .ok()
            .filter(|o| o % 8 == 0)
            .ok_or_else(|| Error::format(format!("tensor {name} offset misaligned")))?;
        let end = shape
            .iter()
            .try_fold(8usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_add(start))
            .filter(|&end| end <= data.len())
            .ok_or_else(|| Error::format(format!("tensor {name} extends past end of file")))?;
        let values: Vec<f64> = data[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of eight")))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(format!("tensor {name} holds non-finite values")));
        }
        tensors.push((shape.clone(), values));
    }

    let mut it = tensors.into_iter();
    let mut matrix = || {
        let (shape, data) = it.next().expect("tensor count checked");
        match shape.as_slice() {
            [rows, cols] => Matrix {
                rows: *rows,
                cols: *cols,
                data,
            },
            _ => Matrix {
                rows: 1,
                cols: data.len(),
                data,
            },
        }
    };
    let embed = matrix();
    let layers = (0..header.config.n_layers)
        .map(|_| LayerWeights {
            attn_norm: matrix().data,
            wq: matrix(),
            wk: matrix(),
            wv: matrix(),
            wo: matrix(),
            ffn_norm: matrix().data,
            w_gate: matrix(),
            w_up: matrix(),
            w_down: matrix(),
        })
        .collect();
    let final_norm = matrix().data;
    let lm_head = matrix();
    Ok((
        header.config,
        ModelWeights {
            embed,
            layers,
            final_norm,
            lm_head,
        },
    ))
}
