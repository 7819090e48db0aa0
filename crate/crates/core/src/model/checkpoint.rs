use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::config::ModelConfig;
use super::graph::MobileUnetr;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::{AdamWParams, OptimState};

const MAGIC: &[u8; 6] = b"MUTR1\n";
const FORMAT_VERSION: u32 = 1;
const MOMENT1: &str = "optimizer.m.";
const MOMENT2: &str = "optimizer.v.";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    optimizer: Option<OptimizerHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    byte_offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerHeader {
    step: u64,
    hyper: AdamWParams,
}

/// A loaded model with optional optimizer state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: MobileUnetr<f32>,
    pub optimizer: Option<OptimState>,
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions<'a> {
    /// Config the caller expects; a differing stored config is an error...
    pub expected: Option<&'a ModelConfig>,
    /// ...unless this is set and every stored tensor fits the expected model.
    pub allow_config_override: bool,
}

/// Serializes parameters, batch-norm buffers and optional AdamW moments.
pub fn encode_checkpoint(model: &MobileUnetr<f32>, optim: Option<&OptimState>) -> Vec<u8> {
    let store = model.store();
    let mut named: Vec<(String, &Tensor<f32>)> = Vec::new();
    named.extend(store.params().iter().map(|p| (p.name.clone(), &p.tensor)));
    named.extend(store.buffers().iter().map(|b| (b.name.clone(), &b.tensor)));
    if let Some(o) = optim {
        for (p, m) in store.params().iter().zip(&o.m) {
            named.push((format!("{MOMENT1}{}", p.name), m));
        }
        for (p, v) in store.params().iter().zip(&o.v) {
            named.push((format!("{MOMENT2}{}", p.name), v));
        }
    }

    let mut offset = 0u64;
    let tensors = named
        .iter()
        .map(|(name, t)| {
            let e = TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                byte_offset: offset,
            };
            offset += 4 * t.numel() as u64;
            e
        })
        .collect();
    let header = Header {
        version: FORMAT_VERSION,
        config: model.config().clone(),
        tensors,
        optimizer: optim.map(|o| OptimizerHeader {
            step: o.step,
            hyper: o.hyper.clone(),
        }),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");

    let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &named {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(model: &MobileUnetr<f32>, optim: Option<&OptimState>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model, optim))
        .map_err(|e| Error::io(format!("writing checkpoint {}", path.display()), e))
}

pub fn load_checkpoint(path: &Path, opts: &LoadOptions<'_>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
    decode_checkpoint(&bytes, opts)
}

/// First differing JSON path between two configs, with both values.
fn config_diff(expected: &Value, found: &Value, path: &str) -> Option<(String, String, String)> {
    match (expected, found) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, va) in a {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get(k) {
                    Some(vb) => {
                        if let Some(d) = config_diff(va, vb, &p) {
                            return Some(d);
                        }
                    }
                    None => return Some((p, va.to_string(), "nothing".into())),
                }
            }
            None
        }
        (Value::Array(a), Value::Array(b)) if a.len() == b.len() => a
            .iter()
            .zip(b)
            .enumerate()
            .find_map(|(i, (x, y))| config_diff(x, y, &format!("{path}[{i}]"))),
        (a, b) if a == b => None,
        (a, b) => Some((path.to_string(), a.to_string(), b.to_string())),
    }
}

pub fn decode_checkpoint(bytes: &[u8], opts: &LoadOptions<'_>) -> Result<Checkpoint> {
    let fmt = |s: &str| Error::CheckpointFormat(s.to_string());
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(fmt("bad magic bytes (not a MUTR1 checkpoint)"));
    }
    let rest = &bytes[MAGIC.len()..];
    let len_bytes: [u8; 8] = rest
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| fmt("truncated header length"))?;
    let header_len = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| fmt("header length overflow"))?;
    let header_bytes = rest.get(8..8usize.saturating_add(header_len)).ok_or_else(|| fmt("truncated header"))?;
    let blobs = &rest[8 + header_len..];
    let header: Header = serde_json::from_slice(header_bytes)
        .map_err(|e| Error::CheckpointFormat(format!("malformed header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(Error::CheckpointFormat(format!("unsupported version {}", header.version)));
    }

    let config = match opts.expected {
        Some(exp) if *exp != header.config => {
            if !opts.allow_config_override {
                let (field, expected, found) = config_diff(
                    &serde_json::to_value(exp)?,
                    &serde_json::to_value(&header.config)?,
                    "",
                )
                .unwrap_or_else(|| ("config".into(), "expected config".into(), "different config".into()));
                return Err(Error::ConfigMismatch { field, expected, found });
            }
            exp.clone()
        }
        _ => header.config.clone(),
    };
    let mut model = MobileUnetr::<f32>::build(&config, 0)?;

    let read = |e: &TensorEntry| -> Result<Tensor<f32>> {
        let n: usize = e.shape.iter().product();
        let start = usize::try_from(e.byte_offset).map_err(|_| fmt("offset overflow"))?;
        let raw = start
            .checked_add(4 * n)
            .and_then(|end| blobs.get(start..end))
            .ok_or_else(|| Error::CheckpointFormat(format!("truncated blob for `{}`", e.name)))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Tensor::new(&e.shape, data).map_err(|err| Error::CheckpointTensor {
            name: e.name.clone(),
            detail: err.to_string(),
        })
    };
    let find = |name: &str| header.tensors.iter().find(|e| e.name == name);
    let fill = |name: &str, dst: &mut Tensor<f32>| -> Result<()> {
        let e = find(name).ok_or_else(|| Error::CheckpointTensor {
            name: name.to_string(),
            detail: "missing from checkpoint".into(),
        })?;
        if e.shape != dst.shape() {
            return Err(Error::CheckpointTensor {
                name: name.to_string(),
                detail: format!("shape {:?} in file, model expects {:?}", e.shape, dst.shape()),
            });
        }
        *dst = read(e)?;
        Ok(())
    };

    let store = model.store_mut();
    for p in store.params_mut() {
        fill(&p.name.clone(), &mut p.tensor)?;
    }
    for b in store.buffers_mut() {
        fill(&b.name.clone(), &mut b.tensor)?;
    }
    let known: std::collections::HashSet<&str> = store
        .params()
        .iter()
        .map(|p| p.name.as_str())
        .chain(store.buffers().iter().map(|b| b.name.as_str()))
        .collect();
    if let Some(e) = header.tensors.iter().find(|e| {
        let base = e.name.strip_prefix(MOMENT1).or_else(|| e.name.strip_prefix(MOMENT2)).unwrap_or(&e.name);
        !known.contains(base)
    }) {
        return Err(Error::CheckpointTensor {
            name: e.name.clone(),
            detail: "not part of the model".into(),
        });
    }

    let optimizer = match header.optimizer {
        None => None,
        Some(h) => {
            let mut state = OptimState::new(store, h.hyper);
            state.step = h.step;
            for ((p, m), v) in store.params().iter().zip(&mut state.m).zip(&mut state.v) {
                fill(&format!("{MOMENT1}{}", p.name), m)?;
                fill(&format!("{MOMENT2}{}", p.name), v)?;
            }
            Some(state)
        }
    };
    Ok(Checkpoint { model, optimizer })
}
