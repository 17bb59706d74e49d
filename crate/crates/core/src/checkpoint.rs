//! Binary checkpoint format.
//!
//! Layout: magic `RNP1`, a little-endian `u32` header length, a JSON header
//! (config echo, run metadata, tensor directory), then raw little-endian `f32`
//! payloads in directory order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ModelState;
use crate::tensor::{DType, Tensor};

pub const MAGIC: &[u8; 4] = b"RNP1";
pub const FORMAT_VERSION: u32 = 1;

const PARAM: &str = "param";
const BUFFER: &str = "buffer";
const EMA_PARAM: &str = "ema.param";
const EMA_BUFFER: &str = "ema.buffer";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub best_val_acc: f64,
    pub class_names: Vec<String>,
    pub image_size: usize,
    pub normalization: Normalization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

/// A decoded checkpoint: config echo, metadata, and named tensors.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: CheckpointMeta,
    tensors: Vec<(String, Tensor<f32>)>,
}

fn qualified(group: &str, name: &str) -> String {
    format!("{group}:{name}")
}

/// Serializes raw weights, batch-norm statistics and (optionally) the EMA
/// shadow of `model` to `path`.
pub fn save(path: &Path, model: &Model<f32>, ema: Option<&ModelState<f32>>, meta: &CheckpointMeta) -> Result<()> {
    let bytes = encode(model, ema, meta)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn collect_named<'a>(
    model: &Model<f32>,
    state: &'a ModelState<f32>,
    param_group: &str,
    buffer_group: &str,
    out: &mut Vec<(String, &'a Tensor<f32>)>,
) {
    let reg = model.registry();
    for (name, t) in reg.params.iter().zip(&state.params) {
        out.push((qualified(param_group, name), t));
    }
    for (name, t) in reg.buffers.iter().zip(&state.buffers) {
        out.push((qualified(buffer_group, name), t));
    }
}

pub fn encode(model: &Model<f32>, ema: Option<&ModelState<f32>>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut named = Vec::new();
    collect_named(model, model.state(), PARAM, BUFFER, &mut named);
    if let Some(ema) = ema {
        if !model.state().same_layout(ema) {
            return Err(Error::Format("EMA state layout differs from the model".into()));
        }
        collect_named(model, ema, EMA_PARAM, EMA_BUFFER, &mut named);
    }

    let mut offset = 0u64;
    let tensors = named
        .iter()
        .map(|(name, t)| {
            let entry = TensorEntry {
                name: name.clone(),
                dtype: DType::F32,
                shape: t.shape().to_vec(),
                offset,
            };
            offset += 4 * t.len() as u64;
            entry
        })
        .collect();
    let header = Header {
        format_version: FORMAT_VERSION,
        config: model.config().clone(),
        meta: meta.clone(),
        tensors,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + header_bytes.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, t) in &named {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    decode(&bytes)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing RNP1 magic bytes".into()));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let header_end = 8usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::Format("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[8..header_end])
        .map_err(|e| Error::Format(format!("unreadable header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "format version {} (this build reads {})",
            header.format_version, FORMAT_VERSION
        )));
    }
    let payload = &bytes[header_end..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        if entry.dtype != DType::F32 {
            return Err(Error::TensorMismatch {
                name: entry.name.clone(),
                reason: format!("unsupported dtype {:?}", entry.dtype),
            });
        }
        let count: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + 4 * count;
        if end > payload.len() {
            return Err(Error::TensorMismatch {
                name: entry.name.clone(),
                reason: "payload truncated".into(),
            });
        }
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(&entry.shape, data).map_err(|e| Error::TensorMismatch {
            name: entry.name.clone(),
            reason: e.to_string(),
        })?;
        tensors.push((entry.name.clone(), t));
    }
    Ok(Checkpoint {
        config: header.config,
        meta: header.meta,
        tensors,
    })
}

impl Checkpoint {
    fn find(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn has_ema(&self) -> bool {
        self.tensors.iter().any(|(n, _)| n.starts_with(EMA_PARAM))
    }

    fn state_for(&self, model: &Model<f32>, pg: &str, bg: &str) -> Result<ModelState<f32>> {
        let reg = model.registry();
        let pick = |group: &str, names: &[String], current: &[Tensor<f32>]| -> Result<Vec<Tensor<f32>>> {
            names
                .iter()
                .zip(current)
                .map(|(name, cur)| {
                    let full = qualified(group, name);
                    let t = self.find(&full).ok_or_else(|| Error::TensorMismatch {
                        name: full.clone(),
                        reason: "missing from checkpoint".into(),
                    })?;
                    if t.shape() != cur.shape() {
                        return Err(Error::TensorMismatch {
                            name: full,
                            reason: format!("checkpoint shape {:?}, model expects {:?}", t.shape(), cur.shape()),
                        });
                    }
                    Ok(t.clone())
                })
                .collect()
        };
        Ok(ModelState {
            params: pick(pg, &reg.params, &model.state().params)?,
            buffers: pick(bg, &reg.buffers, &model.state().buffers)?,
        })
    }

    /// Copies the raw weights into `model`, checking every name and shape.
    /// Returns the EMA shadow when the checkpoint carries one.
    pub fn restore_into(&self, model: &mut Model<f32>) -> Result<Option<ModelState<f32>>> {
        let raw = self.state_for(model, PARAM, BUFFER)?;
        let ema = if self.has_ema() {
            Some(self.state_for(model, EMA_PARAM, EMA_BUFFER)?)
        } else {
            None
        };
        model.set_state(raw)?;
        Ok(ema)
    }

    /// Rebuilds the model from the config echo and restores its weights.
    pub fn into_model(&self) -> Result<(Model<f32>, Option<ModelState<f32>>)> {
        let mut model = Model::build(&self.config, 0)?;
        let ema = self.restore_into(&mut model)?;
        Ok((model, ema))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            epoch: 3,
            best_val_acc: 0.5,
            class_names: vec!["a".into(), "b".into(), "c".into()],
            image_size: 32,
            normalization: Normalization::synthetic(),
        }
    }

    fn tiny() -> Model<f32> {
        Model::build(&ModelConfig::resnet50_plus(3).with_width(0.125), 5).unwrap()
    }

    #[test]
    fn corrupt_magic_is_a_format_error() {
        let model = tiny();
        let mut bytes = encode(&model, None, &meta()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload_names_the_tensor() {
        let model = tiny();
        let bytes = encode(&model, None, &meta()).unwrap();
        let cut = &bytes[..bytes.len() - 10];
        match decode(cut) {
            Err(Error::TensorMismatch { name, .. }) => assert!(name.starts_with("buffer:stage4"), "{name}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_class_count_names_fc() {
        let model = tiny();
        let ckpt = decode(&encode(&model, None, &meta()).unwrap()).unwrap();
        let mut cfg = model.config().clone();
        cfg.num_classes = 4;
        let mut other = Model::build(&cfg, 0).unwrap();
        match ckpt.restore_into(&mut other) {
            Err(Error::TensorMismatch { name, .. }) => assert_eq!(name, "param:fc.weight"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let model = tiny();
        let bytes = encode(&model, None, &meta()).unwrap();
        let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let header = String::from_utf8(bytes[8..8 + len].to_vec()).unwrap();
        let patched = header.replacen("\"format_version\":1", "\"format_version\":9", 1);
        let mut out = bytes[..4].to_vec();
        out.extend_from_slice(&(patched.len() as u32).to_le_bytes());
        out.extend_from_slice(patched.as_bytes());
        out.extend_from_slice(&bytes[8 + len..]);
        assert!(matches!(decode(&out), Err(Error::Format(_))));
    }
}
