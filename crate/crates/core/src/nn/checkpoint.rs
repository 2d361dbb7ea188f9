//! Checkpoint file: `MPRKCKPT`, a little-endian `u64` header length, a JSON
//! header, then the float64 payload (parameters, Adam first moments, Adam
//! second moments, batch-norm running buffers; each in declaration order).

use super::layers::Layer;
use super::model::{Architecture, ModelState};
use super::optim::AdamState;
use super::NormStats;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MPRKCKPT";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    architecture: Architecture,
    param_shapes: Vec<usize>,
    buffer_shapes: Vec<usize>,
    step: u64,
    epoch: u64,
    seed: u64,
    train_seed: Option<u64>,
    norm: Option<NormStats>,
    payload_len: usize,
}

fn incompatible(msg: impl Into<String>) -> Error {
    Error::IncompatibleCheckpoint(msg.into())
}

pub fn save_checkpoint(model: &ModelState, path: &Path) -> Result<()> {
    let buffers: Vec<&[f64]> = model.layers.iter().flat_map(Layer::buffers).collect();
    let mut payload: Vec<f64> = Vec::new();
    for p in model.params() {
        payload.extend_from_slice(p);
    }
    for m in &model.adam.m {
        payload.extend_from_slice(m);
    }
    for v in &model.adam.v {
        payload.extend_from_slice(v);
    }
    for b in &buffers {
        payload.extend_from_slice(b);
    }
    let header = Header {
        version: CHECKPOINT_VERSION,
        architecture: model.arch.clone(),
        param_shapes: model.param_shapes(),
        buffer_shapes: buffers.iter().map(|b| b.len()).collect(),
        step: model.adam.step,
        epoch: model.epoch,
        seed: model.seed,
        train_seed: model.train_seed,
        norm: model.norm,
        payload_len: payload.len(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut bytes = Vec::with_capacity(16 + json.len() + payload.len() * 8);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for v in payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(incompatible("missing magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..).unwrap_or_default();
    if hlen > body.len() {
        return Err(incompatible("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| incompatible(e.to_string()))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(incompatible(format!("version {} (expected {CHECKPOINT_VERSION})", header.version)));
    }
    let raw = &body[hlen..];
    if raw.len() != header.payload_len * 8 {
        return Err(incompatible(format!(
            "payload holds {} bytes, header promises {} values",
            raw.len(),
            header.payload_len
        )));
    }
    let mut values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));

    let mut model =
        super::model::build_model(header.architecture, header.seed).map_err(|e| incompatible(e.to_string()))?;
    if model.param_shapes() != header.param_shapes {
        return Err(incompatible("parameter shapes do not match the architecture"));
    }
    let buffer_shapes: Vec<usize> = model.layers.iter().flat_map(Layer::buffers).map(<[f64]>::len).collect();
    if buffer_shapes != header.buffer_shapes {
        return Err(incompatible("buffer shapes do not match the architecture"));
    }
    let expected = 3 * header.param_shapes.iter().sum::<usize>() + buffer_shapes.iter().sum::<usize>();
    if expected != header.payload_len {
        return Err(incompatible("payload length does not match shapes"));
    }
    let mut fill = |dst: &mut Vec<f64>| dst.iter_mut().for_each(|d| *d = values.next().unwrap());
    for p in model.params_mut() {
        fill(p);
    }
    let mut adam = AdamState::zeros_like(&model.layers);
    adam.m.iter_mut().for_each(&mut fill);
    adam.v.iter_mut().for_each(&mut fill);
    adam.step = header.step;
    for layer in &mut model.layers {
        for b in layer.buffers_mut() {
            fill(b);
        }
    }
    model.adam = adam;
    model.epoch = header.epoch;
    model.train_seed = header.train_seed;
    model.norm = header.norm;
    Ok(model)
}
