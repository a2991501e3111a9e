//! Checkpoint layout: `KLITE1`, a little-endian `u32` byte length, the
//! config as JSON, then every parameter as little-endian `f32` in declared
//! order.

use std::fs;
use std::path::Path;

use super::params::layout;
use super::{param_count, ModelConfig, ModelError, ModelParams};
use crate::tensorcore::Tensor;

pub const MAGIC: &[u8; 6] = b"KLITE1";

pub fn encode_checkpoint(params: &ModelParams<f32>, cfg: &ModelConfig) -> Result<Vec<u8>, ModelError> {
    let expected = param_count(cfg);
    if params.scalar_count() != expected {
        return Err(ModelError::SizeMismatch {
            expected: expected * 4,
            found: params.scalar_count() * 4,
        });
    }
    let json = serde_json::to_vec(cfg)?;
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + json.len() + expected * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in params.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelParams<f32>, ModelConfig), ModelError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(ModelError::BadMagic);
    }
    let rest = &bytes[MAGIC.len()..];
    let len_bytes: [u8; 4] = rest
        .get(..4)
        .and_then(|b| b.try_into().ok())
        .ok_or(ModelError::Truncated("config length"))?;
    let json_len = u32::from_le_bytes(len_bytes) as usize;
    let json = rest.get(4..4 + json_len).ok_or(ModelError::Truncated("config"))?;
    let cfg: ModelConfig = serde_json::from_slice(json)?;
    cfg.validate()?;
    let data = &rest[4 + json_len..];
    let expected = param_count(&cfg) * 4;
    if data.len() != expected {
        return Err(ModelError::SizeMismatch {
            expected,
            found: data.len(),
        });
    }
    let mut floats = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let mut tensors = Vec::new();
    for spec in layout(&cfg) {
        let values: Vec<f32> = floats.by_ref().take(spec.len()).collect();
        tensors.push(Tensor::new(spec.rows, spec.cols, values)?);
    }
    let params = ModelParams::from_layout(&cfg, tensors)?;
    if !params.is_finite() {
        return Err(ModelError::Input("checkpoint contains non-finite parameters".into()));
    }
    Ok((params, cfg))
}

pub fn save_checkpoint(params: &ModelParams<f32>, cfg: &ModelConfig, path: impl AsRef<Path>) -> Result<(), ModelError> {
    fs::write(path, encode_checkpoint(params, cfg)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelParams<f32>, ModelConfig), ModelError> {
    decode_checkpoint(&fs::read(path)?)
}
