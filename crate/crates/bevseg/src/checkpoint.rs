//! Checkpoints: for every parameter tensor, in order, an ASCII line
//! `name d1 d2 ...` followed by its values as little-endian `f64`.
//! Reloading is bit-exact.

use std::fs;
use std::path::Path;

use bevseg_core::bev::GridSpec;
use bevseg_core::model::{ModelConfig, ModelParams};
use bevseg_core::tensor::Tensor;

use crate::error::{Error, Result};

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(params.numel() * 8 + params.len() * 32);
    for (name, t) in params.tensors() {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        out.extend_from_slice(format!("{name} {}\n", dims.join(" ")).as_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(mut bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut tensors = Vec::new();
    while !bytes.is_empty() {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(path, "truncated tensor header"))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::format(path, "tensor header is not text"))?;
        let mut parts = header.split_whitespace();
        let name = parts.next().ok_or_else(|| Error::format(path, "empty tensor header"))?;
        let shape: Vec<usize> = parts
            .map(|d| d.parse().map_err(|_| Error::format(path, format!("bad dimension `{d}` for {name}"))))
            .collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let body = &bytes[nl + 1..];
        if shape.is_empty() || body.len() < n * 8 {
            return Err(Error::format(path, format!("truncated data for {name}")));
        }
        let data = body[..n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        tensors.push((name.to_string(), Tensor::new(shape, data)?));
        bytes = &body[n * 8..];
    }
    Ok(tensors)
}

pub fn save(path: &Path, params: &ModelParams) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint and checks it against `config`.
pub fn load(path: &Path, config: &ModelConfig) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let tensors = decode(&bytes, path)?;
    ModelParams::from_tensors(config.clone(), tensors).map_err(|e| Error::format(path, e.to_string()))
}

/// Reconstructs the architecture from tensor shapes; image size and grid
/// are not recorded in the weights and come from the caller.
pub fn infer_config(tensors: &[(String, Tensor)], image: (usize, usize), grid: GridSpec, path: &Path) -> Result<ModelConfig> {
    let shape = |name: &str| {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.shape().to_vec())
            .ok_or_else(|| Error::format(path, format!("missing tensor {name}")))
    };
    let mut encoder_channels = Vec::new();
    while let Some((_, t)) = tensors.iter().find(|(n, _)| *n == format!("enc{}.weight", encoder_channels.len())) {
        encoder_channels.push(t.shape()[0]);
    }
    let cf = *encoder_channels.last().ok_or_else(|| Error::format(path, "no encoder tensors"))?;
    let vt = shape("vt.weight")?;
    let dec = shape("dec0.weight")?;
    let head = shape("head.weight")?;
    let config = ModelConfig {
        image_height: image.0,
        image_width: image.1,
        encoder_channels,
        depth_bins: vt[0] / cf,
        decoder_channels: dec[0],
        classes: head[0],
        grid,
    };
    // the shapes must be exactly those the inferred config would create
    ModelParams::from_tensors(config.clone(), tensors.to_vec()).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(config)
}

/// Loads a checkpoint whose architecture is inferred from its shapes.
pub fn load_inferred(path: &Path, image: (usize, usize), grid: GridSpec) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let tensors = decode(&bytes, path)?;
    let config = infer_config(&tensors, image, grid, path)?;
    ModelParams::from_tensors(config, tensors).map_err(|e| Error::format(path, e.to_string()))
}
