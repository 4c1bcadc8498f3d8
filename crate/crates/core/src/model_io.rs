//! Model files: `"TNIG"`, `u16` version, `u32` header length, a JSON header
//! with the hyperparameters and the ordered tensor manifest, then every
//! tensor as little-endian `f32` in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictor::{ModelConfig, ModelParams};
use crate::tensor::MAGIC;

pub const MODEL_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dims: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub hyperparameters: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

fn manifest(m: &ModelParams) -> Vec<TensorEntry> {
    let mut out = Vec::new();
    m.for_each_tensor(|name, dims, _| {
        out.push(TensorEntry {
            name: name.to_string(),
            dims: dims.to_vec(),
        })
    });
    out
}

pub fn encode_model(m: &ModelParams) -> Vec<u8> {
    let header = ModelHeader {
        hyperparameters: m.config,
        tensors: manifest(m),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(10 + json.len() + 4 * m.num_parameters());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    m.for_each_tensor(|_, _, values| {
        for &v in values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    });
    out
}

pub fn decode_model(bytes: &[u8], origin: &Path) -> Result<ModelParams> {
    let fail = |reason: String| Error::format(origin, reason);
    if bytes.len() < 10 {
        return Err(fail("truncated header".into()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fail("bad magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != MODEL_VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let len = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let body = &bytes[10..];
    if body.len() < len {
        return Err(fail("truncated header".into()));
    }
    let header: ModelHeader =
        serde_json::from_slice(&body[..len]).map_err(|e| fail(format!("bad header: {e}")))?;
    header.hyperparameters.validate()?;
    let mut model = ModelParams::zeros(header.hyperparameters);
    let expected = manifest(&model);
    if expected != header.tensors {
        return Err(Error::Shape(format!(
            "{}: tensor manifest does not match the hyperparameters",
            origin.display()
        )));
    }
    let payload = &body[len..];
    let want = 4 * model.num_parameters();
    if payload.len() != want {
        return Err(fail(format!("payload is {} bytes, manifest requires {want}", payload.len())));
    }
    let mut floats = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64);
    model.for_each_tensor_mut(|_, _, values| {
        for v in values.iter_mut() {
            *v = floats.next().expect("length checked");
        }
    });
    Ok(model)
}

pub fn model_save(m: &ModelParams, path: &Path) -> Result<()> {
    fs::write(path, encode_model(m)).map_err(|e| Error::io(path, e))
}

pub fn model_load(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let m = ModelParams::init(ModelConfig::default(), 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tnig");
        model_save(&m, &path).unwrap();
        let back = model_load(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   m.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let m = ModelParams::init(ModelConfig::default(), 2).unwrap();
        let bytes = encode_model(&m);
        let p = Path::new("mem");
        assert!(matches!(decode_model(&bytes[..bytes.len() - 3], p), Err(Error::Format { .. })));
        assert!(matches!(decode_model(&bytes[..12], p), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_model(&bad, p), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_model(&bad, p), Err(Error::Format { .. })));
    }

    #[test]
    fn manifest_mismatch_is_a_shape_error() {
        let m = ModelParams::init(ModelConfig::default(), 2).unwrap();
        let mut header = ModelHeader {
            hyperparameters: m.config,
            tensors: manifest(&m),
        };
        header.tensors[0].dims[3] += 1;
        let json = serde_json::to_vec(&header).unwrap();
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&json);
        bytes.extend(std::iter::repeat_n(0u8, 4 * m.num_parameters()));
        assert!(matches!(decode_model(&bytes, Path::new("mem")), Err(Error::Shape(_))));
    }
}
