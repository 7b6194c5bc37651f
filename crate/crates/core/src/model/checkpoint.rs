//! Checkpoint file: magic `DGCK`, version, the model config as JSON, then each
//! parameter tensor as (name, shape, f64 payload). Little-endian throughout.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::data::ModelConfig;
use crate::numerics::Tensor;
use crate::scalar::Scalar;

use super::params::param_layout;
use super::{ModelError, ModelParams};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn checkpoint_bytes<T: Scalar>(config: &ModelConfig, params: &ModelParams<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let json = serde_json::to_vec(config).expect("config serializes");
    let w = &mut out;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION).unwrap();
    w.write_u32::<LittleEndian>(json.len() as u32).unwrap();
    w.write_all(&json).unwrap();
    let tensors = params.tensors();
    w.write_u32::<LittleEndian>(tensors.len() as u32).unwrap();
    for (name, t) in params.names().iter().zip(tensors) {
        w.write_u32::<LittleEndian>(name.len() as u32).unwrap();
        w.write_all(name.as_bytes()).unwrap();
        w.write_u32::<LittleEndian>(t.shape().len() as u32).unwrap();
        for &d in t.shape() {
            w.write_u64::<LittleEndian>(d as u64).unwrap();
        }
        for &v in t.data() {
            w.write_f64::<LittleEndian>(v.as_f64()).unwrap();
        }
    }
    out
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    config: &ModelConfig,
    params: &ModelParams<T>,
) -> Result<(), ModelError> {
    std::fs::write(path, checkpoint_bytes(config, params)).map_err(|e| ModelError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn format(msg: impl Into<String>) -> ModelError {
    ModelError::Format(msg.into())
}

pub fn parse_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<(ModelConfig, ModelParams<T>), ModelError> {
    let mut r = bytes;
    let eof = |_| format("unexpected end of checkpoint");
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(eof)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(format(format!("bad magic {magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>().map_err(eof)?;
    if version != CHECKPOINT_VERSION {
        return Err(format(format!("unsupported checkpoint version {version}")));
    }
    let json_len = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
    if json_len > r.len() {
        return Err(format("config blob runs past end of file"));
    }
    let (json, rest) = r.split_at(json_len);
    r = rest;
    let config: ModelConfig =
        serde_json::from_slice(json).map_err(|e| format(format!("config blob: {e}")))?;
    config
        .validate()
        .map_err(|e| format(format!("config blob: {e}")))?;

    let layout = param_layout(&config);
    let count = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
    if count != layout.len() {
        return Err(format(format!(
            "{count} tensors stored, config needs {}",
            layout.len()
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for (want_name, want_shape) in &layout {
        let len = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
        if len > r.len() {
            return Err(format("tensor name runs past end of file"));
        }
        let (name, rest) = r.split_at(len);
        r = rest;
        if name != want_name.as_bytes() {
            return Err(format(format!(
                "expected tensor {want_name}, found {:?}",
                String::from_utf8_lossy(name)
            )));
        }
        let ndim = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
        let shape = (0..ndim)
            .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()
            .map_err(eof)?;
        if &shape != want_shape {
            return Err(format(format!(
                "tensor {want_name} has shape {shape:?}, config needs {want_shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n * 8 > r.len() {
            return Err(format(format!("tensor {want_name} is truncated")));
        }
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let v = r.read_f64::<LittleEndian>().map_err(eof)?;
            if !v.is_finite() {
                return Err(format(format!("tensor {want_name} holds a non-finite value")));
            }
            data.push(T::of(v));
        }
        tensors.push(Tensor::from_vec(shape, data)?);
    }
    if !r.is_empty() {
        return Err(format(format!("{} trailing bytes", r.len())));
    }
    let params = ModelParams::from_tensors(&config, tensors).expect("layout checked");
    Ok((config, params))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ModelConfig, ModelParams<T>), ModelError> {
    let bytes = std::fs::read(path).map_err(|e| ModelError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (ModelConfig, ModelParams<f64>) {
        let cfg = ModelConfig {
            layers: 2,
            d_enc: 5,
            d_gcn: 4,
            d_ff: 3,
            num_relations: 3,
            seed: 9,
            ..ModelConfig::default()
        };
        let p = ModelParams::init(&cfg);
        (cfg, p)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (cfg, p) = sample();
        let bytes = checkpoint_bytes(&cfg, &p);
        let (cfg2, p2) = parse_checkpoint::<f64>(&bytes).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(p2, p);
        assert_eq!(checkpoint_bytes(&cfg2, &p2), bytes);
    }

    #[test]
    fn every_truncation_is_a_format_error() {
        let (cfg, p) = sample();
        let bytes = checkpoint_bytes(&cfg, &p);
        for cut in [0, 3, 4, 9, 30, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(parse_checkpoint::<f64>(&bytes[..cut]), Err(ModelError::Format(_))),
                "cut at {cut}"
            );
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(parse_checkpoint::<f64>(&extra).is_err());
    }

    #[test]
    fn corrupt_magic() {
        let (cfg, p) = sample();
        let mut bytes = checkpoint_bytes(&cfg, &p);
        bytes[1] = b'X';
        assert!(matches!(parse_checkpoint::<f64>(&bytes), Err(ModelError::Format(_))));
    }
}
