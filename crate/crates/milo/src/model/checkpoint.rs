//! Checkpoint serialization.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MILO1"
//! u32 config_len, config as UTF-8 JSON
//! u32 tensor_count, tensors in named_params order
//! [optional] u32 header_len, {"step": n} JSON
//!            u32 tensor_count, optimizer tensors
//! tensor := u32 name_len, name, u32 ndim, ndim x u64 dims, f64 data
//! ```
//!
//! Floats round-trip bit-exactly. Tensor order is canonical; a reordered
//! or reshaped file is rejected rather than reinterpreted.

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::numcore::Tensor;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 5] = b"MILO1";

const MAX_NAME_LEN: u32 = 1 << 16;
const MAX_NDIM: u32 = 8;

/// Optimizer state stored alongside the model: the step counter and one
/// tensor per entry (moment buffers, keyed by parameter name).
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSnapshot {
    pub step: u64,
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
struct OptHeader {
    step: u64,
}

fn format_err(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_tensor(w: &mut impl Write, name: &str, t: &Tensor) -> Result<()> {
    write_u32(w, name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    write_u32(w, t.shape.len() as u32)?;
    for &d in &t.shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &x in &t.data {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_tensor(r: &mut impl Read) -> Result<(String, Tensor)> {
    let name_len = read_u32(r)?;
    if name_len > MAX_NAME_LEN {
        return Err(format_err(format!(
            "tensor name length {name_len} out of range"
        )));
    }
    let mut name_buf = vec![0u8; name_len as usize];
    r.read_exact(&mut name_buf)?;
    let name =
        String::from_utf8(name_buf).map_err(|_| format_err("tensor name is not valid UTF-8"))?;
    let ndim = read_u32(r)?;
    if ndim > MAX_NDIM {
        return Err(format_err(format!(
            "tensor {name}: {ndim} dims out of range"
        )));
    }
    let mut shape = Vec::with_capacity(ndim as usize);
    for _ in 0..ndim {
        shape.push(read_u64(r)? as usize);
    }
    let len: usize = shape.iter().product();
    let mut data = vec![0.0f64; len];
    let mut buf = [0u8; 8];
    for x in &mut data {
        r.read_exact(&mut buf)?;
        *x = f64::from_le_bytes(buf);
    }
    Ok((name, Tensor::param(&shape, data)))
}

/// Writes params (and optionally optimizer state) to `path`.
pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams,
    opt: Option<&OptimizerSnapshot>,
) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    let config_json = serde_json::to_vec(&params.config)
        .map_err(|e| format_err(format!("config encode: {e}")))?;
    write_u32(&mut w, config_json.len() as u32)?;
    w.write_all(&config_json)?;
    let named = params.named_params();
    write_u32(&mut w, named.len() as u32)?;
    for (name, t) in &named {
        write_tensor(&mut w, name, t)?;
    }
    if let Some(opt) = opt {
        let header = serde_json::to_vec(&OptHeader { step: opt.step })
            .map_err(|e| format_err(format!("optimizer header encode: {e}")))?;
        write_u32(&mut w, header.len() as u32)?;
        w.write_all(&header)?;
        write_u32(&mut w, opt.tensors.len() as u32)?;
        for (name, t) in &opt.tensors {
            write_tensor(&mut w, name, t)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint back; shapes and tensor order must match what the
/// embedded config dictates.
pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, Option<OptimizerSnapshot>)> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(format_err(format!("bad magic {magic:?}")));
    }
    let config_len = read_u32(&mut r)?;
    let mut config_buf = vec![0u8; config_len as usize];
    r.read_exact(&mut config_buf)?;
    let config: ModelConfig = serde_json::from_slice(&config_buf)
        .map_err(|e| format_err(format!("config decode: {e}")))?;
    config.validate()?;

    let mut params = super::init(&config)?;
    let count = read_u32(&mut r)? as usize;
    let mut slots = params.named_params_mut();
    if count != slots.len() {
        return Err(format_err(format!(
            "{count} tensors, config dictates {}",
            slots.len()
        )));
    }
    for (expected_name, slot) in slots.iter_mut() {
        let (name, tensor) = read_tensor(&mut r)?;
        if &name != expected_name {
            return Err(format_err(format!(
                "tensor {name} where {expected_name} expected"
            )));
        }
        if tensor.shape != slot.shape {
            return Err(format_err(format!(
                "tensor {name}: shape {:?}, config dictates {:?}",
                tensor.shape, slot.shape
            )));
        }
        **slot = tensor;
    }
    drop(slots);

    let mut probe = [0u8; 4];
    let first = r.read(&mut probe)?;
    let opt = match first {
        0 => None,
        n => {
            r.read_exact(&mut probe[n..])?;
            let header_len = u32::from_le_bytes(probe);
            let mut header_buf = vec![0u8; header_len as usize];
            r.read_exact(&mut header_buf)?;
            let header: OptHeader = serde_json::from_slice(&header_buf)
                .map_err(|e| format_err(format!("optimizer header decode: {e}")))?;
            let count = read_u32(&mut r)? as usize;
            let mut tensors = Vec::with_capacity(count);
            for _ in 0..count {
                tensors.push(read_tensor(&mut r)?);
            }
            Some(OptimizerSnapshot {
                step: header.step,
                tensors,
            })
        }
    };
    Ok((params, opt))
}

#[cfg(test)]
mod tests {
    use super::super::{init, ModelConfig};
    use super::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            dim: 8,
            n_layers: 1,
            n_heads: 2,
            seq_len: 4,
            seed: 9,
            ..ModelConfig::tiny()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let params = init(&small_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &params, None).unwrap();
        let (back, opt) = load_checkpoint(&path).unwrap();
        assert!(opt.is_none());
        assert_eq!(back.config, params.config);
        for ((name, a), (_, b)) in params.named_params().iter().zip(back.named_params()) {
            assert_eq!(a.shape, b.shape, "{name}");
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(x.to_bits(), y.to_bits(), "{name}");
            }
        }
    }

    #[test]
    fn optimizer_section_round_trips() {
        let params = init(&small_cfg()).unwrap();
        let opt = OptimizerSnapshot {
            step: 1234,
            tensors: vec![
                ("embedding.m".into(), Tensor::zeros(&[11, 8])),
                ("embedding.v".into(), Tensor::param(&[11, 8], vec![0.5; 88])),
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &params, Some(&opt)).unwrap();
        let (_, back) = load_checkpoint(&path).unwrap();
        let back = back.unwrap();
        assert_eq!(back.step, 1234);
        assert_eq!(back.tensors.len(), 2);
        assert_eq!(back.tensors[0].0, "embedding.m");
        assert_eq!(back.tensors[1].1.data, opt.tensors[1].1.data);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let params = init(&small_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &params, None).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xFF;
        std::fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Format { .. }) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_an_io_error() {
        let params = init(&small_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &params, None).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn missing_file_is_an_io_error() {
        match load_checkpoint(Path::new("/nonexistent/model.ckpt")) {
            Err(e) => assert_eq!(e.category(), crate::error::Category::Io),
            Ok(_) => panic!("expected error"),
        }
    }
}
