//! Parameter checkpoints.
//!
//! ```text
//! "DSICW" | version u8 | strides 4×u8 | channels 4×u16 | bits u8 | classes u16 | layer count u16
//! per layer: kind u8 | stride u8 | kernel u8 | tensor count u8
//!            per tensor: rank u8 | dims rank×u32 | values as f32
//! CRC-32 of everything before it, u32
//! ```
//! All integers and floats are little-endian. Batchnorm layers carry four
//! tensors (scale, shift, running mean, running variance), others two.

use std::fs;
use std::path::{Path, PathBuf};

use deepsic_core::networks::{Model, ModelError, RateConfig, STAGES};
use deepsic_core::nn::{LayerKind, LayerParams};
use deepsic_core::Tensor;
use thiserror::Error;

use crate::atomic::{write_atomic, AtomicWriteError};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"DSICW";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u8),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("checkpoint layer {layer}: {reason}")]
    Layer { layer: usize, reason: String },
    #[error("{0} trailing bytes after checkpoint")]
    TrailingBytes(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Write(#[from] AtomicWriteError),
}

pub fn to_bytes(model: &Model<f32>) -> Vec<u8> {
    let cfg = model.config();
    let mut out = CHECKPOINT_MAGIC.to_vec();
    out.push(CHECKPOINT_VERSION);
    out.extend(cfg.strides.iter().map(|&s| s as u8));
    for c in cfg.channels {
        out.extend_from_slice(&(c as u16).to_le_bytes());
    }
    out.push(cfg.bits);
    out.extend_from_slice(&(model.classes() as u16).to_le_bytes());
    out.extend_from_slice(&(model.layers().len() as u16).to_le_bytes());
    for layer in model.layers() {
        let tensors = layer_tensors(layer);
        out.extend_from_slice(&[
            layer.kind.tag(),
            layer.stride as u8,
            layer.kernel as u8,
            tensors.len() as u8,
        ]);
        for t in tensors {
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn layer_tensors(layer: &LayerParams<f32>) -> Vec<&Tensor<f32>> {
    let mut v = vec![&layer.weight, &layer.bias];
    if let (Some(m), Some(var)) = (&layer.running_mean, &layer.running_var) {
        v.push(m);
        v.push(var);
    }
    v
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or(CheckpointError::Truncated(self.bytes.len()))?;
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model<f32>, CheckpointError> {
    if !bytes.starts_with(CHECKPOINT_MAGIC) {
        return Err(CheckpointError::BadMagic);
    }
    let mut c = Cursor { bytes, pos: 5 };
    let version = c.u8()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    if bytes.len() < 4 + c.pos {
        return Err(CheckpointError::Truncated(bytes.len()));
    }
    let mut strides = [0usize; STAGES];
    for s in &mut strides {
        *s = c.u8()? as usize;
    }
    let mut channels = [0usize; STAGES];
    for ch in &mut channels {
        *ch = c.u16()? as usize;
    }
    let bits = c.u8()?;
    let classes = c.u16()? as usize;
    let count = c.u16()? as usize;
    let mut layers = Vec::with_capacity(count);
    for index in 0..count {
        let bad = |reason: &str| CheckpointError::Layer {
            layer: index,
            reason: reason.to_string(),
        };
        let kind = LayerKind::from_tag(c.u8()?).ok_or_else(|| bad("unknown kind tag"))?;
        let stride = c.u8()? as usize;
        let kernel = c.u8()? as usize;
        let n = c.u8()? as usize;
        let expected = if kind == LayerKind::BatchNorm { 4 } else { 2 };
        if n != expected {
            return Err(bad("wrong tensor count for layer kind"));
        }
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let rank = c.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(c.u32()? as usize);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| bad("shape overflow"))?;
            let raw = c.take(len.checked_mul(4).ok_or_else(|| bad("shape overflow"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            tensors.push(Tensor::new(&shape, data).map_err(|_| bad("tensor shape"))?);
        }
        let mut it = tensors.into_iter();
        let (weight, bias) = (it.next().unwrap(), it.next().unwrap());
        layers.push(LayerParams {
            kind,
            weight,
            bias,
            running_mean: it.next(),
            running_var: it.next(),
            stride,
            kernel,
        });
    }
    let body_end = c.pos;
    let stored = c.u32()?;
    if stored != crc32fast::hash(&bytes[..body_end]) {
        return Err(CheckpointError::Checksum);
    }
    if c.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes(bytes.len() - c.pos));
    }
    let cfg = RateConfig {
        strides,
        channels,
        bits,
    };
    Ok(Model::from_layers(cfg, classes, layers)?)
}

pub fn save(path: &Path, model: &Model<f32>) -> Result<(), CheckpointError> {
    write_atomic(path, &to_bytes(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model<f32>, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use deepsic_core::networks::RatePreset;
    use deepsic_core::rng::seeded;

    fn model() -> Model<f32> {
        Model::new(RateConfig::preset(RatePreset::Hi).with_channels(4), 7, &mut seeded(9)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let bytes = to_bytes(&m);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(to_bytes(&back), bytes);
        assert_eq!(back.config(), m.config());
        for (a, b) in m.layers().iter().zip(back.layers()) {
            assert!(a
                .weight
                .data()
                .iter()
                .zip(b.weight.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn damage_is_detected() {
        let bytes = to_bytes(&model());
        assert!(matches!(from_bytes(b"DSICX"), Err(CheckpointError::BadMagic)));
        let mut v = bytes.clone();
        v[5] = 9;
        assert!(matches!(from_bytes(&v), Err(CheckpointError::UnsupportedVersion(9))));
        for cut in [6, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut v = bytes.clone();
        let mid = v.len() / 2;
        v[mid] ^= 1;
        assert!(matches!(from_bytes(&v), Err(CheckpointError::Checksum)));
        let mut v = bytes;
        v.push(0);
        assert!(from_bytes(&v).is_err());
    }
}
