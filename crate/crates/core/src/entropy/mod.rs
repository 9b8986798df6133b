//! Lossless coding of quantized feature maps: bitplane decomposition, an
//! adaptive context model and a binary range coder.
//!
//! Payload layout: `u32` LE length, coded bytes, `u32` LE CRC-32 taken over
//! the planes (each packed MSB first, zero padded to a byte) and then over
//! the coded bytes.

mod bitplane;
mod context;
mod range_coder;

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

pub use bitplane::{from_bitplanes, magnitude_planes, plane_count, to_bitplanes, BitplaneSet};
pub use context::{channel_group, context_id, ContextModel, CHANNEL_GROUPS};
pub use range_coder::{RangeDecoder, RangeEncoder, PROB_BITS, PROB_ONE};

use crate::quantizer::QuantizedFeatureMap;

/// Bytes framing a payload: length prefix and checksum.
pub const PAYLOAD_OVERHEAD: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EntropyError {
    #[error("code {code} at index {index} outside the clamp range")]
    CodeOutOfRange { index: usize, code: i32 },
    #[error("bitplane set has {found} planes, expected {expected}")]
    PlaneCount { expected: usize, found: usize },
    #[error("bitplanes must be 0/1 arrays of the declared shape")]
    MalformedPlanes,
    #[error("negative sign on zero magnitude at index {0}")]
    NonCanonical(usize),
    #[error("entropy payload truncated: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("coded length {declared} does not match {consumed} bytes used by the decoder")]
    LengthMismatch { declared: usize, consumed: usize },
    #[error("payload checksum mismatch: stored {stored:#010x}, decoded {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("payload of {0} bytes exceeds the u32 length field")]
    TooLarge(usize),
}

fn context_model_for(planes: usize) -> ContextModel {
    ContextModel::new(planes)
}

/// Walks every bit in coding order, letting `code_bit` read or write it.
/// Contexts only look at bits earlier in that order.
fn run_planes<F>(shape: [usize; 3], planes: &mut [Vec<u8>], mut code_bit: F)
where
    F: FnMut(usize, &mut u8),
{
    let [c, h, w] = shape;
    let len = c * h * w;
    let mut sig = vec![0u8; len];
    for p in 0..planes.len() {
        let plane = &mut planes[p];
        for ch in 0..c {
            let group = channel_group(ch, c);
            let base = ch * h * w;
            for y in 0..h {
                for x in 0..w {
                    let i = base + y * w + x;
                    let mut nb = 0usize;
                    if x > 0 {
                        nb += plane[i - 1] as usize;
                    }
                    if y > 0 {
                        nb += plane[i - w] as usize;
                        if x > 0 {
                            nb += plane[i - w - 1] as usize;
                        }
                    }
                    let ctx = context_id(p, group, nb, sig[i] != 0);
                    code_bit(ctx, &mut plane[i]);
                }
            }
        }
        for (s, &b) in sig.iter_mut().zip(plane.iter()) {
            *s |= b;
        }
    }
}

/// CRC-32 over the planes, each packed MSB first, then the coded bytes.
/// Covering the coded bytes catches flips in the flush tail that do not
/// change any decoded bit.
pub fn payload_checksum(planes: &BitplaneSet, coded: &[u8]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    let mut packed = Vec::new();
    for plane in planes.planes() {
        packed.clear();
        packed.extend(
            plane
                .chunks(8)
                .map(|chunk| chunk.iter().enumerate().fold(0u8, |acc, (k, &b)| acc | (b << (7 - k)))),
        );
        h.update(&packed);
    }
    h.update(coded);
    h.finalize()
}

/// Codes any plane set; the plane count is implied by the caller's metadata.
pub fn encode(planes: &BitplaneSet) -> Result<Vec<u8>, EntropyError> {
    let mut model = context_model_for(planes.plane_count());
    let mut enc = RangeEncoder::new();
    let mut scratch = planes.planes().to_vec();
    run_planes(planes.shape(), &mut scratch, |ctx, bit| {
        let b = *bit != 0;
        enc.encode(b, model.p0_scaled(ctx));
        model.update(ctx, b);
    });
    let body = enc.finish();
    let len = u32::try_from(body.len()).map_err(|_| EntropyError::TooLarge(body.len()))?;
    let mut out = Vec::with_capacity(body.len() + PAYLOAD_OVERHEAD);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&body);
    out.extend_from_slice(&payload_checksum(planes, &body).to_le_bytes());
    Ok(out)
}

/// Number of bytes a payload at the head of `bytes` occupies, from its
/// length prefix. Trailing bytes beyond it are not part of the payload.
pub fn payload_len(bytes: &[u8]) -> Result<usize, EntropyError> {
    let head: [u8; 4] = bytes
        .get(..4)
        .and_then(|s| s.try_into().ok())
        .ok_or(EntropyError::Truncated {
            needed: 4,
            available: bytes.len(),
        })?;
    let needed = u32::from_le_bytes(head) as usize + PAYLOAD_OVERHEAD;
    if bytes.len() < needed {
        return Err(EntropyError::Truncated {
            needed,
            available: bytes.len(),
        });
    }
    Ok(needed)
}

/// Decodes `plane_count` planes of the given shape.
pub fn decode_planes(bytes: &[u8], shape: [usize; 3], plane_count: usize) -> Result<BitplaneSet, EntropyError> {
    let total = payload_len(bytes)?;
    let body = &bytes[4..total - 4];
    let stored = u32::from_le_bytes(bytes[total - 4..total].try_into().unwrap());
    let len = shape.iter().product::<usize>();
    let mut planes = vec![vec![0u8; len]; plane_count];
    let mut model = context_model_for(plane_count);
    let mut dec = RangeDecoder::new(body);
    run_planes(shape, &mut planes, |ctx, bit| {
        let b = dec.decode(model.p0_scaled(ctx));
        model.update(ctx, b);
        *bit = b as u8;
    });
    let (consumed, overrun) = (dec.consumed(), dec.overrun());
    let set = BitplaneSet::from_planes(shape, planes)?;
    let computed = payload_checksum(&set, body);
    if computed != stored {
        return Err(EntropyError::ChecksumMismatch { stored, computed });
    }
    if overrun || consumed != body.len() {
        return Err(EntropyError::LengthMismatch {
            declared: body.len(),
            consumed,
        });
    }
    Ok(set)
}

/// Decodes the planes of a `shape` feature map quantized at `bits`.
pub fn decode(bytes: &[u8], shape: [usize; 3], bits: u8) -> Result<BitplaneSet, EntropyError> {
    decode_planes(bytes, shape, plane_count(bits))
}

pub fn encode_codes(q: &QuantizedFeatureMap) -> Result<Vec<u8>, EntropyError> {
    encode(&to_bitplanes(q)?)
}

pub fn decode_codes(bytes: &[u8], shape: [usize; 3], bits: u8) -> Result<QuantizedFeatureMap, EntropyError> {
    from_bitplanes(&decode(bytes, shape, bits)?, bits)
}
