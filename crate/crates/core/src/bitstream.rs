//! The `DSIC` container: fixed header, optional semantic record, optional
//! crop extension and the entropy payload. All integers little-endian.
//!
//! ```text
//! off  size  field
//!   0     4  magic "DSIC"
//!   4     1  format version
//!   5     1  flags: bit0 semantic record present (pre-semantic), bit1 crop extension
//!   6     2  coded width
//!   8     2  coded height
//!  10     1  low nibble rate preset id, high nibble log2(feature channels)
//!  11     1  quantizer bits B
//!  12     2  class count K
//!  14    17  [bit0] class id u16, top-5 ids u16×5, top-5 probabilities u8×5
//!   .     4  [bit1] original width u16, original height u16
//!   .     .  entropy payload
//! ```

use alloc::vec::Vec;

use thiserror::Error;

use crate::entropy::{self, EntropyError};
use crate::networks::{RatePreset, SemanticResult, Variant, TOP_K};
use crate::quantizer::{check_bits, QuantizedFeatureMap};

pub const MAGIC: [u8; 4] = *b"DSIC";
pub const FORMAT_VERSION: u8 = 1;
pub const HEADER_BYTES: usize = 14;
pub const SEMANTIC_BYTES: usize = 2 + 2 * TOP_K + TOP_K;
pub const CROP_BYTES: usize = 4;
/// Id slot filler when `K < 5`.
pub const NO_CLASS: u16 = u16::MAX;

const FLAG_SEMANTIC: u8 = 1;
const FLAG_CROP: u8 = 2;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BitstreamError {
    #[error("not a DSIC stream (bad magic)")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),
    #[error("stream truncated: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("payload checksum mismatch: stored {stored:#010x}, decoded {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("invalid field: {0}")]
    Invalid(&'static str),
    #[error("{0} unexpected bytes after the payload")]
    TrailingBytes(usize),
    #[error("corrupt entropy payload: {0}")]
    Payload(EntropyError),
}

impl From<EntropyError> for BitstreamError {
    fn from(e: EntropyError) -> Self {
        match e {
            EntropyError::Truncated { needed, available } => BitstreamError::Truncated { needed, available },
            EntropyError::ChecksumMismatch { stored, computed } => {
                BitstreamError::ChecksumMismatch { stored, computed }
            }
            other => BitstreamError::Payload(other),
        }
    }
}

/// Class decision stored in a pre-semantic stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SemanticPayload {
    pub class_id: u16,
    pub top_ids: [u16; TOP_K],
    /// Probabilities scaled to `0..=255`.
    pub top_probs: [u8; TOP_K],
}

impl SemanticPayload {
    pub fn from_result(r: &SemanticResult) -> Self {
        let mut top_ids = [NO_CLASS; TOP_K];
        let mut top_probs = [0u8; TOP_K];
        for (i, &(id, p)) in r.top.iter().take(TOP_K).enumerate() {
            top_ids[i] = id as u16;
            top_probs[i] = libm_round(p.clamp(0.0, 1.0) * 255.0) as u8;
        }
        Self {
            class_id: r.class_id as u16,
            top_ids,
            top_probs,
        }
    }

    /// `(id, probability)` pairs present in the record.
    pub fn top(&self) -> Vec<(usize, f64)> {
        self.top_ids
            .iter()
            .zip(&self.top_probs)
            .filter(|(&id, _)| id != NO_CLASS)
            .map(|(&id, &p)| (id as usize, p as f64 / 255.0))
            .collect()
    }

    fn validate(&self, classes: u16) -> Result<(), BitstreamError> {
        let k = (classes as usize).min(TOP_K);
        if self.class_id >= classes || self.top_ids[0] != self.class_id {
            return Err(BitstreamError::Invalid("semantic class id"));
        }
        for (i, (&id, &p)) in self.top_ids.iter().zip(&self.top_probs).enumerate() {
            let ok = if i < k {
                id < classes && !self.top_ids[..i].contains(&id)
            } else {
                id == NO_CLASS && p == 0
            };
            if !ok {
                return Err(BitstreamError::Invalid("semantic top-5 ids"));
            }
        }
        if self.top_probs.windows(2).any(|w| w[0] < w[1]) {
            return Err(BitstreamError::Invalid("semantic probabilities must be non-increasing"));
        }
        Ok(())
    }
}

fn libm_round(v: f64) -> f64 {
    num_traits::Float::round(v)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CompressedBlob {
    pub variant: Variant,
    /// Coded (possibly padded) image size.
    pub width: u16,
    pub height: u16,
    pub preset: RatePreset,
    pub bits: u8,
    pub classes: u16,
    /// Present iff `variant` is pre-semantic.
    pub semantic: Option<SemanticPayload>,
    /// Original `(width, height)` when the coded image was padded.
    pub original: Option<(u16, u16)>,
    pub features: QuantizedFeatureMap,
}

/// Byte counts of each part of a serialized blob.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlobLayout {
    pub header: usize,
    pub semantic: usize,
    pub extension: usize,
    pub payload: usize,
}

impl BlobLayout {
    pub fn total(&self) -> usize {
        self.header + self.semantic + self.extension + self.payload
    }
}

impl CompressedBlob {
    pub fn feature_channels(&self) -> usize {
        self.features.shape()[0]
    }

    /// Size the decoder should output.
    pub fn output_size(&self) -> (u16, u16) {
        self.original.unwrap_or((self.width, self.height))
    }

    pub fn semantic_overhead_bits(&self) -> usize {
        semantic_overhead_bits(self)
    }

    fn preset_byte(&self) -> Result<u8, BitstreamError> {
        let c = self.feature_channels();
        if !c.is_power_of_two() || c > 1 << 15 {
            return Err(BitstreamError::Invalid("feature channel count must be a power of two"));
        }
        Ok(self.preset.id() | ((c.trailing_zeros() as u8) << 4))
    }

    pub fn validate(&self) -> Result<(), BitstreamError> {
        check_bits(self.bits).map_err(|_| BitstreamError::Invalid("quantizer bits"))?;
        if self.classes == 0 {
            return Err(BitstreamError::Invalid("class count"));
        }
        let f = self.preset.strides().iter().product::<usize>();
        let (w, h) = (self.width as usize, self.height as usize);
        if w == 0 || h == 0 || w % f != 0 || h % f != 0 {
            return Err(BitstreamError::Invalid(
                "dimensions not divisible by the stride product",
            ));
        }
        self.preset_byte()?;
        if self.features.bits() != self.bits || self.features.shape()[1..] != [h / f, w / f] {
            return Err(BitstreamError::Invalid("feature map does not match header"));
        }
        match (self.variant, &self.semantic) {
            (Variant::PreSemantic, Some(s)) => s.validate(self.classes)?,
            (Variant::PostSemantic, None) => {}
            _ => {
                return Err(BitstreamError::Invalid(
                    "semantic record must be present iff pre-semantic",
                ))
            }
        }
        if let Some((ow, oh)) = self.original {
            if ow == 0 || oh == 0 || ow > self.width || oh > self.height {
                return Err(BitstreamError::Invalid("original size must fit inside the coded size"));
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> Result<BlobLayout, BitstreamError> {
        Ok(layout_of(self, entropy::encode_codes(&self.features)?.len()))
    }
}

fn layout_of(blob: &CompressedBlob, payload: usize) -> BlobLayout {
    BlobLayout {
        header: HEADER_BYTES,
        semantic: if blob.semantic.is_some() { SEMANTIC_BYTES } else { 0 },
        extension: if blob.original.is_some() { CROP_BYTES } else { 0 },
        payload,
    }
}

/// Bits spent on the semantic record: 0 for post-semantic streams.
pub fn semantic_overhead_bits(blob: &CompressedBlob) -> usize {
    match blob.semantic {
        Some(_) => SEMANTIC_BYTES * 8,
        None => 0,
    }
}

pub fn serialize(blob: &CompressedBlob) -> Result<Vec<u8>, BitstreamError> {
    Ok(serialize_with_layout(blob)?.0)
}

pub fn serialize_with_layout(blob: &CompressedBlob) -> Result<(Vec<u8>, BlobLayout), BitstreamError> {
    blob.validate()?;
    let payload = entropy::encode_codes(&blob.features)?;
    let layout = layout_of(blob, payload.len());
    let mut out = Vec::with_capacity(layout.total());
    out.extend_from_slice(&MAGIC);
    out.push(FORMAT_VERSION);
    let mut flags = 0;
    if blob.semantic.is_some() {
        flags |= FLAG_SEMANTIC;
    }
    if blob.original.is_some() {
        flags |= FLAG_CROP;
    }
    out.push(flags);
    out.extend_from_slice(&blob.width.to_le_bytes());
    out.extend_from_slice(&blob.height.to_le_bytes());
    out.push(blob.preset_byte()?);
    out.push(blob.bits);
    out.extend_from_slice(&blob.classes.to_le_bytes());
    if let Some(s) = &blob.semantic {
        out.extend_from_slice(&s.class_id.to_le_bytes());
        for id in s.top_ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        out.extend_from_slice(&s.top_probs);
    }
    if let Some((w, h)) = blob.original {
        out.extend_from_slice(&w.to_le_bytes());
        out.extend_from_slice(&h.to_le_bytes());
    }
    out.extend_from_slice(&payload);
    debug_assert_eq!(out.len(), layout.total());
    Ok((out, layout))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], BitstreamError> {
        let end = self.pos + n;
        let s = self.bytes.get(self.pos..end).ok_or(BitstreamError::Truncated {
            needed: end,
            available: self.bytes.len(),
        })?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, BitstreamError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, BitstreamError> {
        let s = self.take(2)?;
        Ok(u16::from_le_bytes([s[0], s[1]]))
    }
}

/// Parses and fully validates a stream, including decoding the payload.
pub fn parse(bytes: &[u8]) -> Result<CompressedBlob, BitstreamError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4).map_err(|e| {
        if bytes.starts_with(&MAGIC[..bytes.len().min(4)]) {
            e
        } else {
            BitstreamError::BadMagic
        }
    })?;
    if magic != MAGIC {
        return Err(BitstreamError::BadMagic);
    }
    let version = r.u8()?;
    if version != FORMAT_VERSION {
        return Err(BitstreamError::UnsupportedVersion(version));
    }
    let flags = r.u8()?;
    if flags & !(FLAG_SEMANTIC | FLAG_CROP) != 0 {
        return Err(BitstreamError::Invalid("unknown flag bits"));
    }
    let width = r.u16()?;
    let height = r.u16()?;
    let preset_byte = r.u8()?;
    let preset = RatePreset::from_id(preset_byte & 0x0F).ok_or(BitstreamError::Invalid("rate preset id"))?;
    let log_channels = preset_byte >> 4;
    let bits = r.u8()?;
    let classes = r.u16()?;
    let semantic = if flags & FLAG_SEMANTIC != 0 {
        let class_id = r.u16()?;
        let mut top_ids = [0u16; TOP_K];
        for id in &mut top_ids {
            *id = r.u16()?;
        }
        let mut top_probs = [0u8; TOP_K];
        top_probs.copy_from_slice(r.take(TOP_K)?);
        Some(SemanticPayload {
            class_id,
            top_ids,
            top_probs,
        })
    } else {
        None
    };
    let original = if flags & FLAG_CROP != 0 {
        Some((r.u16()?, r.u16()?))
    } else {
        None
    };
    check_bits(bits).map_err(|_| BitstreamError::Invalid("quantizer bits"))?;
    let f = preset.strides().iter().product::<usize>();
    let (w, h) = (width as usize, height as usize);
    if w == 0 || h == 0 || w % f != 0 || h % f != 0 {
        return Err(BitstreamError::Invalid(
            "dimensions not divisible by the stride product",
        ));
    }
    let shape = [1usize << log_channels, h / f, w / f];
    let rest = &bytes[r.pos..];
    let payload_len = entropy::payload_len(rest).map_err(|e| match e {
        EntropyError::Truncated { needed, .. } => BitstreamError::Truncated {
            needed: r.pos + needed,
            available: bytes.len(),
        },
        other => other.into(),
    })?;
    let features = entropy::decode_codes(&rest[..payload_len], shape, bits)?;
    if rest.len() > payload_len {
        return Err(BitstreamError::TrailingBytes(rest.len() - payload_len));
    }
    let blob = CompressedBlob {
        variant: if semantic.is_some() {
            Variant::PreSemantic
        } else {
            Variant::PostSemantic
        },
        width,
        height,
        preset,
        bits,
        classes,
        semantic,
        original,
        features,
    };
    blob.validate()?;
    Ok(blob)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn blob(variant: Variant) -> CompressedBlob {
        let codes = (0..16 * 8 * 8).map(|i| ((i * 37) % 41) as i32 - 20).collect();
        let features = QuantizedFeatureMap::new([16, 8, 8], codes, 6).unwrap();
        CompressedBlob {
            variant,
            width: 128,
            height: 128,
            preset: RatePreset::Mid,
            bits: 6,
            classes: 10,
            semantic: (variant == Variant::PreSemantic).then_some(SemanticPayload {
                class_id: 3,
                top_ids: [3, 1, 7, 0, 9],
                top_probs: [200, 30, 10, 5, 2],
            }),
            original: None,
            features,
        }
    }

    #[test]
    fn header_prefix_lengths() {
        let (bytes, layout) = serialize_with_layout(&blob(Variant::PreSemantic)).unwrap();
        assert_eq!(layout.header + layout.semantic, 31);
        assert_eq!(bytes.len(), layout.total());
        let (bytes, layout) = serialize_with_layout(&blob(Variant::PostSemantic)).unwrap();
        assert_eq!(layout.header + layout.semantic, 14);
        assert_eq!(&bytes[..4], b"DSIC");
    }

    #[test]
    fn overhead_is_136_bits_for_pre_semantic_only() {
        assert_eq!(semantic_overhead_bits(&blob(Variant::PreSemantic)), 136);
        assert_eq!(semantic_overhead_bits(&blob(Variant::PostSemantic)), 0);
        let bpp: f64 = 136.0 / (128.0 * 128.0);
        assert!((bpp - 0.0083).abs() < 1e-4);
    }

    #[test]
    fn round_trips() {
        for v in [Variant::PreSemantic, Variant::PostSemantic] {
            let b = blob(v);
            assert_eq!(parse(&serialize(&b).unwrap()).unwrap(), b);
            let mut c = b.clone();
            c.original = Some((121, 100));
            assert_eq!(parse(&serialize(&c).unwrap()).unwrap(), c);
        }
    }

    #[test]
    fn corruption_classes_map_to_errors() {
        let bytes = serialize(&blob(Variant::PreSemantic)).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(parse(&bad), Err(BitstreamError::BadMagic));
        let mut bad = bytes.clone();
        bad[4] = 255;
        assert_eq!(parse(&bad), Err(BitstreamError::UnsupportedVersion(255)));
        for cut in [0, 3, 10, 20, 30, bytes.len() - 1] {
            assert!(
                matches!(parse(&bytes[..cut]), Err(BitstreamError::Truncated { .. })),
                "{cut}"
            );
        }
        // every bit of the coded body and the checksum
        let body_start = HEADER_BYTES + SEMANTIC_BYTES + 4;
        for byte in body_start..bytes.len() {
            for bit in 0..8 {
                let mut bad = bytes.clone();
                bad[byte] ^= 1 << bit;
                let e = parse(&bad);
                assert!(
                    matches!(e, Err(BitstreamError::ChecksumMismatch { .. })),
                    "{byte}.{bit}: {e:?}"
                );
            }
        }
        let mut bad = bytes.clone();
        bad.push(0);
        assert_eq!(parse(&bad), Err(BitstreamError::TrailingBytes(1)));
        let mut bad = bytes;
        bad[5] |= 0x80;
        assert!(matches!(parse(&bad), Err(BitstreamError::Invalid(_))));
    }

    #[test]
    fn serialize_rejects_broken_invariants() {
        let mut b = blob(Variant::PostSemantic);
        b.width = 120;
        assert!(serialize(&b).is_err());
        let mut b = blob(Variant::PreSemantic);
        b.semantic = None;
        assert!(serialize(&b).is_err());
        let mut b = blob(Variant::PreSemantic);
        b.semantic.as_mut().unwrap().class_id = 4;
        assert!(serialize(&b).is_err());
    }

    #[test]
    fn small_class_counts_pad_the_top_list() {
        let r = SemanticResult::from_probabilities(vec![0.2, 0.5, 0.3], 3);
        let s = SemanticPayload::from_result(&r);
        assert_eq!(s.top_ids, [1, 2, 0, NO_CLASS, NO_CLASS]);
        assert_eq!(s.top_probs[3..], [0, 0]);
        let mut b = blob(Variant::PreSemantic);
        b.classes = 3;
        b.semantic = Some(s);
        assert_eq!(parse(&serialize(&b).unwrap()).unwrap(), b);
    }
}
