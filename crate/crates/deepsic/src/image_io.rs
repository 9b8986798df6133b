//! PNG and binary PPM (P6) images as `3×H×W` tensors in `[0, 1]`.

use std::fs;
use std::path::{Path, PathBuf};

use deepsic_core::Tensor;
use thiserror::Error;

use crate::atomic::{write_atomic, AtomicWriteError};

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: unsupported image format ({reason})")]
    Unsupported { path: PathBuf, reason: String },
    #[error("{path}: corrupt image: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("expected a 3×H×W tensor, got {0:?}")]
    Shape(Vec<usize>),
    #[error(transparent)]
    Write(#[from] AtomicWriteError),
}

/// 8-bit interleaved RGB pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rgb8 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Rgb8 {
    pub fn to_tensor(&self) -> Tensor<f32> {
        let (h, w) = (self.height, self.width);
        let mut out = vec![0.0f32; 3 * h * w];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * h * w + i] = px[c] as f32 / 255.0;
            }
        }
        Tensor::new(&[3, h, w], out).expect("rgb shape")
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self, ImageIoError> {
        let &[3, h, w] = t.shape() else {
            return Err(ImageIoError::Shape(t.shape().to_vec()));
        };
        let src = t.data();
        let mut data = Vec::with_capacity(3 * h * w);
        for i in 0..h * w {
            for c in 0..3 {
                data.push(to_u8(src[c * h * w + i]));
            }
        }
        Ok(Self {
            width: w,
            height: h,
            data,
        })
    }
}

pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Png,
    Ppm,
}

fn sniff(bytes: &[u8]) -> Option<Format> {
    if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        Some(Format::Png)
    } else if bytes.starts_with(b"P6") {
        Some(Format::Ppm)
    } else {
        None
    }
}

fn format_for_path(path: &Path) -> Result<Format, ImageIoError> {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => Ok(Format::Png),
        Some("ppm") => Ok(Format::Ppm),
        other => Err(ImageIoError::Unsupported {
            path: path.to_path_buf(),
            reason: format!("extension {:?}, expected .png or .ppm", other.unwrap_or("")),
        }),
    }
}

pub fn read_rgb8(path: &Path) -> Result<Rgb8, ImageIoError> {
    let bytes = fs::read(path).map_err(|source| ImageIoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_rgb8(&bytes).map_err(|e| e.at(path))
}

/// Decodes PNG or P6 bytes; the format is taken from the content.
pub fn decode_rgb8(bytes: &[u8]) -> Result<Rgb8, ImageIoError> {
    match sniff(bytes) {
        Some(Format::Png) => decode_png(bytes),
        Some(Format::Ppm) => decode_ppm(bytes),
        None if bytes.starts_with(b"P3") => Err(unsupported("ASCII PPM (P3)")),
        None => Err(unsupported("not PNG or binary PPM")),
    }
}

pub fn load_image(path: &Path) -> Result<Tensor<f32>, ImageIoError> {
    Ok(read_rgb8(path)?.to_tensor())
}

/// Writes PNG or PPM, chosen by extension, atomically.
pub fn save_image(path: &Path, image: &Tensor<f32>) -> Result<(), ImageIoError> {
    let format = format_for_path(path)?;
    let rgb = Rgb8::from_tensor(image)?;
    let bytes = encode(&rgb, format).map_err(|e| e.at(path))?;
    write_atomic(path, &bytes)?;
    Ok(())
}

pub fn encode_png(rgb: &Rgb8) -> Result<Vec<u8>, ImageIoError> {
    encode(rgb, Format::Png)
}

pub fn encode_ppm(rgb: &Rgb8) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", rgb.width, rgb.height).into_bytes();
    out.extend_from_slice(&rgb.data);
    out
}

fn encode(rgb: &Rgb8, format: Format) -> Result<Vec<u8>, ImageIoError> {
    match format {
        Format::Ppm => Ok(encode_ppm(rgb)),
        Format::Png => {
            let mut out = Vec::new();
            let enc = image::codecs::png::PngEncoder::new(&mut out);
            image::ImageEncoder::write_image(
                enc,
                &rgb.data,
                rgb.width as u32,
                rgb.height as u32,
                image::ExtendedColorType::Rgb8,
            )
            .map_err(|e| unsupported(&e.to_string()))?;
            Ok(out)
        }
    }
}

fn unsupported(reason: &str) -> ImageIoError {
    ImageIoError::Unsupported {
        path: PathBuf::new(),
        reason: reason.to_string(),
    }
}

fn corrupt(reason: impl Into<String>) -> ImageIoError {
    ImageIoError::Corrupt {
        path: PathBuf::new(),
        reason: reason.into(),
    }
}

impl ImageIoError {
    fn at(self, path: &Path) -> Self {
        match self {
            ImageIoError::Unsupported { reason, .. } => ImageIoError::Unsupported {
                path: path.to_path_buf(),
                reason,
            },
            ImageIoError::Corrupt { reason, .. } => ImageIoError::Corrupt {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        }
    }
}

fn decode_png(bytes: &[u8]) -> Result<Rgb8, ImageIoError> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::Unsupported(u) => unsupported(&u.to_string()),
        other => corrupt(other.to_string()),
    })?;
    // Alpha is dropped; 16-bit samples are rounded to 8-bit precision.
    let rgb = img.to_rgb8();
    Ok(Rgb8 {
        width: rgb.width() as usize,
        height: rgb.height() as usize,
        data: rgb.into_raw(),
    })
}

/// Reads header tokens separated by whitespace, skipping `#` comments.
struct PpmHeader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl PpmHeader<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, ImageIoError> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(corrupt(format!("PPM header: missing {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| corrupt(format!("PPM header: {what} out of range")))
    }
}

fn decode_ppm(bytes: &[u8]) -> Result<Rgb8, ImageIoError> {
    let mut h = PpmHeader { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(corrupt("PPM header: zero dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(corrupt(format!("PPM header: maxval {maxval} outside 1..=65535")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if !bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(corrupt("PPM header: truncated"));
    }
    let raster = &bytes[h.pos + 1..];
    let samples = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| corrupt("PPM header: dimensions overflow"))?;
    let wide = maxval > 255;
    let needed = if wide { 2 * samples } else { samples };
    if raster.len() < needed {
        return Err(corrupt(format!(
            "PPM raster truncated: {} of {needed} bytes",
            raster.len()
        )));
    }
    let data = if wide {
        raster[..needed]
            .chunks_exact(2)
            .map(|s| scale_sample(u16::from_be_bytes([s[0], s[1]]) as u32, maxval as u32))
            .collect()
    } else if maxval == 255 {
        raster[..needed].to_vec()
    } else {
        raster[..needed]
            .iter()
            .map(|&s| scale_sample(s as u32, maxval as u32))
            .collect()
    };
    Ok(Rgb8 { width, height, data })
}

fn scale_sample(v: u32, maxval: u32) -> u8 {
    let v = v.min(maxval);
    ((v * 255 + maxval / 2) / maxval) as u8
}
