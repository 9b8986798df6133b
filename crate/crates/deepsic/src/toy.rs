//! Synthetic ten-class corpus: one shape or texture per class, drawn in a
//! random color over a random two-color gradient, antialiased, with mild
//! sensor noise.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::Path;

use deepsic_core::rng::{seeded, standard_normal, CodecRng};
use rand::Rng;
use rayon::prelude::*;

use crate::corpus::{CorpusError, LabeledCorpus};
use crate::image_io::{encode_png, Rgb8};

pub const TOY_CLASSES: [&str; 10] = [
    "disc", "square", "triangle", "ring", "cross", "hstripes", "vstripes", "checker", "ellipse", "dots",
];

const SUPERSAMPLE: usize = 4;
const NOISE_SIGMA: f64 = 0.015;

#[derive(Clone, Copy, Debug)]
struct Placement {
    cx: f64,
    cy: f64,
    r: f64,
    /// Rotation in radians.
    phi: f64,
    period: f64,
}

impl Placement {
    /// Point in the shape's rotated frame, centred on the shape.
    fn local(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.phi.sin_cos();
        (c * dx + s * dy, -s * dx + c * dy)
    }
}

fn inside(class: usize, p: &Placement, x: f64, y: f64) -> bool {
    let (u, v) = p.local(x, y);
    let d = (u * u + v * v).sqrt();
    let r = p.r;
    match class {
        0 => d < r,
        1 => u.abs().max(v.abs()) < 0.85 * r,
        2 => (0..3).all(|k| {
            let a = TAU * k as f64 / 3.0 + PI / 2.0;
            u * a.cos() + v * a.sin() < 0.5 * r
        }),
        3 => d < r && d > 0.55 * r,
        4 => (u.abs() < 0.3 * r && v.abs() < r) || (v.abs() < 0.3 * r && u.abs() < r),
        5 | 6 => (v / p.period).rem_euclid(1.0) < 0.5,
        7 => ((u / p.period).floor() + (v / p.period).floor()).rem_euclid(2.0) < 1.0,
        8 => (u / r).powi(2) + (v / (0.45 * r)).powi(2) < 1.0,
        9 => {
            let step = 0.7 * r;
            let (gu, gv) = ((u / step).round(), (v / step).round());
            gu.abs() <= 1.0 && gv.abs() <= 1.0 && ((u - gu * step).powi(2) + (v - gv * step).powi(2)).sqrt() < r / 5.0
        }
        _ => unreachable!("toy class {class}"),
    }
}

fn luma(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn color(rng: &mut CodecRng) -> [f64; 3] {
    [
        rng.gen_range(0.1..0.9),
        rng.gen_range(0.1..0.9),
        rng.gen_range(0.1..0.9),
    ]
}

/// One `size×size` image of `class`.
pub fn render(class: usize, size: usize, rng: &mut CodecRng) -> Rgb8 {
    let s = size as f64;
    let bg0 = color(rng);
    let bg1 = color(rng);
    let bg_mid = [0, 1, 2].map(|c| 0.5 * (bg0[c] + bg1[c]));
    let fg = loop {
        let c = color(rng);
        if (luma(c) - luma(bg_mid)).abs() > 0.25 {
            break c;
        }
    };
    let theta = rng.gen_range(0.0..TAU);
    let (gs, gc) = theta.sin_cos();
    let phi = match class {
        5 => rng.gen_range(-0.17..0.17),
        6 => PI / 2.0 + rng.gen_range(-0.17..0.17),
        7 => rng.gen_range(-0.3..0.3),
        _ => rng.gen_range(0.0..TAU),
    };
    let p = Placement {
        cx: s * rng.gen_range(0.32..0.68),
        cy: s * rng.gen_range(0.32..0.68),
        r: s * rng.gen_range(0.18..0.3),
        phi,
        period: s * rng.gen_range(0.16..0.26),
    };
    let mut data = Vec::with_capacity(size * size * 3);
    let sub = SUPERSAMPLE as f64;
    for y in 0..size {
        for x in 0..size {
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let fx = x as f64 + (sx as f64 + 0.5) / sub;
                    let fy = y as f64 + (sy as f64 + 0.5) / sub;
                    hits += inside(class, &p, fx, fy) as usize;
                }
            }
            let cover = hits as f64 / (sub * sub);
            let t = 0.5 + ((x as f64 / s - 0.5) * gc + (y as f64 / s - 0.5) * gs) * 0.9;
            for c in 0..3 {
                let bg = bg0[c] + (bg1[c] - bg0[c]) * t.clamp(0.0, 1.0);
                let v = bg + (fg[c] - bg) * cover + NOISE_SIGMA * standard_normal(rng);
                data.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Rgb8 {
        width: size,
        height: size,
        data,
    }
}

/// Seed of image `index` of `class`, so any image can be regenerated alone.
fn image_seed(seed: u64, class: usize, index: usize) -> u64 {
    seed ^ ((class as u64) << 40) ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Writes `root/<class>/<index>.png` and `labels.txt`.
pub fn write_toy_corpus(root: &Path, per_class: usize, size: usize, seed: u64) -> Result<LabeledCorpus, CorpusError> {
    for (class, name) in TOY_CLASSES.iter().enumerate() {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(|source| CorpusError::Io {
            path: dir.clone(),
            source,
        })?;
        (0..per_class).into_par_iter().try_for_each(|i| {
            let img = render(class, size, &mut seeded(image_seed(seed, class, i)));
            let path = dir.join(format!("{i:04}.png"));
            let bytes = encode_png(&img)?;
            fs::write(&path, bytes).map_err(|source| CorpusError::Io { path, source })
        })?;
    }
    let corpus = LabeledCorpus::open(root)?;
    corpus.write_labels()?;
    Ok(corpus)
}
