#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use deepsic::checkpoint;
use deepsic::image_io::{encode_png, Rgb8};
use deepsic::toy::render;
use deepsic_core::networks::{Model, RateConfig, RatePreset};
use deepsic_core::rng::seeded;

pub const CLASSES: usize = 10;

/// Untrained model with few channels, enough to exercise every code path.
pub fn tiny_model(preset: RatePreset, seed: u64) -> Model<f32> {
    Model::new(RateConfig::preset(preset).with_channels(8), CLASSES, &mut seeded(seed)).unwrap()
}

pub fn save_tiny_model(dir: &Path, preset: RatePreset, seed: u64) -> PathBuf {
    let path = dir.join(format!("{}.dsicw", preset.name()));
    checkpoint::save(&path, &tiny_model(preset, seed)).unwrap();
    path
}

pub fn toy_image(class: usize, size: usize, seed: u64) -> Rgb8 {
    render(class, size, &mut seeded(seed))
}

/// Toy image cropped to `w`×`h` so sizes off the stride grid are covered.
pub fn write_image(path: &Path, w: usize, h: usize, seed: u64) {
    let full = toy_image((seed % CLASSES as u64) as usize, w.max(h), seed);
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        let row = y * full.width * 3;
        data.extend_from_slice(&full.data[row..row + w * 3]);
    }
    let img = Rgb8 {
        width: w,
        height: h,
        data,
    };
    std::fs::write(path, encode_png(&img).unwrap()).unwrap();
}

pub fn deepsic(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deepsic"))
        .args(args.iter().map(|a| a.as_ref()))
        .env("DSIC_THREADS", "1")
        .output()
        .unwrap()
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}
