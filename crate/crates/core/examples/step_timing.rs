//! Wall-clock cost of one training step.
//!
//! `cargo run --release --example step_timing -- [channels batch size]`, default `32 16 128`.

use std::time::Instant;

use deepsic_core::networks::{Model, RateConfig, RatePreset};
use deepsic_core::rng::seeded;
use deepsic_core::training::{TrainConfig, Trainer};
use deepsic_core::Tensor;

fn main() {
    let mut args = std::env::args()
        .skip(1)
        .map(|a| a.parse::<usize>().expect("numeric argument"));
    let channels = args.next().unwrap_or(32);
    let batch = args.next().unwrap_or(16);
    let size = args.next().unwrap_or(128);
    let cfg = RateConfig::preset(RatePreset::Mid).with_channels(channels);
    let model = Model::<f32>::new(cfg, 10, &mut seeded(1)).unwrap();
    let mut t = Trainer::new(
        model,
        TrainConfig {
            batch,
            ..TrainConfig::default()
        },
    );
    let x = Tensor::from_fn(&[batch, 3, size, size], |i| ((i * 31) % 97) as f32 / 96.0);
    let labels: Vec<usize> = (0..batch).map(|i| i % 10).collect();
    t.step(&x, &labels).unwrap();
    let start = Instant::now();
    let n = 3;
    for _ in 0..n {
        t.step(&x, &labels).unwrap();
    }
    println!(
        "C={channels} batch={batch} size={size}: {:.3} s/step",
        start.elapsed().as_secs_f64() / n as f64
    );
}
