//! Seeded randomness. Every random draw in the crate flows from a
//! [`CodecRng`] built with [`seeded`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type CodecRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> CodecRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Box–Muller draw from N(0, 1).
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    num_traits::Float::sqrt(-2.0 * num_traits::Float::ln(u1)) * num_traits::Float::cos(core::f64::consts::TAU * u2)
}
