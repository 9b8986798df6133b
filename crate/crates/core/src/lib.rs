#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod bitstream;
pub mod codec;
pub mod density;
pub mod entropy;
pub mod metrics;
pub mod networks;
pub mod nn;
pub mod quantizer;
pub mod real;
pub mod rng;
pub mod tensor;
pub mod training;

pub use real::Real;
pub use tensor::Tensor;
