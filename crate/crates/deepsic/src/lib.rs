//! File formats, corpora, training driver and command-line front end for the
//! semantic image codec in `deepsic-core`.

pub mod atomic;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod eval;
pub mod image_io;
pub mod report;
pub mod toy;
pub mod train;
