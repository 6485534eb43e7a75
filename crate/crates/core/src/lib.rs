//! Single-step non-autoregressive speech transformer driven by CTC
//! alignments, built on a small reverse-mode tensor engine.

pub mod analysis;
pub mod attention;
pub mod bench;
pub mod blocks;
pub mod config;
pub mod ctc;
pub mod data;
pub mod error;
pub mod formats;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
