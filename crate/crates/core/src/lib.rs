//! Two-stream action recognition from a skeleton sequence and a single RGB
//! frame, with skeleton-guided attention and relation-mask feature fusion.
//!
//! The crate is organized bottom-up: a small reverse-mode autograd
//! ([`autograd`]) over dense `f64` tensors, the data model and parsers
//! ([`skeleton_io`], [`frame`]), geometry ([`augmentation`]), the two
//! feature streams, the fusion heads, training, a synthetic data generator
//! and the complexity reporter.

pub mod augmentation;
pub mod autograd;
pub mod checkpoint;
pub mod complexity;
pub mod config;
pub mod error;
pub mod frame;
pub mod fusion;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod output;
pub mod params;
pub mod rgb_stream;
pub mod skeleton_io;
pub mod skeleton_stream;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
