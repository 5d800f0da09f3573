//! Segment-aware and syntax-based graph structure learning for aspect
//! sentiment classification, desk-scale and fully differentiable, with
//! brute-force oracles and a finite-difference gradient checker.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod inspect;
pub mod latent;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod params;
pub mod segment;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use matrix::Matrix;
