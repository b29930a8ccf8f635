//! Multi-view, multi-scale contrastive language-image pre-training on
//! mammography-style tabular data, exercised end to end on a synthetic
//! corpus with recoverable ground truth.

pub mod caption;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data_model;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod image;
pub mod losses;
pub mod mat;
pub mod model;
pub mod multiview;
pub mod rng;
pub mod simmap;
pub mod synth;
pub mod tokenizer;
pub mod trainer;

pub use error::{MamaError, Result};
