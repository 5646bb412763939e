//! Generative video question answering with multi-granularity contrastive
//! learning, cross-modal fusion and autoregressive answer generation.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod contrastive;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod model;
pub mod params;
pub mod sampling;
pub mod synthetic;
pub mod text;
pub mod training;
pub mod video;

pub use error::{Error, Result};
