//! Self-distillation pretraining for satellite imagery.

pub mod augment;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod dino;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod imageops;
pub mod model;
pub mod nn;
pub mod rundir;
pub mod sweep;
pub mod synth;
pub mod trainer;
pub mod viz;

pub use error::{Error, Result};
