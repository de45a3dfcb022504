//! Adaptive feature transfer.
//!
//! Trains a small downstream model while pulling its feature kernel toward
//! that of weighted, frozen pre-trained features, and compares against
//! plain training and classic distillation baselines.

pub mod cli;
pub mod error;
pub mod eval;
pub mod featurestore;
pub mod models;
pub mod numerics;
pub mod regularizers;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
