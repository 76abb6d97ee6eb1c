//! Equivariant adapter fine-tuning for geometric trajectory diffusion models.

pub mod adapter;
pub mod backbone;
pub mod controls;
pub mod diffusion;
pub mod error;
pub mod exec;
pub mod geometry;
pub mod harness;
pub mod numerics;
pub mod simdata;

pub use error::{Error, Result};
