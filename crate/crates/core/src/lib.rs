//! Collaborative BEV perception with contrastive multi-view mutual
//! information: synthetic scenes, the fusion pipeline, MI discriminators,
//! training, and evaluation.

pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod gradsuite;
pub mod mvmi;
pub mod params;
pub mod perception;
pub mod scene;
pub mod trainer;

pub use error::{Error, Result};
