//! Unified dropout for small Transformers: feature, structure and data
//! dropout, a double-precision encoder-decoder with reverse-mode gradients,
//! a finite-difference oracle for the regularisers each dropout induces, and
//! a trainer for synthetic and TSV translation corpora.

pub mod config;
pub mod data;
pub mod dropout;
pub mod error;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod toy;
pub mod trainer;

pub use error::{Error, Result};
