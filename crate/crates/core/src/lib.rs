//! Face dataset anonymization by latent code optimization.
//!
//! Real images are inverted into a generator's extended latent space, paired
//! with the nearest synthetic face, and the identity-bearing rows of the
//! spliced code are optimized so the rendered face keeps the attributes of
//! the original while its identity moves to a chosen similarity margin.

pub mod anonymize;
pub mod backend;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod hashing;
pub mod image;
pub mod io_util;
pub mod latent;
pub mod manifest;
pub mod optimizer;
pub mod pairing;
pub mod pipeline;

pub use error::{Error, Result};
