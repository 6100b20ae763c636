//! Natural-language descriptions of vision-model features.
//!
//! A frozen backbone supplies per-layer feature maps, a small trainable
//! translator turns pooled or per-location features into prefix embeddings,
//! and a frozen causal language model decodes them. Query likelihoods per
//! location give open-vocabulary saliency maps.

pub mod backbone;
pub mod config;
pub mod dropout;
pub mod error;
pub mod eval;
pub mod explain;
pub mod image;
pub mod lm;
pub mod nn;
pub mod toy;
pub mod trainer;
pub mod translator;

pub use candle_core;
pub use error::{Error, Result};
