//! Attribute-specific embedding learning for fine-grained similarity.
//!
//! A global branch embeds the whole image under an attribute with
//! attribute-aware spatial and channel attention; its spatial attention map
//! picks a region of interest that a local branch re-embeds at higher
//! resolution. Both are trained with triplet ranking losses in two stages and
//! fused at retrieval time.

pub mod attention;
pub mod backbone;
mod binio;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod localize;
pub mod loss;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pnm;
pub mod resize;
pub mod retrieval;
pub mod selftest;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::{Param, Tensor};
