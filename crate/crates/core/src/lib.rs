//! Consistent multi-layer attention.
//!
//! Attention gates produce spatial distributions at two depths of a
//! convolutional network. The fine and the coarse map are made consistent by
//! a KL projection onto the set of pairs whose coarse map is the block
//! marginal of the fine map; the projection decomposes through per-cell dual
//! multipliers, which the training loss learns to certify.

pub mod attention;
pub mod consistency;
pub mod diff;
pub mod error;
pub mod eval;
pub mod grid;
pub mod synth;
pub mod toynet;

pub use error::{Error, Result};
