//! Two-branch self-attention for 3D point sets.
//!
//! The model splits attention into a local branch that mixes edge features
//! inside small anchor-centered patches and a global branch that mixes the
//! patches themselves, which keeps the attention cost at `M k^2 + M^2`
//! instead of the naive `N^2`. The crate ships:
//!
//! - [`tensor`]: a minimal dense-tensor core with reverse-mode autodiff,
//!   just enough to express and train the model on a CPU;
//! - [`geometry`]: farthest point sampling, k-nearest-neighbour patches and
//!   edge features;
//! - [`attention`]: the self-attention operator, multi-head wrapper and
//!   pre-norm transformer block;
//! - [`model`]: the two-branch network, the naive full-attention baseline,
//!   and the classification / descriptor heads;
//! - [`analysis`]: closed-form parameter and FLOP accounting, checked
//!   exactly against an instrumented forward pass;
//! - [`training`]: synthetic datasets, AdamW with a cosine schedule, the
//!   hardest-contrastive matching pipeline and its evaluation metrics.
//!
//! The `ptnt` binary exposes all of it as subcommands; see the book under
//! `book/` for a guided tour.

pub mod attention;
mod error;
pub mod model;
pub mod geometry;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
