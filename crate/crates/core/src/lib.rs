//! Latent graph attention (LGA) over 2D feature maps.
//!
//! Each spatial cell of a latent map is a graph node with up to nine learned,
//! outward-directed edges (itself plus its 8-connected neighbours). Stacking
//! `L` message-passing layers over the same normalized graph propagates
//! context `L` cells away at `O(N C)` cost per layer.
//!
//! Modules:
//! - [`tensor`]: feature maps and grouped 1x1 convolutions
//! - [`graph`]: edge maps, sparse adjacency, normalization, message passing
//! - [`lga`]: the stacked module with its exact backward pass
//! - [`loss`]: the pairwise contrastive loss and patch similarity
//! - [`baselines`]: dense and criss-cross attention for comparison
//! - [`cost`]: analytic parameter/FLOP counters and scaling fits
//! - [`bench`]: wall-time scaling measurements
//! - [`gradcheck`]: finite-difference verification of all gradients
//! - [`io`], [`checkpoint`]: on-disk formats

pub mod baselines;
pub mod bench;
pub mod checkpoint;
pub mod cost;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod instrument;
pub mod io;
pub mod lga;
pub mod loss;
pub mod tensor;

pub use error::{LgaError, Result};
pub use graph::{EdgeActivation, EdgeKernels, LocalGraph};
pub use lga::{lga_backward, lga_forward, LgaConfig, LgaParams};
pub use tensor::{FeatureMap, GroupedLinear};
