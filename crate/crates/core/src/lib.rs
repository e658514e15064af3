//! Trajectory-grounded video generation at desk scale.
//!
//! Point trajectories paired with local text descriptions steer a small
//! diffusion transformer through a location-aware cross-attention branch.
//! The crate covers the full loop: trajectory handling, per-token grounding,
//! the attention kernels with hand-written backward passes, flow-matching
//! training, guided sampling, dataset annotation and evaluation metrics, plus
//! a synthetic moving-blob world to exercise all of it.

pub mod annotation;
pub mod attention;
pub mod dit;
pub mod error;
pub mod evaluation;
pub mod grounding;
pub mod guidance;
pub mod harness;
pub mod registry;
pub mod trajectory;

pub use error::{Error, Result};
