//! Desk-scale laboratory for discovering and steering emotion-recognition
//! circuits in a small decoder-only transformer: per-layer JumpReLU sparse
//! autoencoders over the residual stream, three-phase information-flow
//! detection, phase-stratified causal tracing validated against planted
//! ground-truth cues, and sparse causal-feature steering.

pub mod error;
pub mod causal;
pub mod corpus;
pub mod flow;
pub mod io;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod probe;
pub mod sae;
pub mod steering;
pub mod studies;

pub use error::{Error, Result};
