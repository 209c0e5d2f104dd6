//! Reinforcement learning from observation-only videos on image-based grid
//! navigation: adversarial alignment of source-video embeddings, inverse
//! action/reward estimation, and advantage-weighted policy optimization with
//! GAE or Peng's Q(λ) critics.

pub mod awpo;
pub mod config;
pub mod dataset;
pub mod env;
pub mod error;
pub mod features;
pub mod metrics;
pub mod nn;
pub mod obs2demo;
pub mod policy_eval;
pub mod train;

pub use error::{Error, Result};
