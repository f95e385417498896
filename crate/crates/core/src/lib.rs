//! Desk-scale laboratory for multi-subject customization of a miniature
//! text-conditioned video diffusion model.
//!
//! The crate trains a small denoising model on composites of reference
//! subjects, supervises its cross-attention maps with subject masks, keeps
//! class behaviour alive through prior preservation, and samples videos
//! from text prompts alone. Everything is f64, single-threaded, and
//! deterministic under a fixed seed.

pub mod attnctl;
pub mod compose;
pub mod config;
pub mod error;
pub mod eval;
pub mod imgio;
pub mod latent;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod ckpt;
pub mod sample;
pub mod schedule;
pub mod train;
pub mod tape;
pub mod tensor;
pub mod text;
pub mod viz;

pub use error::{Error, Result};
