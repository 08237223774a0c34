//! Subject-conditioned diffusion adapters trained from winning/losing
//! preference pairs.
//!
//! The crate is layered bottom-up:
//!
//! - [`numerics`]: tensors, reverse-mode gradients, finite-difference checks.
//! - [`schedule`]: noise schedules, forward diffusion, deterministic DDIM.
//! - [`conditioning`]: toy frozen encoders, the image projection MLP, image
//!   cross-attention, γ-weighted fusion and the conditioned denoiser.
//! - [`preference`]: Bradley-Terry, text-only diffusion DPO and the
//!   subject-conditioned preference loss.
//! - [`dataset`]: quality scoring, leveling, pair curation, manifests.
//! - [`training`]: adapter-only optimization, checkpoints, evaluation.
//! - [`verify`]: the self-check suite behind `prefdiff verify`.

pub mod conditioning;
pub mod dataset;
pub mod error;
pub mod numerics;
pub mod preference;
pub mod schedule;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
