//! Diffusion-based defense against adversarial patch attacks.
//!
//! The pipeline trains a small text-conditioned denoising diffusion model,
//! localizes patches by differencing prompt-guided and unguided one-step
//! denoisings, restores the masked region by inpainting, and adapts both
//! stages with few-shot prompt tuning. An infrared-proxy extension adds a
//! learned domain token and two infrared-specific losses. The `bench`
//! module wires everything into attacks, baselines, and experiment suites.

pub mod data_io;
pub mod datagen;
pub mod diffusion;
pub mod error;
pub mod attacker;
pub mod localizer;
pub mod nn;
pub mod restorer;
pub mod tuner;
pub mod unet;
pub mod util;
pub mod victims;

pub use error::{Error, Result};
