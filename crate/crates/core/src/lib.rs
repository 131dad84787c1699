//! Categorical disentanglement GAN for class-imbalanced image data.
//!
//! The library couples an InfoGAN-style generator/recognition pair with a
//! learnable Gumbel-Softmax categorical prior and an NT-Xent contrastive
//! loss on the recognition features, so the discrete latent code tracks
//! object identity even when class frequencies are skewed. It also carries
//! the matching measurement protocol: confusion matrices built from
//! class-conditional generations, NMI / average-entropy scores, nearest
//! neighbor probes, and the canonical imbalanced split tables.

pub mod data;
pub mod error;
pub mod evaluation;
pub mod latent;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod training;

pub use error::{Error, Result};
