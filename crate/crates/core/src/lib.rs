//! Unaligned image-to-image translation with a discriminator built on frozen pretrained features.
//!
//! The discriminator embeds a frozen pretrained convolutional trunk
//! ([`refnet`]) and learns only small combiner blocks and heads on top of its
//! feature pyramid ([`percdisc`]). Generators ([`generator`]) are trained
//! against it with non-saturating or least-squares objectives plus identity
//! and cycle terms ([`objectives`], [`trainer`]). [`evalkit`] provides the
//! classifier two-sample test and attribute log-loss used for evaluation.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evalkit;
pub mod generator;
mod im2col;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod percdisc;
pub mod refnet;
pub mod trainer;

pub use error::{Error, Result};

/// Library version recorded in checkpoints.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
