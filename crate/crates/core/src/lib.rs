//! Prototype-based personalized pruning for channel-gated residual networks.
//!
//! Train a small residual classifier whose convolutions carry per-channel
//! gate modules, regularize the gates toward per-identity prototypes, then
//! prune the network once per identity — no finetuning — and run inference
//! on the compact personal model.

pub mod cli;
pub mod container;
pub mod data;
pub mod error;
pub mod gating;
pub mod harness;
pub mod losses;
pub mod model;
pub mod nn;
pub mod prototypes;
pub mod pruning;
pub mod report;
pub mod rng;
pub mod selfcheck;

pub use error::{Error, Result};
