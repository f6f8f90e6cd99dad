//! Synthetic preference-alignment laboratory.
//!
//! A seeded world of queries and candidate responses carries a hidden golden
//! utility. Reward models are fitted to noisy pairwise annotations, softmax
//! policies are aligned against those reward models, and the adversarial
//! loop refits the reward model on golden responses versus policy samples
//! between alignment phases.

pub mod align;
pub mod apo;
pub mod error;
pub mod numcore;
pub mod policy;
pub mod reward;
pub mod rng;
pub mod world;

pub use error::{Error, Result};
