//! Desk-scale text style transfer with domain-adaptive meta-learning.
//!
//! The crate trains a small from-scratch encoder–decoder transformer with an
//! adversarial style discriminator on multi-domain non-parallel corpora, and
//! learns a parameter initialization that adapts to unseen domains from a
//! few examples via a second-order bilevel meta update. It ships the full
//! experiment harness: synthetic corpus generation, two training stages,
//! few-shot adaptation, baseline strategies, automatic metrics and a CLI.

pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod mat;
pub mod metalearn;
pub mod model;
pub mod objectives;
pub mod params;
pub mod scalar;
pub mod synth;

pub use error::{Error, Result};
