//! Core of a style-controlled hybrid dialogue system.
//!
//! A small variational encoder-decoder transformer whose latent style
//! variable is shaped by triplet contrastive losses and injected into
//! generation through additive fusion and latent-conditioned attention
//! prefixes. Everything here is `no_std` + `alloc`; file formats and the
//! command line live in the `styledial` crate.

#![no_std]

extern crate alloc;

pub mod contrast;
pub mod corpus_gen;
pub mod dialogue_core;
pub mod error;
pub mod latent_style;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod seq2seq;
pub mod trainer;

pub use error::{Error, Result};
