//! Weakly-supervised few-shot entity linking.
//!
//! The crate synthesizes in-domain training pairs from an entity dictionary and
//! raw documents ([`weaksup`]), trains a bi-encoder plus a second-stage ranker
//! ([`encoder`]) under a one-step-lookahead reweighting loop driven by a small
//! trusted seed set ([`meta`]), and measures the result ([`eval`]).

pub mod cli;
pub mod encoder;
pub mod error;
pub mod io;
pub mod eval;
pub mod fixture;
pub mod kb;
pub mod meta;
pub mod par;
pub mod selftest;
pub mod weaksup;

pub use error::{Error, Result};
