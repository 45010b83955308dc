//! Tiered hybrid KV-cache compression over recorded attention traces.
//!
//! The pipeline classifies every attention head as *static* (a small, stable
//! set of tokens absorbs nearly all attention mass) or *dynamic* (the focus
//! moves as decoding proceeds), splits a global token budget between the two
//! populations, then compresses each head accordingly:
//!
//! * static heads are pruned once at prefill to a fixed token set chosen by
//!   an observation-window score and a text-first retention policy
//!   ([`pruner`]);
//! * dynamic heads keep their full KV off the fast tier and page
//!   chunk-granular slices back in per decode step via a mean-key index
//!   ([`retriever`]).
//!
//! [`engine`] replays recorded decode steps against both the compressed and
//! the full cache and reports fidelity, fast-tier peak bytes, and transfer
//! traffic. [`strategy`] exposes the hybrid pipeline and its ablations behind
//! a common trait, registered by name and selectable at runtime.

pub mod attention;
pub mod budget;
pub mod classify;
pub mod engine;
pub mod error;
pub mod pruner;
pub mod retriever;
pub mod strategy;
pub mod trace;

pub use error::{Error, Result};
