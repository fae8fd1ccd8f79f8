//! Loss-guided random-access reading for long-document language modeling.
//!
//! A small transformer reads a document one window at a time; after each
//! window the [`dataserver`] pools the window's per-token losses into a
//! confidence and decides how many tokens to jump over before the next read.

pub mod cli;
pub mod corpus;
pub mod dataserver;
pub mod error;
pub mod harness;
pub mod memory;
pub mod model;
pub mod par;
pub mod plot;

pub use error::{Error, Result};
