// SPDX-License-Identifier: MIT OR Apache-2.0

//! Rank-one editing of transformer MLP memories, and the tooling needed to
//! see when a single edit wrecks the model.
//!
//! The crate is `no_std` (it needs `alloc`) and holds all of the arithmetic:
//!
//! - [`linalg`]: dense `f64` vectors and matrices, Cholesky solves, PCA.
//! - [`model`]: a byte-level decoder-only transformer with a key/value tap on
//!   one MLP, hand-written backpropagation, and an Adam trainer.
//! - [`keyspace`]: prefixed and unprefixed subject keys, prefix sampling, and
//!   the key second-moment matrix `C`.
//! - [`editor`]: value-vector search and the closed-form rank-one update, in
//!   both the inconsistent-key and the consistent-key form.
//! - [`diagnostics`]: denominator statistics, key divergence, and first-token
//!   concentration.
//! - [`eval`]: perplexity, efficacy/generalization/locality, and the collapse
//!   benchmark with its BOS and position-embedding ablations.
//!
//! File formats, reports, and the command-line driver live in the `romelab`
//! crate.

#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod diagnostics;
pub mod editor;
mod error;
pub mod eval;
pub mod keyspace;
pub mod linalg;
pub mod model;

pub use error::{Error, Result};
