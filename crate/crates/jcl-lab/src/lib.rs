//! Desk-scale workbench for joint contrastive domain adaptation.
//!
//! Two halves:
//! - exact verification of target-error bounds and discrete information
//!   identities on finite instances ([`theory`], [`infotheory`]);
//! - a self-contained training stack (dense nets with hand-written
//!   gradients, momentum key encoder with a FIFO dictionary, spherical
//!   k-means pseudo-labeling) for shifted synthetic classification tasks
//!   ([`nn`], [`moco`], [`cluster`], [`data`], [`trainer`]).
//!
//! The `jcl-lab` binary exposes the verification suites and the trainer; see
//! [`cli`].

#![forbid(unsafe_code)]

pub mod cli;
pub mod cluster;
pub mod data;
pub mod error;
pub mod infotheory;
pub mod mat;
pub mod moco;
pub mod nn;
pub mod rng;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
