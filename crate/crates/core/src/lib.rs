//! Budgeted early-exit inference over a (frame-set × block) lattice.
//!
//! The crate is `no_std` (with `alloc`) and contains only pure computation:
//!
//! * [`tensor`]: a small double-precision kernel (conv, pooling, linear,
//!   softmax, cross-entropy, momentum SGD) with hand-written backward passes.
//! * [`temporal`]: frame sampling, the frame-set permutation, temporal
//!   coverage / stride analysis and the forward-only online shift.
//! * [`grid`]: the checkpoint lattice, dependency closure and FLOPs table.
//! * [`model`]: parameters plus progressive (cached, early-exit) and
//!   monolithic execution over the lattice, and the multi-checkpoint loss.
//! * [`policy`]: exit distribution, budget solver and threshold calibration.
//! * [`data`]: the synthetic video generator.
//!
//! IO, configuration and the command line live in the `dyninfer` crate.

#![no_std]

extern crate alloc;

pub mod data;
pub mod error;
pub mod grid;
pub mod model;
pub mod policy;
pub mod temporal;
pub mod tensor;

pub use error::{Error, Result};
