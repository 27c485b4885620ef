//! Distribution-level latent alignment at desk scale.
//!
//! The crate trains an autoencoder whose aggregate posterior `q(z)` is pulled
//! toward a reference prior `p_r(z)` by the difference of two score fields: a
//! frozen teacher fitted to `p_r` and a student that tracks `q` as it moves.
//! Everything needed to study that loop lives here: a small reverse-mode
//! autodiff tape, MLP score networks, the linear noise path, analytic
//! reference distributions that double as test oracles, the joint trainer with
//! its rival objectives, and sample-based distribution metrics.
//!
//! The crate is `no_std` (with `alloc`) when the default `std` feature is off.
//! The `std` feature only enables runtime CPU detection in the GEMM kernel.

#![cfg_attr(not(feature = "std"), no_std)]
// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod array;
pub mod autodiff;
pub mod data;
pub mod dm;
mod error;
pub mod flow;
pub mod gradcheck;
mod math;
pub mod metrics;
pub mod networks;
pub mod reference;
pub mod rng;
pub mod schedules;

pub use array::Array;
pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
