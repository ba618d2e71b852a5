//! Geometry-aware transfer attacks on tiny in-repo classifiers.
//!
//! The crate is `no_std` + `alloc`. It carries the reverse-mode autodiff
//! engine ([`diffmath`]), the synthetic dataset and model zoo ([`zoo`]), the
//! fixed-budget ℓ∞ and feature-space attacks ([`attacks`]), the
//! budget-search driver ([`ga`]), train/validation partitioning
//! ([`partition`]) and scoring ([`metrics`]).
//!
//! File formats, parallel drivers and the command-line front end live in the
//! `geoattack` companion crate.
#![cfg_attr(not(feature = "std"), no_std)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod array;
pub mod attacks;
pub mod diffmath;
mod error;
pub mod ga;
pub mod math;
pub mod metrics;
pub mod partition;
pub mod record;
pub mod rng;
pub mod zoo;

pub use array::DenseArray;
pub use error::{Error, Result};
pub use record::{AttackRecord, Metric};
