//! Desk-scale in-context reinforcement learning lab.
//!
//! Pipeline: train tabular Q-learning agents on many hidden Frozen Lake
//! maps and record every episode ([`datagen`]), serialize episodes into a
//! role-delimited token format ([`codec`]), train a small causal
//! transformer with a DQN objective over trajectory slices ([`trainer`],
//! [`model`], [`numerics`]), then evaluate the frozen model online, where
//! it improves purely by accumulating experience in its context window
//! ([`eval`], [`experiments`]).

pub mod codec;
pub mod datagen;
pub mod env;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod model;
pub mod numerics;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};
