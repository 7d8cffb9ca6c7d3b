//! Prediction poisoning against model stealing.
//!
//! A defended classifier perturbs each posterior it returns, within an
//! `ε` budget, so that the gradient an attacker's surrogate would take on
//! the answer points away from the gradient it would take on the true
//! posterior. The crate bundles the perturbation solver, baseline defenses,
//! the attacks it is evaluated against, and the experiment harness.

pub mod attack;
pub mod data;
pub mod defense;
mod error;
mod par;
pub mod harness;
pub mod nn;
pub mod simplex;
pub mod tensor;

pub use error::{Error, Result};
pub use par::default_threads;
