//! Effect-invariance testing across environments and invariance-based policy
//! generalization: datasets and policies, a multi-environment simulator with
//! closed-form oracles, Wald and doubly-robust invariance tests, zero-shot
//! and few-shot policy learning, and an experiment harness.

pub mod bench;
pub mod data;
pub mod dr;
pub mod error;
pub mod few_shot;
pub mod num;
pub mod seeding;
pub mod synth;
pub mod wald;
pub mod zero_shot;

pub use error::{Error, Result};
