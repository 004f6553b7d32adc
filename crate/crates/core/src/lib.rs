//! Exact, enumerable verification of trust-region error bounds for
//! autoregressive policies, and of Trust Region Masking.
//!
//! Everything is computed over a full context tree of `V^T` trajectories per
//! prompt, so objectives, divergences and gradients are exact rather than
//! sampled. Sampling appears only where the masked estimator itself samples.

// `!(x >= 0.0)` is deliberate throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod cli;
pub mod counterexamples;
pub mod divergence;
pub mod document;
pub mod error;
pub mod fixtures;
pub mod float_json;
pub mod objectives;
pub mod perturbation;
pub mod seed;
pub mod tabular_mdp;
pub mod tolerance;
pub mod trm;

pub use error::{LabError, Result};
pub use tabular_mdp::{ContextTree, ProblemShape, RewardTable, TabularPolicy, Trajectory};
