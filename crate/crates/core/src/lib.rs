//! Numerical laboratory for region-constrained group-relative policy
//! optimization on small deterministic flow models.
//!
//! The crate provides the pieces needed to study localized image editing in
//! latent space end to end, on CPU, with plain `f64` math:
//!
//! * [`latent`] — flat latent vectors with a token-grid interpretation,
//!   binary edit masks, and region-restricted norms.
//! * [`noise`] — region-decoupled perturbation of a shared anchor noise
//!   draw, the global-resampling baseline, and the conditional covariance
//!   of each candidate given the anchor.
//! * [`flow`] — toy velocity fields (a linear field and a small
//!   cross-attention field), deterministic Euler rollouts, and hand-written
//!   reverse/forward-mode derivatives through the rollout.
//! * [`surrogate`] — the kernel-based candidate distribution over rollout
//!   states that stands in for a likelihood ratio on a deterministic
//!   sampler.
//! * [`acd`] — attention-concentration rewards measuring how much text
//!   attention mass falls inside the edit region.
//! * [`env`] — synthetic editing tasks with analytic edit/preservation
//!   rewards.
//! * [`grpo`] — group-relative advantages, the clipped surrogate objective,
//!   and a full training step for the toy models.
//! * [`variance`] — Monte-Carlo and closed-form machinery for checking the
//!   variance behaviour of the two perturbation schemes.
//!
//! Everything is deterministic given a seed: all randomness flows through
//! counter-mode generators keyed by explicit `(seed, stream)` pairs, so
//! results are reproducible regardless of thread count.

pub mod acd;
pub mod env;
pub mod error;
pub mod flow;
pub mod grpo;
pub mod latent;
pub mod noise;
pub mod rng;
pub mod surrogate;
pub mod variance;

pub use error::{Error, Result};
