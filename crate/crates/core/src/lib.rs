//! Desk-scale reinforcement learning with verifiable rewards, built around a
//! lookahead tree-based rollout engine (LATR).
//!
//! The crate trains a tabular softmax policy on a miniature Countdown
//! arithmetic game and compares rollout strategies head to head:
//!
//! - [`sampling::stochastic_rollout`] — plain temperature/top-k/top-p sampling,
//! - [`sampling::sr_rollout`] — oversample-then-select-for-diversity,
//! - [`tree::latr_rollout`] — a width-bounded rollout tree that forks at
//!   high-uncertainty steps and prunes branches whose lookahead continuations
//!   collapse back onto their parent,
//! - [`tree::latr_variant_rollout`] — ablations (random branching, random
//!   pruning, no pruning) for attribution experiments.
//!
//! Rollout groups feed group-normalized policy-gradient objectives
//! ([`rl::grpo_step`], [`rl::dapo_step`]) with exact gradients over the logit
//! table, so every piece of the pipeline is testable against closed forms and
//! finite differences.
//!
//! All numeric kernels are generic over a floating scalar ([`Scalar`], i.e.
//! `f32` or `f64`); type aliases at the crate root pin the `f64` instantiations
//! that the CLI uses. Countdown expression evaluation is exact rational
//! arithmetic and never touches floats.

pub mod countdown;
pub mod policy;
pub mod report;
pub mod rl;
pub mod rng;
pub mod sampling;
pub mod scalar;
pub mod similarity;
pub mod tree;

pub use scalar::Scalar;

/// Default scalar used by the CLI and the reference configurations.
pub type F = f64;

/// `f64` policy: the instantiation every shipped tool works with.
pub type Policy = policy::SoftmaxPolicy<F>;
/// `f64` probability row.
pub type Probs = policy::ProbVector<F>;
/// `f64` gradient accumulator over the logit table.
pub type Grads = policy::LogitGrads<F>;

/// Single-precision variants, for callers that want the smaller table.
pub type PolicyF32 = policy::SoftmaxPolicy<f32>;
pub type ProbsF32 = policy::ProbVector<f32>;
