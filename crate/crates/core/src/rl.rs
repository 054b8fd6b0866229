//! Group-relative policy optimization over rollout groups.
//!
//! A *group* is the set of `k` completions generated for one prompt. Rewards
//! are standardized within the group ([`compute_advantages`], a population
//! z-score with a zero fallback for zero-variance groups) and every token of
//! a sequence inherits its sequence's advantage. Two objectives drive the
//! tabular softmax policy:
//!
//! - [`grpo_step`] — clipped-ratio surrogate averaged per sequence and then
//!   per token, minus an exact per-context KL penalty toward a frozen
//!   reference policy;
//! - [`dapo_step`] — token-level aggregation (one normalizer across every
//!   token in the batch), decoupled clip bounds, no KL term.
//!
//! Both return the objective value together with analytic gradients for every
//! visited logit row. The min/clip composition has measure-zero kinks at the
//! clip boundaries; everywhere else the gradients are exact and the tests
//! hold them to central finite differences.
//!
//! [`train_loop`] wires the pieces together. Each step draws a task batch,
//! snapshots the rollout policy, generates one group per task with the
//! configured strategy (rollout tree, plain sampling, oversample-and-select,
//! or a tree ablation), scores completions with the Countdown reward,
//! optionally filters zero-variance groups with oversampled regeneration
//! (DAPO), and takes a single gradient-ascent step. Tree strategies split
//! each group's budget between tree and plain rollouts according to
//! [`hybrid_allocate`]'s annealed fraction, and the two kinds are pooled into
//! one group before normalization. Every step appends a [`TraceRow`] with
//! training and validation metrics.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::countdown::{reward, CountdownTask};
use crate::policy::{
    ContextKey, LogitGrads, PolicyError, PolicyRole, SoftmaxPolicy, TokenId, TokenModel,
};
use crate::report::{self, ReportError};
use crate::rng::{self, tags};
use crate::sampling::{
    select_diverse, stochastic_rollout, stochastic_rollout_from, SamplingConfig, SamplingError,
    Sequence, SrConfig,
};
use crate::scalar::Scalar;
use crate::tree::{
    latr_variant_rollout, LatrConfig, LatrVariant, SequenceOrigin, TreeError, TreeStats,
};

/// Regeneration attempts the training loop grants the DAPO filter, per group
/// of the requested batch. Generous because a cold policy produces mostly
/// zero-reward (hence zero-variance) groups; each attempt is one cheap group.
const REGEN_ATTEMPTS_PER_GROUP: usize = 256;

/// Errors from objective evaluation, group filtering, or training.
#[derive(Debug, Error)]
pub enum RlError {
    #[error("no groups supplied")]
    EmptyGroups,
    #[error("a group must hold at least one sequence")]
    EmptyGroup,
    #[error("sequences must be non-empty to average per token")]
    EmptySequence,
    #[error(
        "group field lengths disagree: {sequences} sequences, {rewards} rewards, \
         {advantages} advantages, {origins} origins"
    )]
    MismatchedGroup {
        sequences: usize,
        rewards: usize,
        advantages: usize,
        origins: usize,
    },
    #[error("clip_eps must be positive and finite, got {0}")]
    BadClipEps(f64),
    #[error("kl_beta must be non-negative and finite, got {0}")]
    BadKlBeta(f64),
    #[error("clip bounds must satisfy 0 < clip_low <= clip_high, got ({low}, {high})")]
    BadClipRange { low: f64, high: f64 },
    #[error("oversample_factor must be at least 1, got {0}")]
    BadOversample(f64),
    #[error("learning_rate must be non-negative and finite, got {0}")]
    BadLearningRate(f64),
    #[error("eta0 must lie in [0, 1], got {0}")]
    BadEta0(f64),
    #[error("gamma must lie in (0, 1], got {0}")]
    BadGamma(f64),
    #[error("{field} must be at least 1")]
    ZeroCount { field: &'static str },
    #[error("group size must be at least 2 to standardize rewards, got {k}")]
    GroupSizeTooSmall { k: usize },
    #[error("sr keep_count {keep} must equal the group size {k}")]
    SrKeepMismatch { keep: usize, k: usize },
    #[error("batch draw of {need} tasks exceeds the pool of {pool}")]
    BatchExceedsPool { need: usize, pool: usize },
    #[error("the {which} task list is empty")]
    NoTasks { which: &'static str },
    #[error(
        "group regeneration exhausted after {attempts} attempts: \
         kept {got} of {needed} groups"
    )]
    FilterExhausted {
        needed: usize,
        got: usize,
        attempts: u64,
    },
    #[error("policies disagree on context order: {a} vs {b}")]
    ContextOrderMismatch { a: usize, b: usize },
    #[error("unknown algorithm {0:?} (expected grpo or dapo)")]
    UnknownAlgo(String),
    #[error("unknown strategy {0:?} (expected latr, stochastic, sr, or latr_variant)")]
    UnknownStrategy(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Report(#[from] ReportError),
}

/// The `k` completions generated for one prompt, with their scores.
///
/// `advantages` start at zero when a group is built and are filled in by
/// [`compute_advantages`] once filtering has settled the batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub prompt: Vec<TokenId>,
    pub sequences: Vec<Sequence>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    /// How each sequence was produced; parallel to `sequences`.
    pub origins: Vec<SequenceOrigin>,
}

impl Group {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// All parallel fields must agree in length and the group must be
    /// non-empty.
    pub fn validate(&self) -> Result<(), RlError> {
        let n = self.sequences.len();
        if n == 0 {
            return Err(RlError::EmptyGroup);
        }
        if self.rewards.len() != n || self.advantages.len() != n || self.origins.len() != n {
            return Err(RlError::MismatchedGroup {
                sequences: n,
                rewards: self.rewards.len(),
                advantages: self.advantages.len(),
                origins: self.origins.len(),
            });
        }
        Ok(())
    }

    /// Exact equality test: Countdown rewards are constructed constants
    /// (0.0, 0.1, 1.0), so a zero-variance group is detectable without a
    /// tolerance.
    pub fn rewards_all_equal(&self) -> bool {
        self.rewards.windows(2).all(|w| w[0] == w[1])
    }
}

/// Clipped-surrogate-with-KL-penalty settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    /// Symmetric clip radius for the probability ratio.
    pub clip_eps: f64,
    /// Weight of the per-token KL penalty toward the reference policy.
    pub kl_beta: f64,
    /// Gradient-ascent step size.
    pub learning_rate: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            kl_beta: 0.01,
            learning_rate: 0.05,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        if !(self.clip_eps > 0.0 && self.clip_eps.is_finite()) {
            return Err(RlError::BadClipEps(self.clip_eps));
        }
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            return Err(RlError::BadKlBeta(self.kl_beta));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(RlError::BadLearningRate(self.learning_rate));
        }
        Ok(())
    }
}

/// Token-level objective settings: decoupled clip bounds, no KL term, and an
/// oversampled rollout budget for the zero-variance group filter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DapoConfig {
    /// Downward clip radius (ratio floor `1 − clip_low`).
    pub clip_low: f64,
    /// Upward clip radius (ratio ceiling `1 + clip_high`).
    pub clip_high: f64,
    /// Groups generated per group finally kept, before filtering.
    pub oversample_factor: f64,
    /// Gradient-ascent step size.
    pub learning_rate: f64,
}

impl Default for DapoConfig {
    fn default() -> Self {
        Self {
            clip_low: 0.2,
            clip_high: 0.28,
            oversample_factor: 1.5,
            learning_rate: 0.05,
        }
    }
}

impl DapoConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        if !(self.clip_low > 0.0 && self.clip_high >= self.clip_low && self.clip_high.is_finite())
        {
            return Err(RlError::BadClipRange {
                low: self.clip_low,
                high: self.clip_high,
            });
        }
        if !(self.oversample_factor >= 1.0 && self.oversample_factor.is_finite()) {
            return Err(RlError::BadOversample(self.oversample_factor));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(RlError::BadLearningRate(self.learning_rate));
        }
        Ok(())
    }
}

/// Exponentially annealed split of each group's budget between tree rollouts
/// and plain stochastic rollouts: `η(step) = eta0 · gamma^step`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HybridSchedule {
    /// Tree fraction at step zero.
    pub eta0: f64,
    /// Per-step decay; 1.0 keeps the fraction constant.
    pub gamma: f64,
}

impl Default for HybridSchedule {
    fn default() -> Self {
        Self {
            eta0: 1.0,
            gamma: 0.985,
        }
    }
}

impl HybridSchedule {
    pub fn validate(&self) -> Result<(), RlError> {
        if !(0.0..=1.0).contains(&self.eta0) {
            return Err(RlError::BadEta0(self.eta0));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(RlError::BadGamma(self.gamma));
        }
        Ok(())
    }

    /// The tree fraction at a given training step.
    pub fn eta(&self, step: usize) -> f64 {
        self.eta0 * self.gamma.powi(step as i32)
    }
}

/// Standardizes a group's rewards: `(R_i − mean) / population_std`.
///
/// A group whose rewards are all identical gets zero advantages across the
/// board: the z-score is undefined there, and zero turns the policy term of
/// a later update into a no-op instead of amplified rounding noise. The
/// all-equal case is detected by exact comparison *before* computing the
/// mean, because `mean([0.1, 0.1, 0.1])` already rounds away from `0.1`.
pub fn compute_advantages(rewards: &[f64]) -> Vec<f64> {
    if rewards.is_empty() {
        return Vec::new();
    }
    if rewards.windows(2).all(|w| w[0] == w[1]) {
        return vec![0.0; rewards.len()];
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

/// Splits a group budget of `k` rollouts into `(k_tree, k_plain)` for the
/// given step, rounding the tree share half-to-even.
pub fn hybrid_allocate(k: usize, step: usize, schedule: &HybridSchedule) -> (usize, usize) {
    let eta = schedule.eta(step);
    let k_tree = ((eta * k as f64).round_ties_even() as usize).min(k);
    (k_tree, k - k_tree)
}

fn check_group_inputs(groups: &[Group]) -> Result<(), RlError> {
    if groups.is_empty() {
        return Err(RlError::EmptyGroups);
    }
    for group in groups {
        group.validate()?;
        if group.sequences.iter().any(Sequence::is_empty) {
            return Err(RlError::EmptySequence);
        }
    }
    Ok(())
}

fn check_policy_pair<S: Scalar>(
    a: &SoftmaxPolicy<S>,
    b: &SoftmaxPolicy<S>,
) -> Result<(), RlError> {
    if a.vocab().size() != b.vocab().size() {
        return Err(RlError::Policy(PolicyError::VocabMismatch(
            a.vocab().size(),
            b.vocab().size(),
        )));
    }
    if a.context_order() != b.context_order() {
        return Err(RlError::ContextOrderMismatch {
            a: a.context_order(),
            b: b.context_order(),
        });
    }
    Ok(())
}

/// Exact categorical KL and its gradient with respect to the row's logits.
///
/// With `p = softmax(z)`, `s_j = ln p_j − ln q_j` and `KL = Σ p_j s_j`, the
/// gradient is `∂KL/∂z_j = p_j (s_j − KL)`; the entries sum to zero.
fn kl_value_and_grad<S: Scalar>(
    policy: &SoftmaxPolicy<S>,
    reference: &SoftmaxPolicy<S>,
    ctx: &ContextKey,
) -> (S, Vec<S>) {
    let p = policy.next_distribution(ctx);
    let lp = policy.log_distribution(ctx);
    let lq = reference.log_distribution(ctx);
    let probs = p.probs();
    let mut kl = S::zero();
    for j in 0..probs.len() {
        if probs[j] > S::zero() {
            kl = kl + probs[j] * (lp[j] - lq[j]);
        }
    }
    let grad = (0..probs.len())
        .map(|j| probs[j] * (lp[j] - lq[j] - kl))
        .collect();
    (kl, grad)
}

/// Walks one sequence, adding its tokens' contributions to the objective and
/// the gradient table.
///
/// Every token contributes `coef · min(r·Â, clip(r, 1−lo, 1+hi)·Â)`. The
/// min/clip pair has a flat region: for positive advantage the value is
/// constant once `r` exceeds `1+hi`, for negative advantage once `r` drops
/// below `1−lo`; tokens in those regions contribute no policy gradient.
/// Elsewhere the derivative is `coef · Â · r · ∇ln π(t|ctx)`.
#[allow(clippy::too_many_arguments)]
fn accumulate_sequence<S: Scalar>(
    policy: &SoftmaxPolicy<S>,
    old_policy: &SoftmaxPolicy<S>,
    kl_penalty: Option<(&SoftmaxPolicy<S>, f64)>,
    prompt: &[TokenId],
    seq: &Sequence,
    advantage: f64,
    coef: f64,
    clip_low: f64,
    clip_high: f64,
    objective: &mut f64,
    grads: &mut LogitGrads<S>,
) {
    for (l, &t) in seq.tokens.iter().enumerate() {
        let ctx = policy.context_at(prompt, &seq.tokens[..l]);
        let lp_new = policy.token_logprob(&ctx, t).to_report();
        let lp_old = old_policy.token_logprob(&ctx, t).to_report();
        let ratio = (lp_new - lp_old).exp();
        let clipped = ratio.clamp(1.0 - clip_low, 1.0 + clip_high) * advantage;
        *objective += coef * (ratio * advantage).min(clipped);

        let live = if advantage > 0.0 {
            ratio <= 1.0 + clip_high
        } else if advantage < 0.0 {
            ratio >= 1.0 - clip_low
        } else {
            false
        };
        if live {
            let row = policy.logprob_grad(&ctx, t);
            grads.accumulate(&ctx, &row, S::from_config(coef * advantage * ratio));
        }

        if let Some((reference, beta)) = kl_penalty {
            if beta > 0.0 {
                let (kl, kl_grad) = kl_value_and_grad(policy, reference, &ctx);
                *objective -= beta * coef * kl.to_report();
                grads.accumulate(&ctx, &kl_grad, S::from_config(-(beta * coef)));
            }
        }
    }
}

/// Clipped-surrogate objective with an exact KL penalty, averaged per
/// sequence and then per token, and its analytic gradient.
///
/// `J = (1/N) Σ_i (1/|s_i|) Σ_l [ min(r·Â_i, clip(r, 1−ε, 1+ε)·Â_i)
/// − β·KL(π‖π_ref)(ctx_{i,l}) ]`, where `N` counts every sequence across all
/// groups and `r = π(t|ctx) / π_old(t|ctx)`. The KL penalty is the exact
/// categorical divergence at each visited context.
pub fn grpo_step<S: Scalar>(
    groups: &[Group],
    policy: &SoftmaxPolicy<S>,
    old_policy: &SoftmaxPolicy<S>,
    ref_policy: &SoftmaxPolicy<S>,
    cfg: &GrpoConfig,
) -> Result<(f64, LogitGrads<S>), RlError> {
    cfg.validate()?;
    check_group_inputs(groups)?;
    check_policy_pair(policy, old_policy)?;
    check_policy_pair(policy, ref_policy)?;

    let total_sequences: usize = groups.iter().map(Group::len).sum();
    let mut objective = 0.0;
    let mut grads = LogitGrads::new();
    for group in groups {
        for (i, seq) in group.sequences.iter().enumerate() {
            let coef = 1.0 / (total_sequences as f64 * seq.len() as f64);
            accumulate_sequence(
                policy,
                old_policy,
                Some((ref_policy, cfg.kl_beta)),
                &group.prompt,
                seq,
                group.advantages[i],
                coef,
                cfg.clip_eps,
                cfg.clip_eps,
                &mut objective,
                &mut grads,
            );
        }
    }
    Ok((objective, grads))
}

/// Token-level objective with decoupled clip bounds and no KL term, plus its
/// analytic gradient.
///
/// `J = (1/Σ_i |s_i|) Σ_i Σ_l min(r·Â_i, clip(r, 1−ε_low, 1+ε_high)·Â_i)`:
/// one normalizer over every token in the batch, so long sequences weigh in
/// proportionally instead of being averaged away.
pub fn dapo_step<S: Scalar>(
    groups: &[Group],
    policy: &SoftmaxPolicy<S>,
    old_policy: &SoftmaxPolicy<S>,
    cfg: &DapoConfig,
) -> Result<(f64, LogitGrads<S>), RlError> {
    cfg.validate()?;
    check_group_inputs(groups)?;
    check_policy_pair(policy, old_policy)?;

    let total_tokens: usize = groups
        .iter()
        .flat_map(|g| g.sequences.iter())
        .map(Sequence::len)
        .sum();
    let coef = 1.0 / total_tokens as f64;
    let mut objective = 0.0;
    let mut grads = LogitGrads::new();
    for group in groups {
        for (i, seq) in group.sequences.iter().enumerate() {
            accumulate_sequence(
                policy,
                old_policy,
                None,
                &group.prompt,
                seq,
                group.advantages[i],
                coef,
                cfg.clip_low,
                cfg.clip_high,
                &mut objective,
                &mut grads,
            );
        }
    }
    Ok((objective, grads))
}

/// Drops groups whose rewards are all identical and refills from
/// `regenerate` until exactly `needed` groups are retained, in arrival
/// order. Groups beyond `needed` are discarded.
///
/// `regenerate` receives the attempt index (for RNG stream derivation) and
/// returns a batch of fresh groups; it is called at most `attempt_cap`
/// times before the filter gives up and reports the shortfall.
pub fn dapo_filter<F>(
    initial: Vec<Group>,
    needed: usize,
    attempt_cap: usize,
    mut regenerate: F,
) -> Result<Vec<Group>, RlError>
where
    F: FnMut(u64) -> Result<Vec<Group>, RlError>,
{
    let mut kept: Vec<Group> = Vec::with_capacity(needed);
    for group in initial {
        if kept.len() < needed && !group.rewards_all_equal() {
            kept.push(group);
        }
    }
    let mut attempts = 0u64;
    while kept.len() < needed {
        if attempts >= attempt_cap as u64 {
            return Err(RlError::FilterExhausted {
                needed,
                got: kept.len(),
                attempts,
            });
        }
        let fresh = regenerate(attempts)?;
        attempts += 1;
        for group in fresh {
            if kept.len() < needed && !group.rewards_all_equal() {
                kept.push(group);
            }
        }
    }
    Ok(kept)
}

/// Policy-update algorithm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    Grpo,
    Dapo,
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algo::Grpo => "grpo",
            Algo::Dapo => "dapo",
        })
    }
}

impl FromStr for Algo {
    type Err = RlError;

    fn from_str(s: &str) -> Result<Self, RlError> {
        match s {
            "grpo" => Ok(Algo::Grpo),
            "dapo" => Ok(Algo::Dapo),
            other => Err(RlError::UnknownAlgo(other.to_string())),
        }
    }
}

/// Rollout strategy used to build each group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Lookahead rollout tree with the hybrid tree/plain split.
    Latr,
    /// Plain temperature/top-k/top-p sampling.
    Stochastic,
    /// Oversample plain rollouts, keep the most mutually distant subset.
    Sr,
    /// Rollout tree with one mechanism ablated (see [`LatrVariant`]).
    LatrVariant,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Latr => "latr",
            Strategy::Stochastic => "stochastic",
            Strategy::Sr => "sr",
            Strategy::LatrVariant => "latr_variant",
        })
    }
}

impl FromStr for Strategy {
    type Err = RlError;

    fn from_str(s: &str) -> Result<Self, RlError> {
        match s.replace('-', "_").as_str() {
            "latr" => Ok(Strategy::Latr),
            "stochastic" => Ok(Strategy::Stochastic),
            "sr" => Ok(Strategy::Sr),
            "latr_variant" => Ok(Strategy::LatrVariant),
            other => Err(RlError::UnknownStrategy(other.to_string())),
        }
    }
}

impl Strategy {
    /// Whether this strategy grows rollout trees (and therefore takes part
    /// in the hybrid budget split).
    pub fn uses_tree(self) -> bool {
        matches!(self, Strategy::Latr | Strategy::LatrVariant)
    }
}

/// One line of the training trace.
///
/// Validation metrics (`pass1` through `len8`) come from re-evaluating the
/// updated policy on the validation tasks with the evaluation sampling
/// settings; `distinct_mean` and `pairwise_dist` describe the *training*
/// groups the update was computed from; `branch_ratio`, `sat_len` and
/// `fwd_passes` aggregate over every group generated during the step,
/// including groups the DAPO filter discarded (they cost compute too).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub algo: Algo,
    pub strategy: Strategy,
    /// Mean reward over the sequences actually used for the update.
    pub mean_reward: f64,
    pub pass1: f64,
    pub pass8: f64,
    pub len1: f64,
    pub len8: f64,
    /// Mean distinct final answers per training group.
    pub distinct_mean: f64,
    /// Mean pairwise normalized edit distance within training groups.
    pub pairwise_dist: f64,
    /// Branch events per generated token, over this step's trees.
    pub branch_ratio: f64,
    /// Mean saturation step over trees that saturated; absent when none did
    /// (or the strategy grows no trees).
    pub sat_len: Option<f64>,
    /// Mean distribution queries per generated group, padding included.
    pub fwd_passes: f64,
    /// Tree fraction of the group budget (0 for non-tree strategies).
    pub eta: f64,
}

/// Everything a training run needs besides the policy and the task lists.
///
/// `latr.k` doubles as the group size for every strategy and `latr.n` as the
/// maximum completion length; the tree thresholds are ignored by non-tree
/// strategies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub algo: Algo,
    pub strategy: Strategy,
    /// Tree ablation; only consulted when `strategy` is
    /// [`Strategy::LatrVariant`].
    pub variant: LatrVariant,
    pub latr: LatrConfig,
    /// Rollout sampling; its seed is the base for every training stream.
    pub sampling: SamplingConfig,
    /// Sampling used for per-step validation rollouts.
    pub val_sampling: SamplingConfig,
    pub grpo: GrpoConfig,
    pub dapo: DapoConfig,
    pub hybrid: HybridSchedule,
    /// Oversample-and-select settings; only consulted when `strategy` is
    /// [`Strategy::Sr`], where `keep_count` must equal `latr.k`.
    pub sr: SrConfig,
    pub steps: usize,
    /// Prompts drawn per step (groups per update after filtering).
    pub batch_size: usize,
    /// Completions per validation task.
    pub val_rollouts: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algo: Algo::Grpo,
            strategy: Strategy::Latr,
            variant: LatrVariant::Full,
            latr: LatrConfig::default(),
            sampling: SamplingConfig::train(0),
            val_sampling: SamplingConfig::eval(0),
            grpo: GrpoConfig::default(),
            dapo: DapoConfig::default(),
            hybrid: HybridSchedule::default(),
            sr: SrConfig::default(),
            steps: 500,
            batch_size: 8,
            val_rollouts: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        self.latr.validate()?;
        self.sampling.validate()?;
        self.val_sampling.validate()?;
        self.grpo.validate()?;
        self.dapo.validate()?;
        self.hybrid.validate()?;
        self.variant.validate()?;
        if self.latr.k < 2 {
            return Err(RlError::GroupSizeTooSmall { k: self.latr.k });
        }
        if self.strategy == Strategy::Sr {
            self.sr.validate()?;
            if self.sr.keep_count != self.latr.k {
                return Err(RlError::SrKeepMismatch {
                    keep: self.sr.keep_count,
                    k: self.latr.k,
                });
            }
        }
        if self.batch_size == 0 {
            return Err(RlError::ZeroCount {
                field: "batch_size",
            });
        }
        if self.val_rollouts == 0 {
            return Err(RlError::ZeroCount {
                field: "val_rollouts",
            });
        }
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        match self.algo {
            Algo::Grpo => self.grpo.learning_rate,
            Algo::Dapo => self.dapo.learning_rate,
        }
    }
}

/// A group plus the bookkeeping the trace needs.
struct BuiltGroup {
    group: Group,
    tree: Option<TreeStats>,
    passes: u64,
}

/// Generates one group for `task` from the frozen rollout policy.
fn build_group<S: Scalar>(
    policy: &SoftmaxPolicy<S>,
    task: &CountdownTask,
    cfg: &TrainConfig,
    step: usize,
) -> Result<BuiltGroup, RlError> {
    let prompt = task.prompt_tokens();
    let tag = task.stream_tag();
    let k = cfg.latr.k;
    let n = cfg.latr.n;

    let mut sequences: Vec<Sequence>;
    let mut origins: Vec<SequenceOrigin>;
    let mut tree = None;
    let mut passes = 0u64;

    match cfg.strategy {
        Strategy::Stochastic => {
            sequences = stochastic_rollout(policy, prompt, k, n, &cfg.sampling, tag);
            passes = sequences.iter().map(|s| s.len() as u64).sum();
            origins = vec![SequenceOrigin::Stochastic; k];
        }
        Strategy::Sr => {
            let pool =
                stochastic_rollout(policy, prompt, cfg.sr.oversample_count, n, &cfg.sampling, tag);
            passes = pool.iter().map(|s| s.len() as u64).sum();
            let token_pool: Vec<Vec<TokenId>> =
                pool.iter().map(|s| s.tokens.clone()).collect();
            let kept = select_diverse(&token_pool, cfg.sr.keep_count, cfg.sr.metric)?;
            sequences = kept.into_iter().map(|i| pool[i].clone()).collect();
            origins = vec![SequenceOrigin::Stochastic; k];
        }
        Strategy::Latr | Strategy::LatrVariant => {
            let (k_tree, k_plain) = hybrid_allocate(k, step, &cfg.hybrid);
            sequences = Vec::with_capacity(k);
            origins = Vec::with_capacity(k);
            if k_tree > 0 {
                let tree_cfg = LatrConfig {
                    k: k_tree,
                    ..cfg.latr.clone()
                };
                let variant = match cfg.strategy {
                    Strategy::LatrVariant => cfg.variant,
                    _ => LatrVariant::Full,
                };
                let out =
                    latr_variant_rollout(policy, prompt, &tree_cfg, &cfg.sampling, &variant, tag);
                passes += out.stats.total_passes();
                tree = Some(out.stats);
                sequences.extend(out.sequences);
                origins.extend(out.origins);
            }
            if k_plain > 0 {
                // Stream indices continue past the tree's budget so these
                // rollouts never collide with the streams its padding used.
                let extra = stochastic_rollout_from(
                    policy,
                    prompt,
                    k_tree,
                    k_plain,
                    n,
                    &cfg.sampling,
                    tag,
                );
                passes += extra.iter().map(|s| s.len() as u64).sum::<u64>();
                origins.extend(std::iter::repeat(SequenceOrigin::Stochastic).take(extra.len()));
                sequences.extend(extra);
            }
        }
    }

    let rewards: Vec<f64> = sequences
        .iter()
        .map(|s| reward(task, &s.tokens).total)
        .collect();
    let advantages = vec![0.0; sequences.len()];
    Ok(BuiltGroup {
        group: Group {
            prompt: prompt.to_vec(),
            sequences,
            rewards,
            advantages,
            origins,
        },
        tree,
        passes,
    })
}

/// Training failure that preserves the rows recorded before the abort.
#[derive(Debug, Error)]
#[error("training aborted at step {step}: {source}")]
pub struct TrainAbort {
    pub step: usize,
    pub source: RlError,
    /// Trace rows for the steps that completed.
    pub partial: Vec<TraceRow>,
}

/// Runs `cfg.steps` rollout-and-update iterations on `policy`.
///
/// Per step: draw a prompt batch without replacement, snapshot the rollout
/// policy, build one group per prompt, filter zero-variance groups with
/// regeneration (DAPO only), standardize rewards, take one gradient-ascent
/// step, evaluate on the validation tasks, and append a [`TraceRow`].
/// `on_step` runs after each update with the step index and the updated
/// policy — the hook the CLI uses for periodic checkpoints.
///
/// The KL reference for GRPO is frozen at loop entry. Errors abort the run
/// but keep the completed rows ([`TrainAbort`]).
pub fn train_loop<S: Scalar, F: FnMut(usize, &SoftmaxPolicy<S>)>(
    policy: &mut SoftmaxPolicy<S>,
    train_tasks: &[CountdownTask],
    val_tasks: &[CountdownTask],
    cfg: &TrainConfig,
    mut on_step: F,
) -> Result<Vec<TraceRow>, Box<TrainAbort>> {
    let mut trace = Vec::with_capacity(cfg.steps);
    match run_steps(policy, train_tasks, val_tasks, cfg, &mut trace, &mut on_step) {
        Ok(()) => Ok(trace),
        Err((step, source)) => Err(Box::new(TrainAbort {
            step,
            source,
            partial: trace,
        })),
    }
}

fn run_steps<S: Scalar, F: FnMut(usize, &SoftmaxPolicy<S>)>(
    policy: &mut SoftmaxPolicy<S>,
    train_tasks: &[CountdownTask],
    val_tasks: &[CountdownTask],
    cfg: &TrainConfig,
    trace: &mut Vec<TraceRow>,
    on_step: &mut F,
) -> Result<(), (usize, RlError)> {
    cfg.validate().map_err(|e| (0, e))?;
    if train_tasks.is_empty() {
        return Err((0, RlError::NoTasks { which: "train" }));
    }
    if val_tasks.is_empty() {
        return Err((0, RlError::NoTasks { which: "validation" }));
    }

    let reference = policy.snapshot(PolicyRole::Reference);
    for step in 0..cfg.steps {
        let old = policy.snapshot(PolicyRole::Old);

        // Rollout phase: one group per drawn prompt, all from the snapshot.
        let draw = match cfg.algo {
            Algo::Grpo => cfg.batch_size,
            Algo::Dapo => (cfg.batch_size as f64 * cfg.dapo.oversample_factor).ceil() as usize,
        };
        if draw > train_tasks.len() {
            return Err((
                step,
                RlError::BatchExceedsPool {
                    need: draw,
                    pool: train_tasks.len(),
                },
            ));
        }
        let mut batch_rng = rng::stream(cfg.sampling.seed, &[tags::BATCH, step as u64]);
        let picks = rand::seq::index::sample(&mut batch_rng, train_tasks.len(), draw);

        let mut tree_stats: Vec<TreeStats> = Vec::new();
        let mut group_passes: Vec<u64> = Vec::new();
        let mut built: Vec<Group> = Vec::with_capacity(draw);
        for idx in picks {
            let b = build_group(&old, &train_tasks[idx], cfg, step).map_err(|e| (step, e))?;
            if let Some(ts) = b.tree {
                tree_stats.push(ts);
            }
            group_passes.push(b.passes);
            built.push(b.group);
        }

        let mut groups = match cfg.algo {
            Algo::Grpo => built,
            Algo::Dapo => {
                let cap = REGEN_ATTEMPTS_PER_GROUP * cfg.batch_size;
                dapo_filter(built, cfg.batch_size, cap, |attempt| {
                    let mut regen_rng =
                        rng::stream(cfg.sampling.seed, &[tags::REGEN, step as u64, attempt]);
                    let idx = regen_rng.gen_range(0..train_tasks.len());
                    let b = build_group(&old, &train_tasks[idx], cfg, step)?;
                    if let Some(ts) = b.tree {
                        tree_stats.push(ts);
                    }
                    group_passes.push(b.passes);
                    Ok(vec![b.group])
                })
                .map_err(|e| (step, e))?
            }
        };

        // Update phase.
        for group in &mut groups {
            group.advantages = compute_advantages(&group.rewards);
        }
        let (_objective, grads) = match cfg.algo {
            Algo::Grpo => grpo_step(&groups, policy, &old, &reference, &cfg.grpo),
            Algo::Dapo => dapo_step(&groups, policy, &old, &cfg.dapo),
        }
        .map_err(|e| (step, e))?;
        policy.apply_gradient(&grads, S::from_config(cfg.learning_rate()));

        // Trace row: training-side stats plus a validation pass.
        let reward_count: usize = groups.iter().map(Group::len).sum();
        let mean_reward = groups
            .iter()
            .flat_map(|g| g.rewards.iter())
            .sum::<f64>()
            / reward_count as f64;
        let token_groups: Vec<Vec<&[TokenId]>> = groups
            .iter()
            .map(|g| g.sequences.iter().map(|s| s.tokens.as_slice()).collect())
            .collect();
        let (distinct_mean, pairwise_dist) =
            report::diversity_stats(&token_groups).map_err(|e| (step, e.into()))?;
        let (branch_ratio, sat_len) = if tree_stats.is_empty() {
            (0.0, None)
        } else {
            let rs = report::rollout_stats(&tree_stats).map_err(|e| (step, e.into()))?;
            (rs.branching_ratio, rs.saturation_length_mean)
        };
        let fwd_passes =
            group_passes.iter().sum::<u64>() as f64 / group_passes.len() as f64;
        let eval = report::evaluate_policy(
            policy,
            val_tasks,
            cfg.val_rollouts,
            cfg.latr.n,
            &cfg.val_sampling,
        )
        .map_err(|e| (step, e.into()))?;
        let eta = if cfg.strategy.uses_tree() {
            cfg.hybrid.eta(step)
        } else {
            0.0
        };
        trace.push(TraceRow {
            step,
            algo: cfg.algo,
            strategy: cfg.strategy,
            mean_reward,
            pass1: eval.pass1,
            pass8: eval.pass8,
            len1: eval.len1,
            len8: eval.len8,
            distinct_mean,
            pairwise_dist,
            branch_ratio,
            sat_len,
            fwd_passes,
            eta,
        });
        on_step(step, policy);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::countdown::countdown_vocab;
    use crate::policy::Vocabulary;
    use crate::sampling::StopReason;
    use approx::assert_abs_diff_eq;
    use proptest::{prop_assert, prop_assume, proptest};
    use std::collections::HashSet;
    use std::sync::Arc;

    fn vocab(n: usize) -> Arc<Vocabulary> {
        let tokens = (0..n).map(|i| format!("t{i}")).collect();
        Arc::new(Vocabulary::new(tokens, TokenId(n as u32 - 1)).unwrap())
    }

    fn seq(tokens: &[u32]) -> Sequence {
        Sequence {
            tokens: tokens.iter().map(|&t| TokenId(t)).collect(),
            stop: StopReason::MaxLength,
            total_logprob: 0.0,
        }
    }

    fn group_of(prompt: &[u32], seqs: Vec<Sequence>, rewards: Vec<f64>) -> Group {
        let n = seqs.len();
        let advantages = compute_advantages(&rewards);
        Group {
            prompt: prompt.iter().map(|&t| TokenId(t)).collect(),
            sequences: seqs,
            rewards,
            advantages,
            origins: vec![SequenceOrigin::Stochastic; n],
        }
    }

    /// Groups sampled from `old`, with random rewards from the Countdown
    /// reward lattice.
    fn rollout_groups(
        old: &SoftmaxPolicy<f64>,
        n_groups: usize,
        k: usize,
        n: usize,
        seed: u64,
    ) -> Vec<Group> {
        let cfg = SamplingConfig::train(seed);
        let mut reward_rng = rng::stream(seed, &[0xFEED]);
        (0..n_groups)
            .map(|g| {
                let prompt = [TokenId(g as u32 % 2)];
                let seqs = stochastic_rollout(old, &prompt, k, n, &cfg, g as u64);
                let rewards: Vec<f64> = (0..k)
                    .map(|_| [0.0, 0.1, 1.0][reward_rng.gen_range(0..3)])
                    .collect();
                let advantages = compute_advantages(&rewards);
                Group {
                    prompt: prompt.to_vec(),
                    sequences: seqs,
                    rewards,
                    advantages,
                    origins: vec![SequenceOrigin::Stochastic; k],
                }
            })
            .collect()
    }

    /// Adds zero-mean noise to every context the groups visit.
    fn perturb_visited(
        policy: &mut SoftmaxPolicy<f64>,
        groups: &[Group],
        scale: f64,
        seed: u64,
    ) {
        let mut rng = rng::stream(seed, &[0xD1CE]);
        let order = policy.context_order();
        let mut seen = HashSet::new();
        for g in groups {
            for s in &g.sequences {
                for l in 0..s.tokens.len() {
                    let ctx = ContextKey::from_parts(&g.prompt, &s.tokens[..l], order);
                    if seen.insert(ctx.clone()) {
                        let row = policy.logit_row_mut(&ctx);
                        for w in row.iter_mut() {
                            *w += scale * (rng.gen::<f64>() - 0.5);
                        }
                    }
                }
            }
        }
    }

    fn visited_contexts(groups: &[Group], order: usize) -> Vec<ContextKey> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for g in groups {
            for s in &g.sequences {
                for l in 0..s.tokens.len() {
                    let ctx = ContextKey::from_parts(&g.prompt, &s.tokens[..l], order);
                    if seen.insert(ctx.clone()) {
                        out.push(ctx);
                    }
                }
            }
        }
        out
    }

    /// True when every token ratio keeps a safe margin from both clip
    /// boundaries, so central differences stay on one branch of the min.
    fn ratios_clear_boundaries(
        groups: &[Group],
        policy: &SoftmaxPolicy<f64>,
        old: &SoftmaxPolicy<f64>,
        lo: f64,
        hi: f64,
    ) -> bool {
        for g in groups {
            for s in &g.sequences {
                for l in 0..s.tokens.len() {
                    let ctx = policy.context_at(&g.prompt, &s.tokens[..l]);
                    let t = s.tokens[l];
                    let ratio = (policy.token_logprob(&ctx, t)
                        - old.token_logprob(&ctx, t))
                    .exp();
                    if (ratio - (1.0 + hi)).abs() < 1e-6 || (ratio - (1.0 - lo)).abs() < 1e-6 {
                        return false;
                    }
                }
            }
        }
        true
    }

    fn fd_check<F: Fn(&SoftmaxPolicy<f64>) -> f64>(
        objective: F,
        policy: &SoftmaxPolicy<f64>,
        grads: &LogitGrads<f64>,
        contexts: &[ContextKey],
    ) {
        let h = 1e-5;
        for ctx in contexts {
            let Some(row) = grads.row(ctx) else { continue };
            let row_sum: f64 = row.iter().sum();
            assert!(row_sum.abs() < 1e-10, "gradient row must sum to zero");
            for j in 0..row.len() {
                let mut plus = policy.clone();
                plus.logit_row_mut(ctx)[j] += h;
                let mut minus = policy.clone();
                minus.logit_row_mut(ctx)[j] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let tol = 1e-4 * row[j].abs().max(1e-6);
                assert!(
                    (fd - row[j]).abs() <= tol,
                    "entry {j}: finite difference {fd} vs analytic {}",
                    row[j]
                );
            }
        }
    }

    #[test]
    fn advantage_examples_match_hand_numbers() {
        let a = compute_advantages(&[1.0, 1.0, 0.1, 0.1]);
        for (got, want) in a.iter().zip([1.0, 1.0, -1.0, -1.0]) {
            assert_abs_diff_eq!(got, &want, epsilon = 1e-12);
        }
        let b = compute_advantages(&[1.0, 0.0]);
        assert_eq!(b, vec![1.0, -1.0]);
        assert_eq!(compute_advantages(&[0.1, 0.1, 0.1]), vec![0.0; 3]);
        assert_eq!(compute_advantages(&[0.5]), vec![0.0]);
        assert!(compute_advantages(&[]).is_empty());
    }

    proptest! {
        #[test]
        fn advantages_standardize_any_mixed_group(
            rewards in proptest::collection::vec(
                proptest::sample::select(vec![0.0f64, 0.1, 1.0]), 2..16)
        ) {
            prop_assume!(rewards.iter().any(|&r| r != rewards[0]));
            let a = compute_advantages(&rewards);
            let n = a.len() as f64;
            let mean = a.iter().sum::<f64>() / n;
            let var = a.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var.sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn hybrid_allocation_matches_schedule_examples() {
        let schedule = HybridSchedule::default();
        assert_eq!(hybrid_allocate(8, 0, &schedule), (8, 0));
        assert_eq!(hybrid_allocate(8, 46, &schedule), (4, 4));
        let off = HybridSchedule { eta0: 0.0, gamma: 0.985 };
        assert_eq!(hybrid_allocate(8, 0, &off), (0, 8));
        assert_eq!(hybrid_allocate(8, 123, &off), (0, 8));

        let mut last = 8;
        for step in 0..=500 {
            let (tree, plain) = hybrid_allocate(8, step, &schedule);
            assert_eq!(tree + plain, 8);
            assert!(tree <= last, "tree share may never grow");
            last = tree;
        }
    }

    #[test]
    fn hybrid_rounding_is_half_to_even() {
        // 0.3125 · 8 = 2.5 and 0.4375 · 8 = 3.5: both ties, rounded to even.
        let down = HybridSchedule { eta0: 0.3125, gamma: 1.0 };
        assert_eq!(hybrid_allocate(8, 7, &down), (2, 6));
        let up = HybridSchedule { eta0: 0.4375, gamma: 1.0 };
        assert_eq!(hybrid_allocate(8, 7, &up), (4, 4));
    }

    #[test]
    fn group_validation_catches_size_mismatch() {
        let mut g = group_of(&[0], vec![seq(&[1]), seq(&[2])], vec![1.0, 0.0]);
        assert!(g.validate().is_ok());
        g.rewards.pop();
        assert!(matches!(
            g.validate(),
            Err(RlError::MismatchedGroup { rewards: 1, .. })
        ));
        let empty = Group {
            prompt: vec![],
            sequences: vec![],
            rewards: vec![],
            advantages: vec![],
            origins: vec![],
        };
        assert!(matches!(empty.validate(), Err(RlError::EmptyGroup)));
    }

    #[test]
    fn dapo_filter_keeps_arrival_order_without_regeneration() {
        let good1 = group_of(&[0], vec![seq(&[1]), seq(&[2])], vec![1.0, 0.1]);
        let flat = group_of(&[0], vec![seq(&[1]), seq(&[2])], vec![1.0, 1.0]);
        let good2 = group_of(&[0], vec![seq(&[3]), seq(&[4])], vec![0.0, 0.1]);
        let kept = dapo_filter(
            vec![good1.clone(), flat, good2.clone()],
            2,
            10,
            |_| panic!("no regeneration should be needed"),
        )
        .unwrap();
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].rewards, good1.rewards);
        assert_eq!(kept[1].rewards, good2.rewards);
    }

    #[test]
    fn dapo_filter_refills_from_regeneration() {
        let flat = || group_of(&[0], vec![seq(&[1]), seq(&[2])], vec![0.0, 0.0]);
        let good = |r| group_of(&[0], vec![seq(&[1]), seq(&[2])], vec![r, 0.0]);
        let kept = dapo_filter(vec![good(1.0), flat()], 3, 10, |attempt| {
            Ok(match attempt {
                0 => vec![flat()],
                1 => vec![good(0.1)],
                _ => vec![good(1.0)],
            })
        })
        .unwrap();
        assert_eq!(kept.len(), 3);
        assert_eq!(kept[0].rewards, vec![1.0, 0.0]);
        assert_eq!(kept[1].rewards, vec![0.1, 0.0]);
        assert_eq!(kept[2].rewards, vec![1.0, 0.0]);
        assert!(kept.iter().all(|g| !g.rewards_all_equal()));
    }

    #[test]
    fn dapo_filter_exhaustion_carries_the_shortfall() {
        let flat = || group_of(&[0], vec![seq(&[1]), seq(&[2])], vec![0.1, 0.1]);
        let err = dapo_filter(vec![flat()], 2, 4, |_| Ok(vec![flat()])).unwrap_err();
        match err {
            RlError::FilterExhausted {
                needed,
                got,
                attempts,
            } => {
                assert_eq!((needed, got, attempts), (2, 0, 4));
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn grpo_objective_is_zero_for_identical_policies() {
        let policy = SoftmaxPolicy::<f64>::new(vocab(6), 2);
        let groups = rollout_groups(&policy, 3, 4, 6, 11);
        let cfg = GrpoConfig::default();
        let (j, _) = grpo_step(&groups, &policy, &policy, &policy, &cfg).unwrap();
        assert!(j.abs() < 1e-9, "got {j}");
    }

    #[test]
    fn dapo_objective_reduces_to_token_weighted_advantage_mean() {
        let mut policy = SoftmaxPolicy::<f64>::new(vocab(6), 2);
        let groups = rollout_groups(&policy, 3, 4, 6, 13);
        perturb_visited(&mut policy, &groups, 1.5, 77);
        let cfg = DapoConfig::default();
        // policy == old ⇒ all ratios are 1 regardless of the table contents.
        let (j, _) = dapo_step(&groups, &policy, &policy, &cfg).unwrap();
        let total: f64 = groups
            .iter()
            .flat_map(|g| g.sequences.iter().zip(&g.advantages))
            .map(|(s, a)| s.len() as f64 * a)
            .sum();
        let tokens: usize = groups
            .iter()
            .flat_map(|g| g.sequences.iter())
            .map(Sequence::len)
            .sum();
        assert_abs_diff_eq!(j, total / tokens as f64, epsilon = 1e-12);
    }

    #[test]
    fn per_token_clipping_silences_the_gradient() {
        // Two one-token sequences over a 4-token vocabulary. Sequence A gets
        // advantage +1 with its ratio pushed to 1.4 (past 1 + ε = 1.2), so
        // only sequence B and the KL-free objective's B-side gradient remain.
        let v = vocab(4);
        let old = SoftmaxPolicy::<f64>::new(Arc::clone(&v), 1);
        let mut policy = old.clone();
        let g = group_of(&[0], vec![seq(&[1]), seq(&[2])], vec![1.0, 0.0]);
        let ctx = policy.context_at(&g.prompt, &[]);
        // Raise token 1 from 1/4 to 0.35: ratio 1.4.
        let target = 0.35f64;
        let bump = (target * 3.0 / (1.0 - target)).ln();
        policy.logit_row_mut(&ctx)[1] = bump;

        let cfg = GrpoConfig {
            kl_beta: 0.0,
            ..GrpoConfig::default()
        };
        let (j, grads) = grpo_step(&[g.clone()], &policy, &old, &old, &cfg).unwrap();
        // A is clipped at (1+ε)·Â = 1.2; B contributes min(r·(−1), …) = −r.
        let ratio_b = (policy.token_logprob(&ctx, TokenId(2))
            - old.token_logprob(&ctx, TokenId(2)))
        .exp();
        assert_abs_diff_eq!(j, (1.2 - ratio_b) / 2.0, epsilon = 1e-12);

        let row = grads.row(&ctx).unwrap();
        let expected_grad = policy.logprob_grad(&ctx, TokenId(2));
        for (got, want) in row.iter().zip(&expected_grad) {
            // Only B's term: coefficient (1/2)·Â_B·r_B with Â_B = −1.
            assert_abs_diff_eq!(*got, want * (-0.5 * ratio_b), epsilon = 1e-12);
        }
    }

    #[test]
    fn grpo_gradients_match_finite_differences() {
        let cfg = GrpoConfig::default();
        let mut checked = 0;
        let mut attempt = 0;
        while checked < 3 {
            attempt += 1;
            let old = {
                let mut p = SoftmaxPolicy::<f64>::new(vocab(6), 2);
                let g = rollout_groups(&p, 2, 3, 5, 1000 + attempt);
                perturb_visited(&mut p, &g, 0.5, 2000 + attempt);
                p
            };
            let groups = rollout_groups(&old, 2, 3, 5, 1000 + attempt);
            let mut policy = old.clone();
            perturb_visited(&mut policy, &groups, 0.4, 3000 + attempt);
            let mut reference = old.clone();
            perturb_visited(&mut reference, &groups, 0.6, 4000 + attempt);
            if !ratios_clear_boundaries(&groups, &policy, &old, cfg.clip_eps, cfg.clip_eps) {
                continue;
            }
            let (_, grads) = grpo_step(&groups, &policy, &old, &reference, &cfg).unwrap();
            let contexts = visited_contexts(&groups, 2);
            fd_check(
                |p| grpo_step(&groups, p, &old, &reference, &cfg).unwrap().0,
                &policy,
                &grads,
                &contexts,
            );
            checked += 1;
        }
    }

    #[test]
    fn dapo_gradients_match_finite_differences() {
        let cfg = DapoConfig::default();
        let mut checked = 0;
        let mut attempt = 0;
        while checked < 3 {
            attempt += 1;
            let old = {
                let mut p = SoftmaxPolicy::<f64>::new(vocab(6), 2);
                let g = rollout_groups(&p, 2, 3, 5, 5000 + attempt);
                perturb_visited(&mut p, &g, 0.5, 6000 + attempt);
                p
            };
            let groups = rollout_groups(&old, 2, 3, 5, 5000 + attempt);
            let mut policy = old.clone();
            perturb_visited(&mut policy, &groups, 0.4, 7000 + attempt);
            if !ratios_clear_boundaries(&groups, &policy, &old, cfg.clip_low, cfg.clip_high) {
                continue;
            }
            let (_, grads) = dapo_step(&groups, &policy, &old, &cfg).unwrap();
            let contexts = visited_contexts(&groups, 2);
            fd_check(
                |p| dapo_step(&groups, p, &old, &cfg).unwrap().0,
                &policy,
                &grads,
                &contexts,
            );
            checked += 1;
        }
    }

    #[test]
    fn objectives_ignore_sequence_order_within_groups() {
        let old = SoftmaxPolicy::<f64>::new(vocab(6), 2);
        let mut groups = rollout_groups(&old, 2, 4, 5, 21);
        let mut policy = old.clone();
        perturb_visited(&mut policy, &groups, 0.4, 22);

        let grpo_cfg = GrpoConfig::default();
        let dapo_cfg = DapoConfig::default();
        let (j1, _) = grpo_step(&groups, &policy, &old, &old, &grpo_cfg).unwrap();
        let (d1, _) = dapo_step(&groups, &policy, &old, &dapo_cfg).unwrap();
        for g in &mut groups {
            g.sequences.reverse();
            g.rewards.reverse();
            g.advantages.reverse();
            g.origins.reverse();
        }
        let (j2, _) = grpo_step(&groups, &policy, &old, &old, &grpo_cfg).unwrap();
        let (d2, _) = dapo_step(&groups, &policy, &old, &dapo_cfg).unwrap();
        assert_abs_diff_eq!(j1, j2, epsilon = 1e-12);
        assert_abs_diff_eq!(d1, d2, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let policy = SoftmaxPolicy::<f64>::new(vocab(4), 1);
        let cfg = GrpoConfig::default();
        assert!(matches!(
            grpo_step(&[], &policy, &policy, &policy, &cfg),
            Err(RlError::EmptyGroups)
        ));

        let with_empty_seq = group_of(&[0], vec![seq(&[1]), seq(&[])], vec![1.0, 0.0]);
        assert!(matches!(
            grpo_step(&[with_empty_seq], &policy, &policy, &policy, &cfg),
            Err(RlError::EmptySequence)
        ));

        let other_order = SoftmaxPolicy::<f64>::new(vocab(4), 2);
        let g = group_of(&[0], vec![seq(&[1]), seq(&[2])], vec![1.0, 0.0]);
        assert!(matches!(
            grpo_step(&[g], &policy, &other_order, &policy, &cfg),
            Err(RlError::ContextOrderMismatch { a: 1, b: 2 })
        ));

        assert!(GrpoConfig { clip_eps: 0.0, ..cfg }.validate().is_err());
        assert!(GrpoConfig { kl_beta: -0.1, ..cfg }.validate().is_err());
        let dapo = DapoConfig::default();
        assert!(DapoConfig { clip_high: 0.1, ..dapo }.validate().is_err());
        assert!(DapoConfig { oversample_factor: 0.9, ..dapo }.validate().is_err());
        assert!(HybridSchedule { eta0: 1.2, gamma: 0.9 }.validate().is_err());
        assert!(HybridSchedule { eta0: 0.5, gamma: 0.0 }.validate().is_err());
        assert!(HybridSchedule { eta0: 0.5, gamma: 1.0 }.validate().is_ok());

        let bad_sr = TrainConfig {
            strategy: Strategy::Sr,
            sr: SrConfig {
                keep_count: 5,
                ..SrConfig::default()
            },
            ..TrainConfig::default()
        };
        assert!(matches!(
            bad_sr.validate(),
            Err(RlError::SrKeepMismatch { keep: 5, k: 8 })
        ));
    }

    #[test]
    fn names_round_trip_through_strings() {
        assert_eq!("grpo".parse::<Algo>().unwrap(), Algo::Grpo);
        assert_eq!(Algo::Dapo.to_string(), "dapo");
        assert!("ppo".parse::<Algo>().is_err());
        assert_eq!(
            "latr_variant".parse::<Strategy>().unwrap(),
            Strategy::LatrVariant
        );
        assert_eq!(
            "latr-variant".parse::<Strategy>().unwrap(),
            Strategy::LatrVariant
        );
        assert_eq!(Strategy::Sr.to_string(), "sr");
        assert_eq!(
            serde_json::to_string(&Strategy::LatrVariant).unwrap(),
            "\"latr_variant\""
        );
    }

    fn mini_tasks() -> Vec<CountdownTask> {
        vec![
            CountdownTask::new(vec![2, 3], 5).unwrap(),
            CountdownTask::new(vec![2, 3], 6).unwrap(),
            CountdownTask::new(vec![4, 5], 9).unwrap(),
            CountdownTask::new(vec![2, 5], 10).unwrap(),
            CountdownTask::new(vec![3, 4], 12).unwrap(),
            CountdownTask::new(vec![7], 7).unwrap(),
        ]
    }

    fn mini_config(strategy: Strategy, algo: Algo, steps: usize) -> TrainConfig {
        TrainConfig {
            algo,
            strategy,
            latr: LatrConfig {
                k: 4,
                n: 10,
                windows: vec![3, 5],
                ..LatrConfig::default()
            },
            sampling: SamplingConfig::train(7),
            val_sampling: SamplingConfig::eval(7),
            sr: SrConfig {
                oversample_count: 8,
                keep_count: 4,
                ..SrConfig::default()
            },
            steps,
            batch_size: 2,
            val_rollouts: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_steps_leave_the_policy_untouched() {
        let mut policy = SoftmaxPolicy::<f64>::new(countdown_vocab(), 2);
        let before = policy.to_checkpoint_json().unwrap();
        let tasks = mini_tasks();
        let trace = train_loop(
            &mut policy,
            &tasks,
            &tasks,
            &mini_config(Strategy::Stochastic, Algo::Grpo, 0),
            |_, _| {},
        )
        .unwrap();
        assert!(trace.is_empty());
        assert_eq!(policy.to_checkpoint_json().unwrap(), before);
    }

    #[test]
    fn zero_learning_rate_freezes_validation_metrics() {
        let mut policy = SoftmaxPolicy::<f64>::new(countdown_vocab(), 2);
        let tasks = mini_tasks();
        let mut cfg = mini_config(Strategy::Stochastic, Algo::Grpo, 3);
        cfg.grpo.learning_rate = 0.0;
        let trace = train_loop(&mut policy, &tasks, &tasks, &cfg, |_, _| {}).unwrap();
        assert_eq!(trace.len(), 3);
        for row in &trace[1..] {
            assert_eq!(row.pass1, trace[0].pass1);
            assert_eq!(row.pass8, trace[0].pass8);
            assert_eq!(row.len1, trace[0].len1);
            assert_eq!(row.len8, trace[0].len8);
        }
    }

    #[test]
    fn training_trace_is_deterministic() {
        let tasks = mini_tasks();
        let cfg = mini_config(Strategy::Latr, Algo::Grpo, 2);
        let run = || {
            let mut policy = SoftmaxPolicy::<f64>::new(countdown_vocab(), 2);
            let trace = train_loop(&mut policy, &tasks, &tasks, &cfg, |_, _| {}).unwrap();
            (trace, policy.to_checkpoint_json().unwrap())
        };
        let (trace_a, ckpt_a) = run();
        let (trace_b, ckpt_b) = run();
        assert_eq!(trace_a, trace_b);
        assert_eq!(ckpt_a, ckpt_b);
    }

    #[test]
    fn tree_training_trace_reports_tree_statistics() {
        let mut policy = SoftmaxPolicy::<f64>::new(countdown_vocab(), 2);
        let tasks = mini_tasks();
        let mut steps_seen = Vec::new();
        let trace = train_loop(
            &mut policy,
            &tasks,
            &tasks,
            &mini_config(Strategy::Latr, Algo::Grpo, 3),
            |step, _| steps_seen.push(step),
        )
        .unwrap();
        assert_eq!(steps_seen, vec![0, 1, 2]);
        assert_eq!(trace.len(), 3);
        for (i, row) in trace.iter().enumerate() {
            assert_eq!(row.step, i);
            assert_eq!(row.algo, Algo::Grpo);
            assert_eq!(row.strategy, Strategy::Latr);
            assert_abs_diff_eq!(row.eta, 0.985f64.powi(i as i32), epsilon = 1e-15);
            assert!(row.fwd_passes > 0.0);
            assert!((0.0..=1.0).contains(&row.pass1));
            assert!(row.pass1 <= row.pass8);
            assert!((0.0..=1.0).contains(&row.branch_ratio));
            assert!(row.distinct_mean >= 1.0);
        }
    }

    #[test]
    fn hybrid_groups_pool_tree_and_plain_rollouts() {
        let policy = SoftmaxPolicy::<f64>::new(countdown_vocab(), 2);
        let mut cfg = mini_config(Strategy::Latr, Algo::Grpo, 1);
        cfg.hybrid = HybridSchedule { eta0: 0.5, gamma: 1.0 };
        let task = CountdownTask::new(vec![2, 3], 5).unwrap();
        let built = build_group(&policy, &task, &cfg, 0).unwrap();
        assert_eq!(built.group.len(), 4);
        built.group.validate().unwrap();
        let plain = built
            .group
            .origins
            .iter()
            .filter(|o| **o == SequenceOrigin::Stochastic)
            .count();
        assert_eq!(plain, 2, "half the budget goes to plain rollouts");
        assert!(built.tree.is_some());
        // Disjoint stream indices: no plain rollout duplicates tree padding.
        let unique: HashSet<&[TokenId]> = built
            .group
            .sequences
            .iter()
            .map(|s| s.tokens.as_slice())
            .collect();
        assert_eq!(unique.len(), built.group.len());
    }

    #[test]
    fn training_aborts_cleanly_when_the_batch_exceeds_the_pool() {
        let mut policy = SoftmaxPolicy::<f64>::new(countdown_vocab(), 2);
        let tasks = mini_tasks();
        let mut cfg = mini_config(Strategy::Stochastic, Algo::Grpo, 2);
        cfg.batch_size = tasks.len() + 1;
        let err = train_loop(&mut policy, &tasks, &tasks, &cfg, |_, _| {}).unwrap_err();
        assert_eq!(err.step, 0);
        assert!(err.partial.is_empty());
        assert!(matches!(err.source, RlError::BatchExceedsPool { .. }));
    }
}
