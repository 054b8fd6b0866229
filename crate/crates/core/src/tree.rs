//! Lookahead tree-based rollouts (LATR).
//!
//! A rollout group is grown as a width-bounded tree instead of k independent
//! chains. Each generation step has two phases:
//!
//! * **branch**: every active branch extends by its argmax token (one
//!   forward pass each). Alternative tokens that are both probable in
//!   absolute terms (`> tau_abs`) and close to the argmax (`gap < tau_rel`)
//!   become branch candidates. Candidates from all branches are pooled,
//!   sorted by descending probability, and instantiated as child branches
//!   until the tree holds `k` non-pruned branches.
//! * **prune**: a child born at step `b` is compared against its parent once
//!   per lookahead window `w` — at step `b + w` the normalized edit distance
//!   between the two segments generated over steps `(b, b + w]` is computed,
//!   and the child (with all its descendants) is removed when the distance
//!   falls below `tau_ed`, i.e. when the fork failed to change the
//!   trajectory.
//!
//! The moment width reaches `k` the tree *saturates*: pending prune checks
//! are cancelled, branching stops for good, and every unfinished branch runs
//! to EOS under plain stochastic sampling. If the loop instead exhausts all
//! `n` steps below width `k`, the group is padded with fresh stochastic
//! rollouts from the prompt. Padding rollout `i` uses the same RNG stream as
//! rollout `i` of [`stochastic_rollout`], so a padded group shares its random
//! draws with the plain-sampling baseline under the same seed.
//!
//! Branching thresholds are evaluated on the raw policy distribution; the
//! sampling configuration only shapes the stochastic continuation and
//! padding. Forward passes are counted where a distribution is queried:
//! branch tokens are free (they reuse the parent's query), so the tree phase
//! plus continuation is bounded by `n·k` passes. Padding passes are tracked
//! separately in [`TreeStats::padding_passes`].

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{ProbVector, TokenId, TokenModel};
use crate::rng::{self, tags};
use crate::sampling::{
    extend_sequence, sample_token, shape_distribution, stochastic_rollout, SamplingConfig,
    Sequence, StopReason,
};
use crate::scalar::Scalar;
use crate::similarity::norm_edit_distance;

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("tau_abs must lie in (0, 1), got {0}")]
    BadTauAbs(f64),
    #[error("tau_rel must lie in (0, 1), got {0}")]
    BadTauRel(f64),
    #[error("tau_ed must lie in [0, 1], got {0}")]
    BadTauEd(f64),
    #[error("windows must be non-empty and strictly ascending")]
    BadWindows,
    #[error("rollout count k must be at least 1")]
    BadK,
    #[error("max completion length n must be at least 1")]
    BadN,
    #[error("variant rate must lie in [0, 1], got {0}")]
    BadRate(f64),
}

/// Thresholds and budgets for tree construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatrConfig {
    /// Minimum absolute probability for a candidate to spawn a branch.
    pub tau_abs: f64,
    /// Maximum probability gap to the argmax for a candidate to qualify.
    pub tau_rel: f64,
    /// Prune a child whose lookahead distance to its parent is below this.
    pub tau_ed: f64,
    /// Lookahead window lengths; a child is checked once per window.
    pub windows: Vec<usize>,
    /// Group size: the tree never holds more than `k` non-pruned branches.
    pub k: usize,
    /// Maximum completion length in tokens.
    pub n: usize,
}

impl Default for LatrConfig {
    fn default() -> Self {
        Self {
            tau_abs: 0.25,
            tau_rel: 0.15,
            tau_ed: 0.4,
            windows: vec![20, 30, 50],
            k: 8,
            n: 24,
        }
    }
}

impl LatrConfig {
    pub fn validate(&self) -> Result<(), TreeError> {
        if !(self.tau_abs > 0.0 && self.tau_abs < 1.0) {
            return Err(TreeError::BadTauAbs(self.tau_abs));
        }
        if !(self.tau_rel > 0.0 && self.tau_rel < 1.0) {
            return Err(TreeError::BadTauRel(self.tau_rel));
        }
        if !(self.tau_ed >= 0.0 && self.tau_ed <= 1.0) {
            return Err(TreeError::BadTauEd(self.tau_ed));
        }
        if self.windows.is_empty() || self.windows.windows(2).any(|w| w[1] <= w[0]) {
            return Err(TreeError::BadWindows);
        }
        if self.windows[0] == 0 {
            return Err(TreeError::BadWindows);
        }
        if self.k < 1 {
            return Err(TreeError::BadK);
        }
        if self.n < 1 {
            return Err(TreeError::BadN);
        }
        Ok(())
    }
}

/// Ablation variants of the rollout tree.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "rate", rename_all = "snake_case")]
pub enum LatrVariant {
    /// The full algorithm: threshold branching and lookahead pruning.
    Full,
    /// Branch by a Bernoulli coin per active branch per step; the child token
    /// is sampled from the shaped distribution with the argmax masked out.
    RandomBranch(f64),
    /// Replace the edit-distance test at each due check with a Bernoulli coin.
    RandomPrune(f64),
    /// Schedule no prune checks at all.
    NoPrune,
}

impl LatrVariant {
    pub fn validate(&self) -> Result<(), TreeError> {
        match *self {
            LatrVariant::RandomBranch(r) | LatrVariant::RandomPrune(r) => {
                if (0.0..=1.0).contains(&r) {
                    Ok(())
                } else {
                    Err(TreeError::BadRate(r))
                }
            }
            _ => Ok(()),
        }
    }
}

/// Branch lifecycle.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchStatus {
    Active,
    /// Reached EOS; takes no further steps but still counts toward width.
    Complete,
    Pruned,
}

/// One path through the rollout tree, prompt excluded.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Branch {
    /// Completion tokens; the token at index `i` was generated at step `i+1`.
    pub tokens: Vec<TokenId>,
    /// In-tree parent; `None` marks the root main line.
    pub parent: Option<usize>,
    /// Step at which the branch was created (0 for the root main line).
    pub birth: usize,
    pub status: BranchStatus,
    /// Absolute steps at which prune checks are still due (strictly
    /// ascending). Cancelled wholesale at saturation.
    pub pending_checks: Vec<usize>,
    /// Running sum of raw-policy log-probabilities of this branch's tokens.
    pub total_logprob: f64,
}

/// Event log entry; the substrate for invariant tests and rollout forensics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeEvent {
    pub step: usize,
    pub event: TreeEventKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub branch_id: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<usize>,
    /// Creation-time candidate probability, on branch events.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probability: Option<f64>,
    /// Failing lookahead distance, on prune events; absent when the branch
    /// was removed because an ancestor was pruned.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distance: Option<f64>,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeEventKind {
    Branch,
    Prune,
    Saturate,
    Eos,
}

/// One evaluated lookahead comparison (full algorithm only).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub branch_id: usize,
    /// Window length `w`; the check ran at step `birth + w`.
    pub window: usize,
    pub due_step: usize,
    pub distance: f64,
    pub passed: bool,
}

/// Where a sequence in a finished group came from.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceOrigin {
    /// A surviving tree branch.
    Latr,
    /// A fresh stochastic rollout appended to reach exactly `k`.
    Padding,
    /// A plain stochastic rollout (used by the hybrid group builder).
    Stochastic,
}

/// Aggregate counters for one finished rollout tree.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TreeStats {
    /// Child branches created.
    pub branch_events: u64,
    /// Tokens produced by the tree machinery (argmax extensions, branch
    /// tokens, stochastic continuation) including those of pruned branches;
    /// padding tokens are excluded.
    pub tokens_generated: u64,
    /// Step at which width first reached `k`, if it ever did.
    pub saturation_step: Option<usize>,
    /// Branches removed by pruning, cascades included.
    pub pruned_count: u64,
    /// Distribution queries spent on the tree phase and continuation;
    /// bounded by `n·k`.
    pub forward_passes: u64,
    /// Distribution queries spent on padding rollouts.
    pub padding_passes: u64,
}

impl TreeStats {
    /// Every distribution query made on behalf of this group.
    pub fn total_passes(&self) -> u64 {
        self.forward_passes + self.padding_passes
    }
}

/// Everything a finished group generation produces.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TreeRollout {
    /// Exactly `k` completions: surviving branches in id order, then padding.
    pub sequences: Vec<Sequence>,
    /// Parallel to `sequences`.
    pub origins: Vec<SequenceOrigin>,
    pub stats: TreeStats,
    pub events: Vec<TreeEvent>,
    /// All lookahead comparisons that were evaluated (full algorithm only).
    pub checks: Vec<CheckRecord>,
    /// Every branch ever created, pruned ones included, in id order. Token
    /// paths and statuses let the events and checks be replayed offline.
    pub branches: Vec<Branch>,
}

/// Tokens `c ≠ c★` with `dist[c] > tau_abs` and `dist[c★] − dist[c] <
/// tau_rel`, sorted by descending probability with ties toward the lower id.
pub fn candidate_set<S: Scalar>(dist: &ProbVector<S>, cfg: &LatrConfig) -> Vec<(TokenId, S)> {
    let argmax = dist.argmax();
    let top = dist.get(argmax);
    let tau_abs = S::from_config(cfg.tau_abs);
    let tau_rel = S::from_config(cfg.tau_rel);
    let mut out: Vec<(TokenId, S)> = dist
        .probs()
        .iter()
        .enumerate()
        .filter(|&(i, &p)| TokenId(i as u32) != argmax && p > tau_abs && top - p < tau_rel)
        .map(|(i, &p)| (TokenId(i as u32), p))
        .collect();
    out.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("probabilities are never NaN")
            .then(a.0 .0.cmp(&b.0 .0))
    });
    out
}

/// A pooled branch candidate awaiting instantiation.
struct PooledCandidate {
    probability: f64,
    parent: usize,
    token: TokenId,
    /// Parent token count before this step's argmax extension.
    prefix_len: usize,
    /// Parent running log-probability before this step's extension.
    prefix_logprob: f64,
}

/// The mutable tree state during group generation.
#[derive(Clone, Debug)]
pub struct RolloutTree {
    prompt: Vec<TokenId>,
    branches: Vec<Branch>,
    width: usize,
    saturated: bool,
    step: usize,
    stats: TreeStats,
    events: Vec<TreeEvent>,
    checks: Vec<CheckRecord>,
}

impl RolloutTree {
    /// A tree holding only the root main line.
    pub fn new(prompt: &[TokenId]) -> Self {
        Self {
            prompt: prompt.to_vec(),
            branches: vec![Branch {
                tokens: Vec::new(),
                parent: None,
                birth: 0,
                status: BranchStatus::Active,
                pending_checks: Vec::new(),
                total_logprob: 0.0,
            }],
            width: 1,
            saturated: false,
            step: 0,
            stats: TreeStats::default(),
            events: Vec::new(),
            checks: Vec::new(),
        }
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    /// Non-pruned branch count.
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn saturated(&self) -> bool {
        self.saturated
    }

    /// Current generation step `l`; branches active since birth hold `step`
    /// tokens.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn forward_passes(&self) -> u64 {
        self.stats.forward_passes
    }

    pub fn events(&self) -> &[TreeEvent] {
        &self.events
    }

    pub fn checks(&self) -> &[CheckRecord] {
        &self.checks
    }

    fn has_active(&self) -> bool {
        self.branches
            .iter()
            .any(|b| b.status == BranchStatus::Active)
    }

    fn emit(&mut self, event: TreeEvent) {
        self.events.push(event);
    }

    fn complete(&mut self, id: usize) {
        self.branches[id].status = BranchStatus::Complete;
        let step = self.step;
        let parent = self.branches[id].parent;
        self.emit(TreeEvent {
            step,
            event: TreeEventKind::Eos,
            branch_id: Some(id),
            parent_id: parent,
            probability: None,
            distance: None,
        });
    }

    fn instantiate(&mut self, parent: usize, token: TokenId, prefix_len: usize, logprob: f64, probability: f64, windows: &[usize], eos: TokenId) {
        let step = self.step;
        let mut tokens = self.branches[parent].tokens[..prefix_len].to_vec();
        tokens.push(token);
        let id = self.branches.len();
        self.branches.push(Branch {
            tokens,
            parent: Some(parent),
            birth: step,
            status: BranchStatus::Active,
            pending_checks: windows.iter().map(|w| step + w).collect(),
            total_logprob: logprob + probability.ln(),
        });
        self.width += 1;
        self.stats.branch_events += 1;
        self.stats.tokens_generated += 1;
        self.emit(TreeEvent {
            step,
            event: TreeEventKind::Branch,
            branch_id: Some(id),
            parent_id: Some(parent),
            probability: Some(probability),
            distance: None,
        });
        if token == eos {
            self.complete(id);
        }
    }

    fn saturate(&mut self) {
        self.saturated = true;
        self.stats.saturation_step = Some(self.step);
        for b in &mut self.branches {
            b.pending_checks.clear();
        }
        let step = self.step;
        self.emit(TreeEvent {
            step,
            event: TreeEventKind::Saturate,
            branch_id: None,
            parent_id: None,
            probability: None,
            distance: None,
        });
    }

    /// Advances the step counter, extends every active branch by its argmax
    /// token, and instantiates pooled candidates until width reaches `k`.
    pub fn branch_step<S: Scalar, M: TokenModel<S>>(
        &mut self,
        model: &M,
        cfg: &LatrConfig,
        sampling: &SamplingConfig,
    ) {
        self.branch_step_impl(model, cfg, sampling, &LatrVariant::Full, None)
    }

    fn branch_step_impl<S: Scalar, M: TokenModel<S>>(
        &mut self,
        model: &M,
        cfg: &LatrConfig,
        sampling: &SamplingConfig,
        variant: &LatrVariant,
        mut branch_rng: Option<&mut rand_chacha::ChaCha8Rng>,
    ) {
        debug_assert!(!self.saturated && self.has_active());
        self.step += 1;
        let eos = model.vocab().eos();
        let mut pooled: Vec<PooledCandidate> = Vec::new();

        let ids: Vec<usize> = (0..self.branches.len())
            .filter(|&i| self.branches[i].status == BranchStatus::Active)
            .collect();
        for id in ids {
            let ctx = model.context_at(&self.prompt, &self.branches[id].tokens);
            let dist = model.next_distribution(&ctx);
            self.stats.forward_passes += 1;
            let argmax = dist.argmax();

            match variant {
                LatrVariant::RandomBranch(rate) => {
                    let rng = branch_rng
                        .as_deref_mut()
                        .expect("random-branch variant carries an RNG stream");
                    if rng.gen::<f64>() < *rate {
                        let mut shaped = shape_distribution(dist.clone(), sampling).into_inner();
                        shaped[argmax.index()] = S::zero();
                        let mass: S = shaped.iter().copied().sum();
                        if mass > S::zero() {
                            for p in shaped.iter_mut() {
                                *p = *p / mass;
                            }
                            let masked = ProbVector::from_normalized(shaped);
                            let token = sample_token(&masked, rng);
                            pooled.push(PooledCandidate {
                                probability: dist.get(token).to_report(),
                                parent: id,
                                token,
                                prefix_len: self.branches[id].tokens.len(),
                                prefix_logprob: self.branches[id].total_logprob,
                            });
                        }
                    }
                }
                _ => {
                    for (token, p) in candidate_set(&dist, cfg) {
                        pooled.push(PooledCandidate {
                            probability: p.to_report(),
                            parent: id,
                            token,
                            prefix_len: self.branches[id].tokens.len(),
                            prefix_logprob: self.branches[id].total_logprob,
                        });
                    }
                }
            }

            let b = &mut self.branches[id];
            b.total_logprob += dist.get(argmax).to_report().ln();
            b.tokens.push(argmax);
            self.stats.tokens_generated += 1;
            if argmax == eos {
                self.complete(id);
            }
        }

        pooled.sort_by(|a, b| {
            b.probability
                .partial_cmp(&a.probability)
                .expect("probabilities are never NaN")
                .then(a.parent.cmp(&b.parent))
                .then(a.token.0.cmp(&b.token.0))
        });
        for cand in pooled {
            if self.width >= cfg.k {
                break;
            }
            let windows: &[usize] = match variant {
                LatrVariant::NoPrune => &[],
                _ => &cfg.windows,
            };
            self.instantiate(
                cand.parent,
                cand.token,
                cand.prefix_len,
                cand.prefix_logprob,
                cand.probability,
                windows,
                eos,
            );
        }
        if self.width >= cfg.k && !self.saturated {
            self.saturate();
        }
    }

    /// Evaluates every lookahead check due at the current step and removes
    /// failing branches together with their descendants.
    pub fn prune_step(&mut self, cfg: &LatrConfig) {
        self.prune_step_impl(cfg, &LatrVariant::Full, None)
    }

    fn prune_step_impl(
        &mut self,
        cfg: &LatrConfig,
        variant: &LatrVariant,
        mut prune_rng: Option<&mut rand_chacha::ChaCha8Rng>,
    ) {
        debug_assert!(!self.saturated);
        if matches!(variant, LatrVariant::NoPrune) {
            return;
        }
        let l = self.step;
        let mut failing: Vec<(usize, f64)> = Vec::new();

        for id in 0..self.branches.len() {
            if self.branches[id].status == BranchStatus::Pruned {
                continue;
            }
            if !self.branches[id].pending_checks.contains(&l) {
                continue;
            }
            let birth = self.branches[id].birth;
            let w = l - birth;
            let mut failed_here: Option<f64> = None;
            match variant {
                LatrVariant::RandomPrune(rate) => {
                    let rng = prune_rng
                        .as_deref_mut()
                        .expect("random-prune variant carries an RNG stream");
                    if rng.gen::<f64>() < *rate {
                        failed_here = Some(f64::NAN);
                    }
                }
                _ => {
                    let parent = self.branches[id]
                        .parent
                        .expect("only branched lines schedule checks");
                    let child_tokens = &self.branches[id].tokens;
                    let parent_tokens = &self.branches[parent].tokens;
                    let child_seg = &child_tokens[birth.min(child_tokens.len())
                        ..(birth + w).min(child_tokens.len())];
                    let parent_seg = &parent_tokens[birth.min(parent_tokens.len())
                        ..(birth + w).min(parent_tokens.len())];
                    // A side that produced no tokens over the window leaves
                    // nothing to compare; the check is dropped, not failed.
                    if !child_seg.is_empty() && !parent_seg.is_empty() {
                        let distance = norm_edit_distance(child_seg, parent_seg)
                            .expect("both segments are non-empty");
                        let passed = distance >= cfg.tau_ed;
                        self.checks.push(CheckRecord {
                            branch_id: id,
                            window: w,
                            due_step: l,
                            distance,
                            passed,
                        });
                        if !passed {
                            failed_here = Some(distance);
                        }
                    }
                }
            }
            self.branches[id].pending_checks.retain(|&due| due != l);
            if let Some(d) = failed_here {
                failing.push((id, d));
            }
        }

        if failing.is_empty() {
            return;
        }
        let failing_ids: Vec<usize> = failing.iter().map(|&(id, _)| id).collect();
        let mut doomed: Vec<(usize, Option<f64>)> = Vec::new();
        for id in 0..self.branches.len() {
            if self.branches[id].status == BranchStatus::Pruned {
                continue;
            }
            if let Some(&(_, d)) = failing.iter().find(|&&(f, _)| f == id) {
                let distance = if d.is_nan() { None } else { Some(d) };
                doomed.push((id, distance));
            } else {
                let mut ancestor = self.branches[id].parent;
                while let Some(a) = ancestor {
                    if failing_ids.contains(&a) || doomed.iter().any(|&(x, _)| x == a) {
                        doomed.push((id, None));
                        break;
                    }
                    ancestor = self.branches[a].parent;
                }
            }
        }
        for (id, distance) in doomed {
            self.branches[id].status = BranchStatus::Pruned;
            self.width -= 1;
            self.stats.pruned_count += 1;
            let parent = self.branches[id].parent;
            self.emit(TreeEvent {
                step: l,
                event: TreeEventKind::Prune,
                branch_id: Some(id),
                parent_id: parent,
                probability: None,
                distance,
            });
        }
    }
}

/// Grows one rollout tree and returns exactly `cfg.k` sequences plus stats.
pub fn latr_rollout<S: Scalar, M: TokenModel<S>>(
    model: &M,
    prompt: &[TokenId],
    cfg: &LatrConfig,
    sampling: &SamplingConfig,
    prompt_tag: u64,
) -> TreeRollout {
    run_tree(model, prompt, cfg, sampling, &LatrVariant::Full, prompt_tag)
}

/// [`latr_rollout`] with one mechanism replaced by an ablation variant.
pub fn latr_variant_rollout<S: Scalar, M: TokenModel<S>>(
    model: &M,
    prompt: &[TokenId],
    cfg: &LatrConfig,
    sampling: &SamplingConfig,
    variant: &LatrVariant,
    prompt_tag: u64,
) -> TreeRollout {
    run_tree(model, prompt, cfg, sampling, variant, prompt_tag)
}

fn run_tree<S: Scalar, M: TokenModel<S>>(
    model: &M,
    prompt: &[TokenId],
    cfg: &LatrConfig,
    sampling: &SamplingConfig,
    variant: &LatrVariant,
    prompt_tag: u64,
) -> TreeRollout {
    let mut tree = RolloutTree::new(prompt);
    let mut branch_rng = match variant {
        LatrVariant::RandomBranch(_) => Some(rng::stream(
            sampling.seed,
            &[tags::RANDOM_BRANCH, prompt_tag],
        )),
        _ => None,
    };
    let mut prune_rng = match variant {
        LatrVariant::RandomPrune(_) => Some(rng::stream(
            sampling.seed,
            &[tags::RANDOM_PRUNE, prompt_tag],
        )),
        _ => None,
    };

    while tree.step < cfg.n && tree.has_active() && !tree.saturated {
        tree.branch_step_impl(model, cfg, sampling, variant, branch_rng.as_mut());
        if tree.saturated {
            break;
        }
        tree.prune_step_impl(cfg, variant, prune_rng.as_mut());
    }

    // Saturated trees finish their unfinished branches by plain sampling.
    if tree.saturated {
        for id in 0..tree.branches.len() {
            if tree.branches[id].status != BranchStatus::Active {
                continue;
            }
            let mut rng = rng::stream(sampling.seed, &[tags::CONTINUATION, prompt_tag, id as u64]);
            let before = tree.branches[id].tokens.len();
            let mut tokens = std::mem::take(&mut tree.branches[id].tokens);
            let mut logprob = tree.branches[id].total_logprob;
            let stop = extend_sequence(
                model,
                prompt,
                &mut tokens,
                &mut logprob,
                cfg.n,
                sampling,
                &mut rng,
                &mut tree.stats.forward_passes,
            );
            tree.stats.tokens_generated += (tokens.len() - before) as u64;
            let b = &mut tree.branches[id];
            b.tokens = tokens;
            b.total_logprob = logprob;
            if stop == StopReason::Eos {
                b.status = BranchStatus::Complete;
            }
        }
    }

    let mut sequences: Vec<Sequence> = Vec::with_capacity(cfg.k);
    let mut origins: Vec<SequenceOrigin> = Vec::with_capacity(cfg.k);
    for b in &tree.branches {
        if b.status == BranchStatus::Pruned {
            continue;
        }
        sequences.push(Sequence {
            tokens: b.tokens.clone(),
            stop: if b.status == BranchStatus::Complete {
                StopReason::Eos
            } else {
                StopReason::MaxLength
            },
            total_logprob: b.total_logprob,
        });
        origins.push(SequenceOrigin::Latr);
    }

    // Short groups are padded with fresh stochastic rollouts whose RNG
    // streams coincide with the plain-sampling baseline's.
    if sequences.len() < cfg.k {
        let pads = cfg.k - sequences.len();
        for seq in stochastic_rollout(model, prompt, pads, cfg.n, sampling, prompt_tag) {
            tree.stats.padding_passes += seq.len() as u64;
            sequences.push(seq);
            origins.push(SequenceOrigin::Padding);
        }
    }
    debug_assert_eq!(sequences.len(), cfg.k);

    TreeRollout {
        sequences,
        origins,
        stats: tree.stats,
        events: tree.events,
        checks: tree.checks,
        branches: tree.branches,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{ContextKey, SoftmaxPolicy, Vocabulary};
    use approx::assert_abs_diff_eq;
    use std::sync::Arc;

    fn vocab(n: usize) -> Arc<Vocabulary> {
        let tokens = (0..n).map(|i| format!("t{i}")).collect();
        Arc::new(Vocabulary::new(tokens, TokenId(n as u32 - 1)).unwrap())
    }

    fn dist(probs: &[f64]) -> ProbVector<f64> {
        ProbVector::new(probs.to_vec()).unwrap()
    }

    fn cfg(windows: &[usize], k: usize, n: usize) -> LatrConfig {
        LatrConfig {
            windows: windows.to_vec(),
            k,
            n,
            ..LatrConfig::default()
        }
    }

    /// Sets a context row to log-probabilities of the given target
    /// distribution, so `next_distribution` reproduces it (up to rounding).
    fn script_row(policy: &mut SoftmaxPolicy<f64>, ctx: &str, probs: &[(u32, f64)]) {
        let key: ContextKey = ctx.parse().unwrap();
        let row = policy.logit_row_mut(&key);
        for x in row.iter_mut() {
            *x = -30.0; // ~1e-14 relative mass
        }
        for &(id, p) in probs {
            row[id as usize] = p.ln();
        }
    }

    #[test]
    fn candidate_set_matches_threshold_rules() {
        let cfg = LatrConfig::default();
        // {A:0.5, B:0.4, C:0.08, pad:0.02} -> only B qualifies.
        let cands = candidate_set(&dist(&[0.5, 0.4, 0.08, 0.02]), &cfg);
        assert_eq!(cands.len(), 1);
        assert_eq!(cands[0].0, TokenId(1));
        assert_abs_diff_eq!(cands[0].1, 0.4);

        // One-hot: nothing qualifies.
        assert!(candidate_set(&dist(&[0.0, 1.0, 0.0]), &cfg).is_empty());

        // Near-tie: both others qualify, ordered by probability then id.
        let cands = candidate_set(&dist(&[0.34, 0.33, 0.33]), &cfg);
        assert_eq!(
            cands.iter().map(|c| c.0).collect::<Vec<_>>(),
            vec![TokenId(1), TokenId(2)]
        );
    }

    #[test]
    fn candidate_set_requires_both_conditions() {
        let cfg = LatrConfig::default();
        // 0.3 > tau_abs but gap 0.4 >= tau_rel.
        assert!(candidate_set(&dist(&[0.7, 0.3]), &cfg).is_empty());
        // gap small but below tau_abs.
        assert!(candidate_set(&dist(&[0.26, 0.24, 0.5]), &cfg).is_empty());
    }

    /// A policy whose every context splits mass between tokens 0 and 1, so
    /// each active branch offers exactly one qualifying candidate per step.
    fn doubling_policy(v: usize) -> SoftmaxPolicy<f64> {
        let mut policy = SoftmaxPolicy::new(vocab(v), 1);
        let mut ctxs: Vec<String> = vec!["^".into()];
        ctxs.extend((0..v as u32 - 1).map(|i| i.to_string()));
        for ctx in ctxs {
            script_row(&mut policy, &ctx, &[(0, 0.5), (1, 0.5 - 1e-9)]);
        }
        policy
    }

    #[test]
    fn doubling_policy_saturates_in_three_steps() {
        let policy = doubling_policy(4);
        let cfg = cfg(&[20], 8, 12);
        let out = latr_rollout(&policy, &[TokenId(2)], &cfg, &SamplingConfig::train(1), 0);
        assert_eq!(out.sequences.len(), 8);
        assert_eq!(out.stats.saturation_step, Some(3), "1 -> 2 -> 4 -> 8");
        assert_eq!(out.stats.branch_events, 7);
        assert_eq!(out.stats.pruned_count, 0);
        assert!(out.origins.iter().all(|&o| o == SequenceOrigin::Latr));
        // No branch or prune events past saturation.
        let sat = out.stats.saturation_step.unwrap();
        assert!(out
            .events
            .iter()
            .filter(|e| matches!(e.event, TreeEventKind::Branch | TreeEventKind::Prune))
            .all(|e| e.step <= sat));
        assert!(out.stats.forward_passes <= (cfg.n * cfg.k) as u64);
        // Saturation cancelled the step-1/2/3 children's checks: nothing
        // was ever compared even though every child shadows its parent.
        assert!(out.checks.is_empty());
    }

    #[test]
    fn tokens_generated_equals_passes_plus_branch_events() {
        let policy = doubling_policy(4);
        let cfg = cfg(&[3], 8, 10);
        let out = latr_rollout(&policy, &[TokenId(2)], &cfg, &SamplingConfig::train(1), 0);
        assert_eq!(
            out.stats.tokens_generated,
            out.stats.forward_passes + out.stats.branch_events
        );
    }

    /// One-hot chain 0 -> 1 -> 2 -> eos.
    fn one_hot_policy() -> SoftmaxPolicy<f64> {
        let mut policy = SoftmaxPolicy::new(vocab(4), 1);
        script_row(&mut policy, "^", &[(0, 1.0 - 3e-9)]);
        script_row(&mut policy, "0", &[(1, 1.0 - 3e-9)]);
        script_row(&mut policy, "1", &[(2, 1.0 - 3e-9)]);
        script_row(&mut policy, "2", &[(3, 1.0 - 3e-9)]);
        policy
    }

    #[test]
    fn one_hot_policy_never_branches_and_pads() {
        let policy = one_hot_policy();
        let cfg = cfg(&[5], 8, 16);
        let sampling = SamplingConfig::train(7);
        let out = latr_rollout(&policy, &[], &cfg, &sampling, 3);
        assert_eq!(out.sequences.len(), 8);
        assert_eq!(out.stats.saturation_step, None);
        assert_eq!(out.stats.branch_events, 0);
        assert_eq!(out.origins[0], SequenceOrigin::Latr);
        assert!(out.origins[1..]
            .iter()
            .all(|&o| o == SequenceOrigin::Padding));
        let main = &out.sequences[0];
        assert_eq!(
            main.tokens,
            vec![TokenId(0), TokenId(1), TokenId(2), TokenId(3)]
        );
        // Near-one-hot: the padded rollouts follow the same chain.
        for seq in &out.sequences[1..] {
            assert_eq!(seq.tokens, main.tokens);
        }
        // Tree spent one pass per main-line token; padding tracked apart.
        assert_eq!(out.stats.forward_passes, 4);
        assert_eq!(out.stats.padding_passes, 7 * 4);

        // Padding shares RNG streams with the plain-sampling baseline.
        let baseline = stochastic_rollout(&policy, &[], 7, cfg.n, &sampling, 3);
        assert_eq!(&out.sequences[1..], &baseline[..]);
    }

    /// Step 1 forks token 1 off the main line; afterwards every line follows
    /// the same one-hot chain 2 -> 2 -> ..., so the fork never diverges.
    fn shadowing_policy() -> SoftmaxPolicy<f64> {
        let mut policy = SoftmaxPolicy::new(vocab(5), 1);
        script_row(&mut policy, "^", &[(0, 0.5), (1, 0.45)]);
        script_row(&mut policy, "0", &[(2, 1.0 - 4e-9)]);
        script_row(&mut policy, "1", &[(2, 1.0 - 4e-9)]);
        script_row(&mut policy, "2", &[(2, 1.0 - 4e-9)]);
        policy
    }

    #[test]
    fn shadowing_child_is_pruned_at_first_window() {
        let policy = shadowing_policy();
        let cfg = cfg(&[4, 6], 8, 12);
        let out = latr_rollout(&policy, &[], &cfg, &SamplingConfig::train(5), 0);
        // Child born at step 1; checked at step 5 over tokens 2..5 of both
        // lines, which are identical runs of token 2 -> distance 0.
        assert_eq!(out.stats.branch_events, 1);
        assert_eq!(out.stats.pruned_count, 1);
        assert_eq!(out.checks.len(), 1);
        let check = &out.checks[0];
        assert_eq!((check.branch_id, check.window, check.due_step), (1, 4, 5));
        assert_eq!(check.distance, 0.0);
        assert!(!check.passed);
        let prune = out
            .events
            .iter()
            .find(|e| e.event == TreeEventKind::Prune)
            .unwrap();
        assert_eq!(prune.step, 5);
        assert_eq!(prune.branch_id, Some(1));
        assert_eq!(prune.distance, Some(0.0));
        // Survivor: the main line; the rest is padding.
        assert_eq!(out.sequences.len(), 8);
        assert_eq!(out.origins[0], SequenceOrigin::Latr);
        assert_eq!(
            out.origins.iter().filter(|&&o| o == SequenceOrigin::Padding).count(),
            7
        );
    }

    /// Like the shadowing policy, but the fork walks a disjoint token chain.
    fn diverging_policy() -> SoftmaxPolicy<f64> {
        let mut policy = SoftmaxPolicy::new(vocab(6), 1);
        script_row(&mut policy, "^", &[(0, 0.5), (1, 0.45)]);
        script_row(&mut policy, "0", &[(2, 1.0 - 5e-9)]);
        script_row(&mut policy, "2", &[(2, 1.0 - 5e-9)]);
        script_row(&mut policy, "1", &[(3, 1.0 - 5e-9)]);
        script_row(&mut policy, "3", &[(3, 1.0 - 5e-9)]);
        policy
    }

    #[test]
    fn diverging_child_survives_every_window() {
        let policy = diverging_policy();
        let cfg = cfg(&[4, 6], 8, 12);
        let out = latr_rollout(&policy, &[], &cfg, &SamplingConfig::train(5), 0);
        assert_eq!(out.stats.pruned_count, 0);
        assert_eq!(out.checks.len(), 2, "windows 4 and 6 both evaluated");
        for check in &out.checks {
            assert_eq!(check.distance, 1.0);
            assert!(check.passed);
        }
        let tree_lines = out
            .origins
            .iter()
            .filter(|&&o| o == SequenceOrigin::Latr)
            .count();
        assert_eq!(tree_lines, 2);
    }

    /// Root forks A at step 1; A forks B at step 2; A shadows the root while
    /// B diverges, so pruning A must cascade into B.
    fn cascade_policy() -> SoftmaxPolicy<f64> {
        let mut policy = SoftmaxPolicy::new(vocab(6), 1);
        script_row(&mut policy, "^", &[(0, 0.5), (1, 0.45)]);
        script_row(&mut policy, "0", &[(2, 1.0 - 5e-9)]);
        script_row(&mut policy, "1", &[(2, 0.5), (3, 0.45)]);
        script_row(&mut policy, "2", &[(2, 1.0 - 5e-9)]);
        script_row(&mut policy, "3", &[(3, 1.0 - 5e-9)]);
        policy
    }

    #[test]
    fn pruning_cascades_through_descendants() {
        let policy = cascade_policy();
        let cfg = cfg(&[3], 8, 12);
        let out = latr_rollout(&policy, &[], &cfg, &SamplingConfig::train(5), 0);
        // Branch 1 (A, born step 1) is checked at step 4: its tokens over
        // steps 2..4 are [2,2,2], identical to the root's -> pruned; B (id 2,
        // born step 2 from A) dies with it before its own step-5 check.
        assert_eq!(out.stats.branch_events, 2);
        assert_eq!(out.stats.pruned_count, 2);
        let prunes: Vec<&TreeEvent> = out
            .events
            .iter()
            .filter(|e| e.event == TreeEventKind::Prune)
            .collect();
        assert_eq!(prunes.len(), 2);
        assert_eq!(prunes[0].branch_id, Some(1));
        assert_eq!(prunes[0].step, 4);
        assert!(prunes[0].distance.is_some());
        assert_eq!(prunes[1].branch_id, Some(2));
        assert_eq!(prunes[1].step, 4);
        assert_eq!(prunes[1].distance, None, "cascade removal, no own check");
        assert_eq!(out.checks.len(), 1);
    }

    #[test]
    fn no_prune_skips_checks_entirely() {
        let policy = shadowing_policy();
        let cfg = cfg(&[2], 8, 10);
        let out = latr_variant_rollout(
            &policy,
            &[],
            &cfg,
            &SamplingConfig::train(5),
            &LatrVariant::NoPrune,
            0,
        );
        assert_eq!(out.stats.pruned_count, 0);
        assert!(out.checks.is_empty());
        // The shadowing child survives to the end.
        assert_eq!(
            out.origins
                .iter()
                .filter(|&&o| o == SequenceOrigin::Latr)
                .count(),
            2
        );
    }

    #[test]
    fn random_prune_rate_zero_matches_no_prune() {
        let policy = doubling_policy(5);
        let cfg = cfg(&[2, 4], 6, 14);
        let sampling = SamplingConfig::train(11);
        let a = latr_variant_rollout(
            &policy,
            &[TokenId(2)],
            &cfg,
            &sampling,
            &LatrVariant::RandomPrune(0.0),
            4,
        );
        let b = latr_variant_rollout(
            &policy,
            &[TokenId(2)],
            &cfg,
            &sampling,
            &LatrVariant::NoPrune,
            4,
        );
        assert_eq!(a.sequences, b.sequences);
        assert_eq!(a.stats, b.stats);
    }

    #[test]
    fn random_prune_rate_one_removes_every_checked_branch() {
        let policy = doubling_policy(5);
        // Budget wide enough that the tree is still unsaturated when the
        // step-3 checks come due.
        let wide = cfg(&[2], 16, 3);
        let out = latr_variant_rollout(
            &policy,
            &[TokenId(2)],
            &wide,
            &SamplingConfig::train(11),
            &LatrVariant::RandomPrune(1.0),
            0,
        );
        // Children born at step 1 are all removed at step 3.
        assert!(out.stats.pruned_count >= 1);
        let prune_steps: Vec<usize> = out
            .events
            .iter()
            .filter(|e| e.event == TreeEventKind::Prune)
            .map(|e| e.step)
            .collect();
        assert!(prune_steps.iter().all(|&s| s == 3));
    }

    #[test]
    fn random_branch_rate_zero_matches_single_line_with_padding() {
        let policy = doubling_policy(5);
        let cfg = cfg(&[20], 8, 10);
        let sampling = SamplingConfig::train(13);
        let out = latr_variant_rollout(
            &policy,
            &[TokenId(2)],
            &cfg,
            &sampling,
            &LatrVariant::RandomBranch(0.0),
            6,
        );
        assert_eq!(out.stats.branch_events, 0);
        assert_eq!(out.stats.saturation_step, None);
        let baseline = stochastic_rollout(&policy, &[TokenId(2)], 7, cfg.n, &sampling, 6);
        assert_eq!(&out.sequences[1..], &baseline[..]);
    }

    #[test]
    fn random_branch_child_token_differs_from_argmax() {
        let mut policy = SoftmaxPolicy::new(vocab(6), 1);
        // Flat-ish rows so the masked sample has real choices.
        for ctx in ["^", "0", "1", "2", "3", "4"] {
            script_row(
                &mut policy,
                ctx,
                &[(0, 0.4), (1, 0.2), (2, 0.2), (3, 0.15), (4, 0.05)],
            );
        }
        let cfg = cfg(&[20], 8, 6);
        let out = latr_variant_rollout(
            &policy,
            &[TokenId(0)],
            &cfg,
            &SamplingConfig::train(17),
            &LatrVariant::RandomBranch(1.0),
            0,
        );
        assert!(out.stats.branch_events > 0);
        // No pruning here (window 20 > n), so sequence order equals branch
        // id order and each child's birth-step token is inspectable. Every
        // scripted row has argmax token 0, which the variant must mask out.
        for e in out.events.iter().filter(|e| e.event == TreeEventKind::Branch) {
            let child = e.branch_id.unwrap();
            let birth_token = out.sequences[child].tokens[e.step - 1];
            assert_ne!(birth_token, TokenId(0), "argmax is masked out");
        }
    }

    #[test]
    fn candidate_pooling_is_global_descending_probability() {
        let mut policy = SoftmaxPolicy::new(vocab(8), 1);
        // Step 1: root (ctx "^") forks token 1. Every row sums to one so the
        // softmax reproduces the scripted probabilities exactly.
        script_row(&mut policy, "^", &[(0, 0.52), (1, 0.44), (7, 0.04)]);
        // Step 2: root (ctx "0") offers candidates at 0.33 and 0.30; the
        // fork (ctx "1") offers 0.35 and 0.28. Budget is one slot (k=3), so
        // only the global maximum 0.35 is instantiated.
        script_row(&mut policy, "0", &[(2, 0.34), (3, 0.33), (4, 0.30), (7, 0.03)]);
        script_row(&mut policy, "1", &[(5, 0.36), (6, 0.35), (3, 0.28), (7, 0.01)]);
        let cfg = cfg(&[20], 3, 4);
        let out = latr_rollout(&policy, &[], &cfg, &SamplingConfig::train(1), 0);
        assert_eq!(out.stats.saturation_step, Some(2));
        let branches: Vec<&TreeEvent> = out
            .events
            .iter()
            .filter(|e| e.event == TreeEventKind::Branch)
            .collect();
        assert_eq!(branches.len(), 2);
        assert_eq!(branches[1].step, 2);
        assert_eq!(branches[1].parent_id, Some(1), "the fork won the slot");
        assert_abs_diff_eq!(branches[1].probability.unwrap(), 0.35, epsilon = 1e-6);
        // The winning child extends the fork's prefix [1] with token 6.
        assert_eq!(out.sequences[2].tokens[0], TokenId(1));
        assert_eq!(out.sequences[2].tokens[1], TokenId(6));
    }

    #[test]
    fn eos_branch_completes_and_counts_toward_width() {
        let mut policy = SoftmaxPolicy::new(vocab(4), 1);
        // Root forks directly into EOS (id 3): the child is one token long.
        script_row(&mut policy, "^", &[(0, 0.5), (3, 0.45)]);
        script_row(&mut policy, "0", &[(0, 1.0 - 4e-9)]);
        let cfg = cfg(&[2], 2, 6);
        let out = latr_rollout(&policy, &[], &cfg, &SamplingConfig::train(3), 0);
        assert_eq!(out.stats.saturation_step, Some(1), "width 2 == k at step 1");
        assert_eq!(out.sequences.len(), 2);
        let child = &out.sequences[1];
        assert_eq!(child.tokens, vec![TokenId(3)]);
        assert_eq!(child.stop, StopReason::Eos);
        let eos_events = out
            .events
            .iter()
            .filter(|e| e.event == TreeEventKind::Eos)
            .count();
        assert_eq!(eos_events, 1);
    }

    #[test]
    fn rollouts_are_bit_deterministic() {
        let policy: SoftmaxPolicy<f64> = SoftmaxPolicy::new(vocab(12), 2);
        let cfg = cfg(&[3, 5], 6, 20);
        let sampling = SamplingConfig::eval(99);
        let a = latr_rollout(&policy, &[TokenId(4), TokenId(2)], &cfg, &sampling, 1);
        let b = latr_rollout(&policy, &[TokenId(4), TokenId(2)], &cfg, &sampling, 1);
        assert_eq!(a.sequences, b.sequences);
        assert_eq!(a.stats, b.stats);
        assert_eq!(a.events, b.events);
        assert_eq!(
            serde_json::to_string(&a.checks).unwrap(),
            serde_json::to_string(&b.checks).unwrap()
        );
    }

    #[test]
    fn k_equals_one_is_a_pure_argmax_line() {
        let policy = one_hot_policy();
        let cfg = cfg(&[2], 1, 6);
        let out = latr_rollout(&policy, &[TokenId(0)], &cfg, &SamplingConfig::train(1), 0);
        assert_eq!(out.sequences.len(), 1);
        assert_eq!(out.stats.branch_events, 0);
        assert_eq!(out.stats.padding_passes, 0);
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let mut c = LatrConfig::default();
        c.tau_abs = 1.5;
        assert!(c.validate().is_err());
        let mut c = LatrConfig::default();
        c.windows = vec![20, 20];
        assert!(c.validate().is_err());
        let mut c = LatrConfig::default();
        c.windows = vec![];
        assert!(c.validate().is_err());
        let mut c = LatrConfig::default();
        c.k = 0;
        assert!(c.validate().is_err());
        assert!(LatrConfig::default().validate().is_ok());
        assert!(LatrVariant::RandomBranch(1.1).validate().is_err());
        assert!(LatrVariant::RandomPrune(0.5).validate().is_ok());
    }

    #[test]
    fn randomized_rollouts_respect_global_invariants() {
        // A miniature version of the acceptance sweep: random logit tables,
        // then every structural invariant re-checked from the outputs.
        for seed in 0..20u64 {
            let mut policy = SoftmaxPolicy::new(vocab(8), 1);
            let mut r = rng::stream(seed, &[0xbead]);
            let ctxs: Vec<String> = std::iter::once("^".to_string())
                .chain((0..8u32).map(|i| i.to_string()))
                .collect();
            for ctx in &ctxs {
                let key: ContextKey = ctx.parse().unwrap();
                let row = policy.logit_row_mut(&key);
                for x in row.iter_mut() {
                    *x = rand::Rng::gen_range(&mut r, -2.0..2.0);
                }
            }
            let cfg = cfg(&[2, 4], 4, 12);
            let sampling = SamplingConfig::train(seed);
            let out = latr_rollout(&policy, &[TokenId(0)], &cfg, &sampling, seed);
            assert_eq!(out.sequences.len(), 4);
            assert!(out.stats.forward_passes <= (cfg.n * cfg.k) as u64);
            assert_eq!(
                out.stats.tokens_generated,
                out.stats.forward_passes + out.stats.branch_events
            );
            for seq in &out.sequences {
                assert!(!seq.is_empty());
                assert!(seq.len() <= cfg.n);
                if seq.stop == StopReason::Eos {
                    assert_eq!(*seq.tokens.last().unwrap(), TokenId(7));
                }
            }
            if let Some(sat) = out.stats.saturation_step {
                assert!(out
                    .events
                    .iter()
                    .filter(|e| {
                        matches!(e.event, TreeEventKind::Branch | TreeEventKind::Prune)
                    })
                    .all(|e| e.step <= sat));
            }
        }
    }
}
