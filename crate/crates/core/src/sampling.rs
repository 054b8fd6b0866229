//! Distribution shaping and the non-tree rollout strategies.
//!
//! [`shape_distribution`] applies the standard decode-time transforms in a
//! fixed order — temperature on log-probabilities, top-k mask, top-p
//! (nucleus) mask — renormalizing after each stage that actually fires. The
//! identity configuration (temperature 1, unlimited top-k, top-p 1) returns
//! its input bit for bit.
//!
//! [`stochastic_rollout`] draws independent sequences by inverse-CDF sampling
//! from the shaped distribution, one deterministic RNG stream per rollout.
//! [`sr_rollout`] oversamples and then greedily keeps a maximally diverse
//! subset (max-min distance), the select-for-diversity baseline.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{ProbVector, TokenId, TokenModel};
use crate::rng::{self, tags};
use crate::scalar::Scalar;
use crate::similarity::{SimilarityError, SimilarityMetric};

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error("top_p must lie in (0, 1], got {0}")]
    BadTopP(f64),
    #[error("top_k must be a positive count or the unlimited sentinel -1, got {0}")]
    BadTopK(i64),
    #[error("keep_count {keep} exceeds oversample_count {oversample}")]
    BadSrCounts { keep: usize, oversample: usize },
    #[error("select-for-diversity needs at least one sequence to keep")]
    EmptyKeep,
    #[error("similarity failure during diversity selection: {0}")]
    Similarity(#[from] SimilarityError),
}

/// Top-k truncation: a positive limit or unlimited. Serializes as an integer
/// with `-1` meaning unlimited, matching the config file format.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum TopK {
    Unlimited,
    Limit(usize),
}

impl TopK {
    pub fn from_sentinel(raw: i64) -> Result<Self, SamplingError> {
        match raw {
            -1 => Ok(TopK::Unlimited),
            k if k >= 1 => Ok(TopK::Limit(k as usize)),
            other => Err(SamplingError::BadTopK(other)),
        }
    }

    pub fn to_sentinel(self) -> i64 {
        match self {
            TopK::Unlimited => -1,
            TopK::Limit(k) => k as i64,
        }
    }
}

impl Serialize for TopK {
    fn serialize<Ser: serde::Serializer>(&self, s: Ser) -> Result<Ser::Ok, Ser::Error> {
        s.serialize_i64(self.to_sentinel())
    }
}

impl<'de> Deserialize<'de> for TopK {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = i64::deserialize(d)?;
        TopK::from_sentinel(raw).map_err(serde::de::Error::custom)
    }
}

/// Decode-time sampling parameters plus the base seed for stream derivation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    /// Softens (> 1) or sharpens (< 1) the distribution; applied to log-probs.
    pub temperature: f64,
    /// Keep only the k most probable tokens (`-1` in config files: unlimited).
    pub top_k: TopK,
    /// Keep the smallest descending-probability prefix with mass ≥ top_p.
    pub top_p: f64,
    /// Base seed; rollout streams derive from `(seed, prompt tag, index)`.
    pub seed: u64,
}

impl SamplingConfig {
    /// Training-time profile: untransformed sampling.
    pub fn train(seed: u64) -> Self {
        Self {
            temperature: 1.0,
            top_k: TopK::Unlimited,
            top_p: 1.0,
            seed,
        }
    }

    /// Evaluation profile: temperature 0.6, top-k 20, top-p 0.95.
    pub fn eval(seed: u64) -> Self {
        Self {
            temperature: 0.6,
            top_k: TopK::Limit(20),
            top_p: 0.95,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SamplingError> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(SamplingError::BadTemperature(self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(SamplingError::BadTopP(self.top_p));
        }
        if let TopK::Limit(0) = self.top_k {
            return Err(SamplingError::BadTopK(0));
        }
        Ok(())
    }

    fn is_identity(&self) -> bool {
        self.temperature == 1.0 && self.top_k == TopK::Unlimited && self.top_p >= 1.0
    }
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self::train(0)
    }
}

/// Why a sequence stopped growing.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Eos,
    MaxLength,
}

/// One completion (prompt excluded).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    pub tokens: Vec<TokenId>,
    pub stop: StopReason,
    /// Sum of `ln π(token | ctx)` under the generating policy's *raw*
    /// distribution (not the shaped sampling distribution).
    pub total_logprob: f64,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn renormalize<S: Scalar>(probs: &mut [S]) {
    let sum: S = probs.iter().copied().sum();
    for p in probs.iter_mut() {
        *p = *p / sum;
    }
}

/// Ids sorted by descending probability, ties toward the lower id.
fn descending_order<S: Scalar>(probs: &[S]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .expect("probabilities are never NaN")
            .then(a.cmp(&b))
    });
    idx
}

/// Applies temperature, top-k and top-p in that order.
///
/// Stages that are identities (temperature 1, unlimited k, top-p ≥ 1) are
/// skipped outright, so the all-identity configuration returns the input
/// unchanged. At least one token always survives: the masks keep descending-
/// probability prefixes of length ≥ 1.
pub fn shape_distribution<S: Scalar>(dist: ProbVector<S>, cfg: &SamplingConfig) -> ProbVector<S> {
    if cfg.is_identity() {
        return dist;
    }
    let mut probs = dist.into_inner();

    if cfg.temperature != 1.0 {
        let inv_t = S::from_config(1.0 / cfg.temperature);
        for p in probs.iter_mut() {
            if *p > S::zero() {
                *p = (p.ln() * inv_t).exp();
            }
        }
        renormalize(&mut probs);
    }

    if let TopK::Limit(k) = cfg.top_k {
        if k < probs.len() {
            let order = descending_order(&probs);
            for &i in &order[k..] {
                probs[i] = S::zero();
            }
            renormalize(&mut probs);
        }
    }

    if cfg.top_p < 1.0 {
        let order = descending_order(&probs);
        let target = S::from_config(cfg.top_p);
        let mut cumulative = S::zero();
        let mut cut = order.len();
        for (rank, &i) in order.iter().enumerate() {
            cumulative = cumulative + probs[i];
            if cumulative >= target {
                cut = rank + 1;
                break;
            }
        }
        for &i in &order[cut..] {
            probs[i] = S::zero();
        }
        renormalize(&mut probs);
    }

    ProbVector::from_normalized(probs)
}

/// Inverse-CDF draw from a distribution.
pub fn sample_token<S: Scalar, R: rand::Rng>(dist: &ProbVector<S>, rng: &mut R) -> TokenId {
    let u: f64 = rng.gen();
    let mut cumulative = 0.0f64;
    let mut last_live = 0usize;
    for (i, &p) in dist.probs().iter().enumerate() {
        let p = p.to_report();
        if p > 0.0 {
            last_live = i;
            cumulative += p;
            if u < cumulative {
                return TokenId(i as u32);
            }
        }
    }
    // Rounding can leave the total a hair under 1; fall back to the last
    // token with mass.
    TokenId(last_live as u32)
}

/// Extends a partial completion by shaped sampling until EOS or `max_len`
/// total tokens. `total_logprob` accumulates raw-policy log-probabilities of
/// the newly drawn tokens; one forward pass is counted per token.
pub(crate) fn extend_sequence<S: Scalar, M: TokenModel<S>, R: rand::Rng>(
    model: &M,
    prompt: &[TokenId],
    tokens: &mut Vec<TokenId>,
    total_logprob: &mut f64,
    max_len: usize,
    cfg: &SamplingConfig,
    rng: &mut R,
    forward_passes: &mut u64,
) -> StopReason {
    let eos = model.vocab().eos();
    while tokens.len() < max_len {
        let ctx = model.context_at(prompt, tokens);
        let dist = model.next_distribution(&ctx);
        *forward_passes += 1;
        let token = sample_token(&shape_distribution(dist.clone(), cfg), rng);
        *total_logprob += dist.get(token).to_report().ln();
        tokens.push(token);
        if token == eos {
            return StopReason::Eos;
        }
    }
    StopReason::MaxLength
}

/// Samples a single completion from `prompt` until EOS or `max_len` tokens.
pub(crate) fn sample_sequence<S: Scalar, M: TokenModel<S>, R: rand::Rng>(
    model: &M,
    prompt: &[TokenId],
    max_len: usize,
    cfg: &SamplingConfig,
    rng: &mut R,
    forward_passes: &mut u64,
) -> Sequence {
    let mut tokens: Vec<TokenId> = Vec::new();
    let mut total_logprob = 0.0f64;
    let stop = extend_sequence(
        model,
        prompt,
        &mut tokens,
        &mut total_logprob,
        max_len,
        cfg,
        rng,
        forward_passes,
    );
    Sequence {
        tokens,
        stop,
        total_logprob,
    }
}

/// Draws `k` independent completions of at most `n` tokens.
///
/// Rollout `i` owns the RNG stream `(cfg.seed, prompt_tag, i)`, so group
/// membership never perturbs individual draws and one forward pass is spent
/// per generated token.
pub fn stochastic_rollout<S: Scalar, M: TokenModel<S>>(
    model: &M,
    prompt: &[TokenId],
    k: usize,
    n: usize,
    cfg: &SamplingConfig,
    prompt_tag: u64,
) -> Vec<Sequence> {
    stochastic_rollout_from(model, prompt, 0, k, n, cfg, prompt_tag)
}

/// [`stochastic_rollout`] with stream indices starting at `first` instead of
/// zero. The hybrid group builder uses this to keep its plain rollouts on
/// streams disjoint from the ones tree padding may have consumed.
pub(crate) fn stochastic_rollout_from<S: Scalar, M: TokenModel<S>>(
    model: &M,
    prompt: &[TokenId],
    first: usize,
    count: usize,
    n: usize,
    cfg: &SamplingConfig,
    prompt_tag: u64,
) -> Vec<Sequence> {
    (first..first + count)
        .map(|i| {
            let mut rng = rng::stream(cfg.seed, &[tags::STOCHASTIC, prompt_tag, i as u64]);
            let mut passes = 0u64;
            let seq = sample_sequence(model, prompt, n, cfg, &mut rng, &mut passes);
            debug_assert_eq!(passes, seq.len() as u64);
            seq
        })
        .collect()
}

/// Oversample-then-select configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SrConfig {
    /// Pool size drawn before selection.
    pub oversample_count: usize,
    /// Sequences kept after max-min selection.
    pub keep_count: usize,
    /// Pairwise similarity used for selection distances.
    pub metric: SimilarityMetric,
}

impl Default for SrConfig {
    fn default() -> Self {
        Self {
            oversample_count: 16,
            keep_count: 8,
            metric: SimilarityMetric::BleuRougeAvg,
        }
    }
}

impl SrConfig {
    pub fn validate(&self) -> Result<(), SamplingError> {
        if self.keep_count == 0 {
            return Err(SamplingError::EmptyKeep);
        }
        if self.keep_count > self.oversample_count {
            return Err(SamplingError::BadSrCounts {
                keep: self.keep_count,
                oversample: self.oversample_count,
            });
        }
        Ok(())
    }
}

/// Greedy max-min-distance subset selection over a pool.
///
/// Seeds with the least similar pair (ties: lexicographically smallest index
/// pair), then repeatedly adds the candidate whose minimum distance to the
/// kept set is largest (ties: lowest pool index). Returns kept indices in
/// ascending pool order.
pub fn select_diverse(
    pool: &[Vec<TokenId>],
    keep: usize,
    metric: SimilarityMetric,
) -> Result<Vec<usize>, SamplingError> {
    if keep == 0 {
        return Err(SamplingError::EmptyKeep);
    }
    if keep >= pool.len() {
        return Ok((0..pool.len()).collect());
    }
    let m = pool.len();
    let mut distance = vec![vec![0.0f64; m]; m];
    for i in 0..m {
        for j in (i + 1)..m {
            let d = metric.distance(&pool[i], &pool[j])?;
            distance[i][j] = d;
            distance[j][i] = d;
        }
    }

    let mut selected: Vec<usize> = Vec::with_capacity(keep);
    if keep == 1 {
        selected.push(0);
    } else {
        let (mut bi, mut bj, mut best) = (0usize, 1usize, f64::NEG_INFINITY);
        for i in 0..m {
            for j in (i + 1)..m {
                if distance[i][j] > best {
                    best = distance[i][j];
                    bi = i;
                    bj = j;
                }
            }
        }
        selected.push(bi);
        selected.push(bj);
    }

    while selected.len() < keep {
        let (mut pick, mut best) = (usize::MAX, f64::NEG_INFINITY);
        for c in 0..m {
            if selected.contains(&c) {
                continue;
            }
            let min_d = selected
                .iter()
                .map(|&s| distance[c][s])
                .fold(f64::INFINITY, f64::min);
            if min_d > best {
                best = min_d;
                pick = c;
            }
        }
        selected.push(pick);
    }
    selected.sort_unstable();
    Ok(selected)
}

/// Oversamples `oversample_count` stochastic rollouts and keeps the
/// `keep_count` most mutually distant ones.
pub fn sr_rollout<S: Scalar, M: TokenModel<S>>(
    model: &M,
    prompt: &[TokenId],
    n: usize,
    sr: &SrConfig,
    cfg: &SamplingConfig,
    prompt_tag: u64,
) -> Result<Vec<Sequence>, SamplingError> {
    sr.validate()?;
    let pool = stochastic_rollout(model, prompt, sr.oversample_count, n, cfg, prompt_tag);
    let token_pool: Vec<Vec<TokenId>> = pool.iter().map(|s| s.tokens.clone()).collect();
    let kept = select_diverse(&token_pool, sr.keep_count, sr.metric)?;
    Ok(kept.into_iter().map(|i| pool[i].clone()).collect())
}
