//! Tabular softmax token policy.
//!
//! The policy is a sparse table mapping a fixed-width context window (the last
//! `m` tokens of prompt ⊕ partial completion, left-padded with a begin marker)
//! to a row of logits over the vocabulary. Unseen contexts read as a zero row,
//! i.e. the uniform distribution, so an untrained policy is maximally
//! entropic. Rows are materialized only when gradients touch them; reads never
//! allocate table entries.
//!
//! The interesting math lives in three places:
//!
//! - [`SoftmaxPolicy::next_distribution`] / [`SoftmaxPolicy::token_logprob`]:
//!   max-shifted softmax and log-softmax over a row,
//! - [`SoftmaxPolicy::logprob_grad`]: ∂ log π(t|ctx) / ∂ logits = indicator(t) − π(·|ctx),
//! - [`SoftmaxPolicy::kl_to`]: exact categorical KL against a snapshot.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// Index into a [`Vocabulary`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("vocabulary needs at least two tokens, got {0}")]
    VocabTooSmall(usize),
    #[error("duplicate surface string {0:?} in vocabulary")]
    DuplicateSurface(String),
    #[error("eos id {eos} out of range for vocabulary of size {size}")]
    EosOutOfRange { eos: u32, size: usize },
    #[error("probability vector invalid: {0}")]
    BadDistribution(String),
    #[error("context window length {got} does not match context order {expected}")]
    BadContextWidth { expected: usize, got: usize },
    #[error("policies disagree on vocabulary size ({0} vs {1})")]
    VocabMismatch(usize, usize),
    #[error("malformed context key {0:?}")]
    BadContextKey(String),
    #[error("checkpoint row for {key:?} has {got} entries, expected {expected}")]
    BadRowWidth { key: String, expected: usize, got: usize },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint encoding: {0}")]
    Json(#[from] serde_json::Error),
}

/// Ordered list of surface strings plus a distinguished end-of-sequence id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    eos: TokenId,
    by_surface: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>, eos: TokenId) -> Result<Self, PolicyError> {
        if tokens.len() < 2 {
            return Err(PolicyError::VocabTooSmall(tokens.len()));
        }
        if eos.index() >= tokens.len() {
            return Err(PolicyError::EosOutOfRange {
                eos: eos.0,
                size: tokens.len(),
            });
        }
        let mut by_surface = HashMap::with_capacity(tokens.len());
        for (i, surface) in tokens.iter().enumerate() {
            if by_surface
                .insert(surface.clone(), TokenId(i as u32))
                .is_some()
            {
                return Err(PolicyError::DuplicateSurface(surface.clone()));
            }
        }
        Ok(Self {
            tokens,
            eos,
            by_surface,
        })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn surface(&self, id: TokenId) -> &str {
        &self.tokens[id.index()]
    }

    pub fn id_of(&self, surface: &str) -> Option<TokenId> {
        self.by_surface.get(surface).copied()
    }

    /// Renders token ids as space-joined surface strings.
    pub fn decode(&self, tokens: &[TokenId]) -> String {
        let mut out = String::new();
        for (i, t) in tokens.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(self.surface(*t));
        }
        out
    }

    /// Tokenizes a space-separated surface string; unknown words are errors.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, PolicyError> {
        text.split_whitespace()
            .map(|w| {
                self.id_of(w)
                    .ok_or_else(|| PolicyError::BadContextKey(w.to_string()))
            })
            .collect()
    }
}

/// One slot of a context window: either a real token or the begin marker that
/// pads positions before the start of the prompt.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, PartialOrd, Ord)]
pub enum ContextToken {
    Begin,
    Token(TokenId),
}

/// The conditioning window for one policy query: exactly `m` context tokens.
#[derive(Clone, PartialEq, Eq, Hash, Debug, PartialOrd, Ord)]
pub struct ContextKey(Vec<ContextToken>);

impl ContextKey {
    /// Builds the window for the position right after `prompt ⊕ completion`.
    ///
    /// Takes the last `m` tokens of the concatenation without materializing
    /// it; missing leading positions become [`ContextToken::Begin`].
    pub fn from_parts(prompt: &[TokenId], completion: &[TokenId], m: usize) -> Self {
        let total = prompt.len() + completion.len();
        let mut window = Vec::with_capacity(m);
        for pos in total.saturating_sub(m)..total {
            let tok = if pos < prompt.len() {
                prompt[pos]
            } else {
                completion[pos - prompt.len()]
            };
            window.push(ContextToken::Token(tok));
        }
        let pad = m - window.len();
        if pad > 0 {
            let mut padded = vec![ContextToken::Begin; pad];
            padded.extend(window);
            window = padded;
        }
        ContextKey(window)
    }

    pub fn width(&self) -> usize {
        self.0.len()
    }

    pub fn slots(&self) -> &[ContextToken] {
        &self.0
    }
}

const BEGIN_MARK: &str = "^";

/// Checkpoint key form: begin marker `^`, token ids in decimal, comma-joined.
impl fmt::Display for ContextKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, slot) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            match slot {
                ContextToken::Begin => f.write_str(BEGIN_MARK)?,
                ContextToken::Token(t) => write!(f, "{}", t.0)?,
            }
        }
        Ok(())
    }
}

impl FromStr for ContextKey {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.is_empty() {
            return Err(PolicyError::BadContextKey(s.to_string()));
        }
        let mut window = Vec::new();
        for part in s.split(',') {
            if part == BEGIN_MARK {
                window.push(ContextToken::Begin);
            } else {
                let id: u32 = part
                    .parse()
                    .map_err(|_| PolicyError::BadContextKey(s.to_string()))?;
                window.push(ContextToken::Token(TokenId(id)));
            }
        }
        Ok(ContextKey(window))
    }
}

/// A categorical distribution over the vocabulary: entries non-negative and
/// summing to one within 1e-9.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVector<S>(Vec<S>);

impl<S: Scalar> ProbVector<S> {
    pub fn new(probs: Vec<S>) -> Result<Self, PolicyError> {
        if probs.is_empty() {
            return Err(PolicyError::BadDistribution("empty".into()));
        }
        let mut sum = 0.0f64;
        for (i, &p) in probs.iter().enumerate() {
            let p = p.to_report();
            if !(p >= 0.0) {
                return Err(PolicyError::BadDistribution(format!(
                    "entry {i} is {p}, expected non-negative"
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(PolicyError::BadDistribution(format!(
                "entries sum to {sum}, expected 1 within 1e-9"
            )));
        }
        Ok(Self(probs))
    }

    /// Constructor for internally normalized outputs (softmax, shaping).
    pub(crate) fn from_normalized(probs: Vec<S>) -> Self {
        debug_assert!(
            {
                let sum: f64 = probs.iter().map(|p| p.to_report()).sum();
                (sum - 1.0).abs() <= 1e-9 && probs.iter().all(|p| *p >= S::zero())
            },
            "internal distribution must already be normalized"
        );
        Self(probs)
    }

    pub fn probs(&self) -> &[S] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, t: TokenId) -> S {
        self.0[t.index()]
    }

    /// Highest-probability token; ties break toward the lowest id.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0usize;
        for i in 1..self.0.len() {
            if self.0[i] > self.0[best] {
                best = i;
            }
        }
        TokenId(best as u32)
    }

    pub fn into_inner(self) -> Vec<S> {
        self.0
    }
}

/// Which role a policy object is playing inside a training step.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyRole {
    Current,
    Old,
    Reference,
}

/// Anything a rollout engine can query for a next-token distribution.
///
/// Implemented by [`SoftmaxPolicy`]; tests use it for scripted policies and
/// query-counting shims.
pub trait TokenModel<S: Scalar> {
    fn vocab(&self) -> &Vocabulary;
    fn context_order(&self) -> usize;
    fn next_distribution(&self, ctx: &ContextKey) -> ProbVector<S>;

    fn context_at(&self, prompt: &[TokenId], completion: &[TokenId]) -> ContextKey {
        ContextKey::from_parts(prompt, completion, self.context_order())
    }
}

/// Sparse logit table with softmax readout.
#[derive(Clone, Debug)]
pub struct SoftmaxPolicy<S> {
    vocab: Arc<Vocabulary>,
    context_order: usize,
    logits: HashMap<ContextKey, Vec<S>>,
    role: PolicyRole,
}

impl<S: Scalar> SoftmaxPolicy<S> {
    pub fn new(vocab: Arc<Vocabulary>, context_order: usize) -> Self {
        assert!(context_order >= 1, "context order must be at least 1");
        Self {
            vocab,
            context_order,
            logits: HashMap::new(),
            role: PolicyRole::Current,
        }
    }

    pub fn vocab_arc(&self) -> Arc<Vocabulary> {
        Arc::clone(&self.vocab)
    }

    pub fn role(&self) -> PolicyRole {
        self.role
    }

    pub fn visited_contexts(&self) -> usize {
        self.logits.len()
    }

    /// Deep copy with a new role; the snapshot never aliases live rows.
    pub fn snapshot(&self, role: PolicyRole) -> Self {
        let mut copy = self.clone();
        copy.role = role;
        copy
    }

    /// The stored logit row, if the context has ever been written.
    pub fn logit_row(&self, ctx: &ContextKey) -> Option<&[S]> {
        self.logits.get(ctx).map(Vec::as_slice)
    }

    /// Mutable row access, materializing a zero row on first write.
    pub fn logit_row_mut(&mut self, ctx: &ContextKey) -> &mut Vec<S> {
        let v = self.vocab.size();
        self.logits
            .entry(ctx.clone())
            .or_insert_with(|| vec![S::zero(); v])
    }

    fn check_ctx(&self, ctx: &ContextKey) {
        debug_assert_eq!(
            ctx.width(),
            self.context_order,
            "context width must equal the policy's context order"
        );
    }

    /// Log-softmax of the row (zero row for unseen contexts).
    pub fn log_distribution(&self, ctx: &ContextKey) -> Vec<S> {
        self.check_ctx(ctx);
        match self.logits.get(ctx) {
            Some(row) => log_softmax(row),
            None => {
                let v = self.vocab.size();
                let lp = -S::from_config(v as f64).ln();
                vec![lp; v]
            }
        }
    }

    /// Softmax of the row. Unseen contexts give exactly `1/V` per entry.
    pub fn next_distribution(&self, ctx: &ContextKey) -> ProbVector<S> {
        self.check_ctx(ctx);
        match self.logits.get(ctx) {
            Some(row) => ProbVector::from_normalized(softmax(row)),
            None => {
                let v = self.vocab.size();
                let p = S::one() / S::from_config(v as f64);
                ProbVector::from_normalized(vec![p; v])
            }
        }
    }

    /// `ln π(token | ctx)`, numerically consistent with
    /// [`Self::next_distribution`] (`exp` of it matches within 1e-12).
    pub fn token_logprob(&self, ctx: &ContextKey, token: TokenId) -> S {
        self.check_ctx(ctx);
        match self.logits.get(ctx) {
            Some(row) => {
                let max = row_max(row);
                let mut sum = S::zero();
                for &x in row {
                    sum = sum + (x - max).exp();
                }
                row[token.index()] - max - sum.ln()
            }
            None => -S::from_config(self.vocab.size() as f64).ln(),
        }
    }

    /// Gradient of `ln π(token | ctx)` with respect to the context's logit
    /// row: `indicator(token) − π(·|ctx)`. Entries sum to zero.
    pub fn logprob_grad(&self, ctx: &ContextKey, token: TokenId) -> Vec<S> {
        let dist = self.next_distribution(ctx);
        let mut grad: Vec<S> = dist.into_inner().into_iter().map(|p| -p).collect();
        grad[token.index()] = grad[token.index()] + S::one();
        grad
    }

    /// Exact categorical KL divergence `KL(π_self(·|ctx) ‖ π_other(·|ctx))`.
    ///
    /// Zero (exactly) when both rows induce identical distributions.
    pub fn kl_to(&self, other: &Self, ctx: &ContextKey) -> Result<S, PolicyError> {
        if self.vocab.size() != other.vocab.size() {
            return Err(PolicyError::VocabMismatch(
                self.vocab.size(),
                other.vocab.size(),
            ));
        }
        let p = self.next_distribution(ctx);
        let lp = self.log_distribution(ctx);
        let lq = other.log_distribution(ctx);
        let mut kl = S::zero();
        for i in 0..lp.len() {
            let pi = p.probs()[i];
            if pi > S::zero() {
                kl = kl + pi * (lp[i] - lq[i]);
            }
        }
        Ok(kl)
    }

    /// Gradient ascent update: every row named in `grads` gains
    /// `scale · grad_row`, materializing zero rows as needed.
    pub fn apply_gradient(&mut self, grads: &LogitGrads<S>, scale: S) {
        for (ctx, g) in &grads.rows {
            let row = self.logit_row_mut(ctx);
            debug_assert_eq!(row.len(), g.len());
            for (w, &dg) in row.iter_mut().zip(g) {
                *w = *w + scale * dg;
            }
        }
    }

    /// Serializes the logit table as a flat JSON map, keys sorted, values in
    /// shortest round-trip decimal form. Loading the output reproduces the
    /// table bit for bit.
    pub fn to_checkpoint_json(&self) -> Result<String, PolicyError> {
        let map: BTreeMap<String, &Vec<S>> = self
            .logits
            .iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let mut out = serde_json::to_string_pretty(&map)?;
        out.push('\n');
        Ok(out)
    }

    pub fn from_checkpoint_json(
        json: &str,
        vocab: Arc<Vocabulary>,
        context_order: usize,
        role: PolicyRole,
    ) -> Result<Self, PolicyError> {
        let map: BTreeMap<String, Vec<S>> = serde_json::from_str(json)?;
        let mut logits = HashMap::with_capacity(map.len());
        for (key, row) in map {
            let ctx: ContextKey = key.parse()?;
            if ctx.width() != context_order {
                return Err(PolicyError::BadContextWidth {
                    expected: context_order,
                    got: ctx.width(),
                });
            }
            if row.len() != vocab.size() {
                return Err(PolicyError::BadRowWidth {
                    key,
                    expected: vocab.size(),
                    got: row.len(),
                });
            }
            logits.insert(ctx, row);
        }
        Ok(Self {
            vocab,
            context_order,
            logits,
            role,
        })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), PolicyError> {
        std::fs::write(path, self.to_checkpoint_json()?)?;
        Ok(())
    }

    pub fn load_checkpoint(
        path: &Path,
        vocab: Arc<Vocabulary>,
        context_order: usize,
        role: PolicyRole,
    ) -> Result<Self, PolicyError> {
        let json = std::fs::read_to_string(path)?;
        Self::from_checkpoint_json(&json, vocab, context_order, role)
    }
}

impl<S: Scalar> TokenModel<S> for SoftmaxPolicy<S> {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn context_order(&self) -> usize {
        self.context_order
    }

    fn next_distribution(&self, ctx: &ContextKey) -> ProbVector<S> {
        SoftmaxPolicy::next_distribution(self, ctx)
    }
}

/// Accumulator of per-row gradients over the logit table.
#[derive(Clone, Debug, Default)]
pub struct LogitGrads<S> {
    rows: HashMap<ContextKey, Vec<S>>,
}

impl<S: Scalar> LogitGrads<S> {
    pub fn new() -> Self {
        Self {
            rows: HashMap::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row_count(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, ctx: &ContextKey) -> Option<&[S]> {
        self.rows.get(ctx).map(Vec::as_slice)
    }

    /// Adds `weight · delta` into the row for `ctx`.
    pub fn accumulate(&mut self, ctx: &ContextKey, delta: &[S], weight: S) {
        let row = self
            .rows
            .entry(ctx.clone())
            .or_insert_with(|| vec![S::zero(); delta.len()]);
        debug_assert_eq!(row.len(), delta.len());
        for (r, &d) in row.iter_mut().zip(delta) {
            *r = *r + weight * d;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ContextKey, &[S])> {
        self.rows.iter().map(|(k, v)| (k, v.as_slice()))
    }
}

fn row_max<S: Scalar>(row: &[S]) -> S {
    let mut max = row[0];
    for &x in &row[1..] {
        if x > max {
            max = x;
        }
    }
    max
}

/// Max-shifted softmax.
pub fn softmax<S: Scalar>(row: &[S]) -> Vec<S> {
    let max = row_max(row);
    let mut out: Vec<S> = row.iter().map(|&x| (x - max).exp()).collect();
    let sum: S = out.iter().copied().sum();
    for p in &mut out {
        *p = *p / sum;
    }
    out
}

/// Max-shifted log-softmax.
pub fn log_softmax<S: Scalar>(row: &[S]) -> Vec<S> {
    let max = row_max(row);
    let mut sum = S::zero();
    for &x in row {
        sum = sum + (x - max).exp();
    }
    let log_z = sum.ln();
    row.iter().map(|&x| x - max - log_z).collect()
}
