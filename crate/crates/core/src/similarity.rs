//! Sequence similarity and divergence metrics over token ids.
//!
//! Pruning in the rollout tree and the select-for-diversity baseline both
//! reduce to "how alike are these two token sequences". Four metrics cover
//! the crate's needs:
//!
//! - [`norm_edit_distance`]: Levenshtein distance normalized by the longer
//!   length (a *distance*, 1 = unrelated, 0 = identical),
//! - [`rouge_l_sim`]: longest-common-subsequence length over the longer length,
//! - [`suffix_match_sim`]: longest suffix of `a` occurring contiguously in `b`,
//!   over `|a|`,
//! - [`bleu_sim`]: sentence-level BLEU of candidate `a` against reference `b`
//!   (orders 1..=4, uniform weights, add-one smoothing on orders ≥ 2, brevity
//!   penalty `min(1, e^(1 − |b|/|a|))`).
//!
//! All functions work on any `PartialEq` token type and return plain `f64`
//! ratios in `[0, 1]`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimilarityError {
    #[error("similarity of two empty sequences is undefined")]
    BothEmpty,
    #[error("metric is undefined for an empty {0} sequence")]
    EmptySide(&'static str),
}

/// Levenshtein (insert/delete/substitute, unit costs) distance.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr = vec![0usize; b.len() + 1];
    for (i, ai) in a.iter().enumerate() {
        curr[0] = i + 1;
        for (j, bj) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ai != bj);
            curr[j + 1] = sub.min(prev[j + 1] + 1).min(curr[j] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// Levenshtein distance divided by `max(|a|, |b|)`.
///
/// Symmetric; 0 exactly for identical sequences, 1.0 when one side is empty.
/// Errors when both sides are empty.
pub fn norm_edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> Result<f64, SimilarityError> {
    let denom = a.len().max(b.len());
    if denom == 0 {
        return Err(SimilarityError::BothEmpty);
    }
    Ok(levenshtein(a, b) as f64 / denom as f64)
}

/// Longest-common-subsequence length.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut curr = vec![0usize; b.len() + 1];
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            curr[j + 1] = if ai == bj {
                prev[j] + 1
            } else {
                prev[j + 1].max(curr[j])
            };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// ROUGE-L similarity: `LCS(a, b) / max(|a|, |b|)`.
///
/// Symmetric; 1.0 for identical sequences, 0.0 when exactly one side is
/// empty. Errors when both are empty.
pub fn rouge_l_sim<T: PartialEq>(a: &[T], b: &[T]) -> Result<f64, SimilarityError> {
    let denom = a.len().max(b.len());
    if denom == 0 {
        return Err(SimilarityError::BothEmpty);
    }
    Ok(lcs_len(a, b) as f64 / denom as f64)
}

/// Length of the longest suffix of `a` that occurs contiguously in `b`,
/// divided by `|a|`. Asymmetric by construction. Errors when `a` is empty.
pub fn suffix_match_sim<T: PartialEq>(a: &[T], b: &[T]) -> Result<f64, SimilarityError> {
    if a.is_empty() {
        return Err(SimilarityError::EmptySide("first"));
    }
    let max_len = a.len().min(b.len());
    for len in (1..=max_len).rev() {
        let suffix = &a[a.len() - len..];
        if b.windows(len).any(|w| w == suffix) {
            return Ok(len as f64 / a.len() as f64);
        }
    }
    Ok(0.0)
}

/// Sentence-level BLEU of candidate `a` against reference `b`.
///
/// Uses n-gram orders 1..=4 with uniform weights, restricted to orders the
/// candidate is long enough to populate. Unigram precision is unsmoothed, so
/// token-disjoint sequences score exactly 0; higher orders get add-one
/// smoothing to keep a single missing n-gram from zeroing the score.
/// Errors when the candidate is empty (the brevity penalty is undefined).
pub fn bleu_sim<T: PartialEq>(a: &[T], b: &[T]) -> Result<f64, SimilarityError> {
    if a.is_empty() {
        return Err(SimilarityError::EmptySide("candidate"));
    }
    let mut log_sum = 0.0f64;
    let mut orders = 0usize;
    for n in 1..=4usize {
        if a.len() < n {
            break;
        }
        let total = a.len() - n + 1;
        let matches = clipped_matches(a, b, n);
        let precision = if n == 1 {
            matches as f64 / total as f64
        } else {
            (matches + 1) as f64 / (total + 1) as f64
        };
        if precision == 0.0 {
            return Ok(0.0);
        }
        log_sum += precision.ln();
        orders += 1;
    }
    let geo_mean = (log_sum / orders as f64).exp();
    let brevity = (1.0 - b.len() as f64 / a.len() as f64).exp().min(1.0);
    Ok(geo_mean * brevity)
}

/// Count of candidate n-grams present in the reference, clipped per distinct
/// n-gram by the reference's occurrence count.
fn clipped_matches<T: PartialEq>(a: &[T], b: &[T], n: usize) -> usize {
    if b.len() < n {
        return 0;
    }
    let cand: Vec<&[T]> = a.windows(n).collect();
    let refs: Vec<&[T]> = b.windows(n).collect();
    let mut matched = 0usize;
    let mut used = vec![false; refs.len()];
    for gram in cand {
        if let Some(slot) = refs
            .iter()
            .enumerate()
            .position(|(j, r)| !used[j] && *r == gram)
        {
            used[slot] = true;
            matched += 1;
        }
    }
    matched
}

/// Which similarity notion a component should use.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMetric {
    /// Normalized edit distance (the pruning default).
    Edit,
    /// ROUGE-L similarity.
    RougeL,
    /// Suffix containment of the first sequence in the second.
    Suffix,
    /// Mean of symmetrized sentence BLEU and ROUGE-L (the diversity
    /// selection metric).
    BleuRougeAvg,
}

impl SimilarityMetric {
    /// Divergence in `[0, 1]`: higher means less alike.
    pub fn distance<T: PartialEq>(self, a: &[T], b: &[T]) -> Result<f64, SimilarityError> {
        Ok(match self {
            SimilarityMetric::Edit => norm_edit_distance(a, b)?,
            _ => 1.0 - self.similarity(a, b)?,
        })
    }

    /// Similarity in `[0, 1]`: higher means more alike.
    pub fn similarity<T: PartialEq>(self, a: &[T], b: &[T]) -> Result<f64, SimilarityError> {
        Ok(match self {
            SimilarityMetric::Edit => 1.0 - norm_edit_distance(a, b)?,
            SimilarityMetric::RougeL => rouge_l_sim(a, b)?,
            SimilarityMetric::Suffix => suffix_match_sim(a, b)?,
            SimilarityMetric::BleuRougeAvg => {
                let bleu = 0.5 * (bleu_sim(a, b)? + bleu_sim(b, a)?);
                0.5 * (bleu + rouge_l_sim(a, b)?)
            }
        })
    }
}

impl std::str::FromStr for SimilarityMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "edit" => Ok(Self::Edit),
            "rouge_l" => Ok(Self::RougeL),
            "suffix" => Ok(Self::Suffix),
            "bleu_rouge_avg" => Ok(Self::BleuRougeAvg),
            other => Err(format!(
                "unknown similarity metric {other:?} (expected edit | rouge_l | suffix | bleu_rouge_avg)"
            )),
        }
    }
}
