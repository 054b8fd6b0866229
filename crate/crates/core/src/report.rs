//! Evaluation metrics and deterministic report emission.
//!
//! The aggregation helpers are small and separately testable:
//! [`pass_at_k`] (solve rates), [`length_stats`] (completion lengths),
//! [`rollout_stats`] (tree behavior), and [`diversity_stats`] (semantic and
//! surface variety within groups). [`evaluate_policy`] runs a full
//! validation pass — a fixed number of plain rollouts per task on dedicated
//! RNG streams, so results depend only on the policy, the tasks and the
//! sampling settings, never on training-side state.
//!
//! Emitters render byte-identical output for equal inputs: CSV columns are
//! fixed, rows follow input order, and numbers go through [`fmt_sig`], which
//! avoids platform-dependent math-library calls. JSON uses serde's shortest
//! round-trip float form.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::countdown::{distinct_answers, reward, CountdownTask};
use crate::policy::{TokenId, TokenModel};
use crate::rl::TraceRow;
use crate::rng::{self, tags};
use crate::sampling::{sample_sequence, SamplingConfig, Sequence};
use crate::scalar::Scalar;
use crate::similarity::{norm_edit_distance, SimilarityError};
use crate::tree::TreeStats;

/// Errors from metric aggregation or report emission.
#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no data to aggregate")]
    Empty,
    #[error("group {index} is empty")]
    EmptyGroup { index: usize },
    #[error("rollouts per task must be at least 1")]
    ZeroRollouts,
    #[error("unknown report format {0:?} (expected csv or json)")]
    UnknownFormat(String),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error("writing {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("serializing report: {0}")]
    Json(#[from] serde_json::Error),
}

/// Solve rates from per-task correctness flags (one inner row per task).
///
/// Returns `(pass@1, pass@k)`: the fraction of individually correct
/// completions, and the fraction of tasks with at least one correct
/// completion.
pub fn pass_at_k(flags: &[Vec<bool>]) -> Result<(f64, f64), ReportError> {
    if flags.is_empty() {
        return Err(ReportError::Empty);
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut solved = 0usize;
    for (index, row) in flags.iter().enumerate() {
        if row.is_empty() {
            return Err(ReportError::EmptyGroup { index });
        }
        correct += row.iter().filter(|&&c| c).count();
        total += row.len();
        solved += usize::from(row.iter().any(|&c| c));
    }
    Ok((
        correct as f64 / total as f64,
        solved as f64 / flags.len() as f64,
    ))
}

/// Length statistics from per-task completion lengths.
///
/// Returns `(len@1, len@k)`: the mean length over every completion, and the
/// mean over tasks of the longest completion in the task's group.
pub fn length_stats(lengths: &[Vec<usize>]) -> Result<(f64, f64), ReportError> {
    if lengths.is_empty() {
        return Err(ReportError::Empty);
    }
    let mut sum = 0usize;
    let mut count = 0usize;
    let mut max_sum = 0usize;
    for (index, row) in lengths.iter().enumerate() {
        if row.is_empty() {
            return Err(ReportError::EmptyGroup { index });
        }
        sum += row.iter().sum::<usize>();
        count += row.len();
        max_sum += row.iter().copied().max().unwrap();
    }
    Ok((
        sum as f64 / count as f64,
        max_sum as f64 / lengths.len() as f64,
    ))
}

/// Aggregate tree behavior over a set of rollout trees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutStats {
    /// Branch events per generated token, pooled over all trees.
    pub branching_ratio: f64,
    /// Mean saturation step over the trees that saturated; `None` when none
    /// did.
    pub saturation_length_mean: Option<f64>,
    /// How many trees reached their full width.
    pub saturated: usize,
    /// How many trees never saturated (excluded from the saturation mean).
    pub unsaturated: usize,
    /// Mean distribution queries per tree, padding included.
    pub forward_passes_mean: f64,
}

/// Pools [`TreeStats`] from many rollout trees into one summary.
pub fn rollout_stats(stats: &[TreeStats]) -> Result<RolloutStats, ReportError> {
    if stats.is_empty() {
        return Err(ReportError::Empty);
    }
    let branch_events: u64 = stats.iter().map(|s| s.branch_events).sum();
    let tokens: u64 = stats.iter().map(|s| s.tokens_generated).sum();
    let branching_ratio = if tokens == 0 {
        0.0
    } else {
        branch_events as f64 / tokens as f64
    };
    let saturation_steps: Vec<u64> = stats
        .iter()
        .filter_map(|s| s.saturation_step.map(|l| l as u64))
        .collect();
    let saturated = saturation_steps.len();
    let saturation_length_mean = if saturated == 0 {
        None
    } else {
        Some(saturation_steps.iter().sum::<u64>() as f64 / saturated as f64)
    };
    let passes: u64 = stats.iter().map(TreeStats::total_passes).sum();
    Ok(RolloutStats {
        branching_ratio,
        saturation_length_mean,
        saturated,
        unsaturated: stats.len() - saturated,
        forward_passes_mean: passes as f64 / stats.len() as f64,
    })
}

/// Diversity within completion groups.
///
/// Returns `(distinct_mean, pairwise_mean)`: the mean number of semantically
/// distinct final answers per group (see
/// [`distinct_answers`](crate::countdown::distinct_answers)), and the mean
/// normalized edit distance over unordered completion pairs, averaged over
/// the groups that have at least two members (0 when no group does).
pub fn diversity_stats<T: AsRef<[TokenId]>>(
    groups: &[Vec<T>],
) -> Result<(f64, f64), ReportError> {
    if groups.is_empty() {
        return Err(ReportError::Empty);
    }
    let mut distinct_sum = 0.0;
    let mut pair_sum = 0.0;
    let mut pair_groups = 0usize;
    for (index, group) in groups.iter().enumerate() {
        if group.is_empty() {
            return Err(ReportError::EmptyGroup { index });
        }
        distinct_sum += distinct_answers(group) as f64;
        if group.len() >= 2 {
            let mut total = 0.0;
            let mut pairs = 0usize;
            for i in 0..group.len() {
                for j in (i + 1)..group.len() {
                    total += norm_edit_distance(group[i].as_ref(), group[j].as_ref())?;
                    pairs += 1;
                }
            }
            pair_sum += total / pairs as f64;
            pair_groups += 1;
        }
    }
    let pairwise = if pair_groups == 0 {
        0.0
    } else {
        pair_sum / pair_groups as f64
    };
    Ok((distinct_sum / groups.len() as f64, pairwise))
}

/// Per-task line of an evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    /// The decoded prompt, e.g. `"2 3 : 5"`.
    pub task: String,
    pub pass1: f64,
    pub pass8: f64,
    pub len1: f64,
    pub len8: f64,
    pub distinct: usize,
    pub pairwise: f64,
}

/// Full evaluation report: aggregates plus one row per task.
///
/// Every task gets the same number of rollouts, so each aggregate is the
/// plain mean of its per-task column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pass1: f64,
    pub pass8: f64,
    pub len1: f64,
    pub len8: f64,
    pub distinct_answers_mean: f64,
    pub mean_pairwise_distance: f64,
    pub per_task_rows: Vec<TaskRow>,
}

/// Scores a policy on a task list with `rollouts` plain samples per task.
///
/// Rollout `i` for a task draws from the RNG stream
/// `(cfg.seed, VALIDATION, task_tag, i)` — a namespace no training-side
/// stream touches, so evaluation is reproducible given the policy, tasks and
/// sampling settings alone.
pub fn evaluate_policy<S: Scalar, M: TokenModel<S>>(
    model: &M,
    tasks: &[CountdownTask],
    rollouts: usize,
    max_len: usize,
    cfg: &SamplingConfig,
) -> Result<EvalReport, ReportError> {
    if tasks.is_empty() {
        return Err(ReportError::Empty);
    }
    if rollouts == 0 {
        return Err(ReportError::ZeroRollouts);
    }
    let mut rows = Vec::with_capacity(tasks.len());
    for task in tasks {
        let prompt = task.prompt_tokens();
        let sequences: Vec<Sequence> = (0..rollouts)
            .map(|i| {
                let mut rng = rng::stream(
                    cfg.seed,
                    &[tags::VALIDATION, task.stream_tag(), i as u64],
                );
                let mut passes = 0u64;
                sample_sequence(model, prompt, max_len, cfg, &mut rng, &mut passes)
            })
            .collect();

        let flags: Vec<bool> = sequences
            .iter()
            .map(|s| reward(task, &s.tokens).correctness)
            .collect();
        let lengths: Vec<usize> = sequences.iter().map(Sequence::len).collect();
        let views: Vec<&[TokenId]> = sequences.iter().map(|s| s.tokens.as_slice()).collect();
        let group = vec![views];
        let (pass1, pass8) = pass_at_k(&[flags])?;
        let (len1, len8) = length_stats(&[lengths])?;
        let (distinct, pairwise) = diversity_stats(&group)?;
        rows.push(TaskRow {
            task: model.vocab().decode(prompt),
            pass1,
            pass8,
            len1,
            len8,
            distinct: distinct as usize,
            pairwise,
        });
    }

    let n = rows.len() as f64;
    let mean = |f: fn(&TaskRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    Ok(EvalReport {
        pass1: mean(|r| r.pass1),
        pass8: mean(|r| r.pass8),
        len1: mean(|r| r.len1),
        len8: mean(|r| r.len8),
        distinct_answers_mean: mean(|r| r.distinct as f64),
        mean_pairwise_distance: mean(|r| r.pairwise),
        per_task_rows: rows,
    })
}

/// Renders a float with six significant digits in plain decimal form.
///
/// Implemented with exact power-of-ten comparisons and IEEE multiplies
/// instead of `log10`, whose last-bit rounding varies across math libraries;
/// equal inputs therefore render identically on every platform. Values with
/// seven or more integer digits keep all of them.
pub fn fmt_sig(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let a = x.abs();
    let decimals = if a >= 1.0 {
        let mut int_digits = 1usize;
        let mut bound = 10.0f64;
        while a >= bound && int_digits < 17 {
            bound *= 10.0;
            int_digits += 1;
        }
        6usize.saturating_sub(int_digits)
    } else {
        let mut lead = 0usize;
        let mut u = a;
        while u < 0.1 && lead < 300 {
            u *= 10.0;
            lead += 1;
        }
        6 + lead
    };
    format!("{x:.decimals$}")
}

/// Output encoding for reports and traces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self, ReportError> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(ReportError::UnknownFormat(other.to_string())),
        }
    }
}

/// Header of the evaluation CSV, one row per task.
pub const EVAL_CSV_HEADER: &str = "task,pass1,pass8,len1,len8,distinct,pairwise";

/// Header of the training-trace CSV, one row per step.
pub const TRACE_CSV_HEADER: &str = "step,algo,strategy,mean_reward,pass1,pass8,len1,len8,\
                                    distinct_mean,pairwise_dist,branch_ratio,sat_len,\
                                    fwd_passes,eta";

/// Per-task CSV rendering of an evaluation report (aggregates live in the
/// JSON form).
pub fn eval_report_csv(report: &EvalReport) -> String {
    let mut out = String::from(EVAL_CSV_HEADER);
    out.push('\n');
    for row in &report.per_task_rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.task,
            fmt_sig(row.pass1),
            fmt_sig(row.pass8),
            fmt_sig(row.len1),
            fmt_sig(row.len8),
            row.distinct,
            fmt_sig(row.pairwise),
        ));
    }
    out
}

pub fn eval_report_json(report: &EvalReport) -> Result<String, ReportError> {
    let mut out = serde_json::to_string_pretty(report)?;
    out.push('\n');
    Ok(out)
}

/// CSV rendering of a training trace. An unsaturated step leaves the
/// `sat_len` cell empty.
pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from(TRACE_CSV_HEADER);
    out.push('\n');
    for row in rows {
        let sat = row.sat_len.map(fmt_sig).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            row.step,
            row.algo,
            row.strategy,
            fmt_sig(row.mean_reward),
            fmt_sig(row.pass1),
            fmt_sig(row.pass8),
            fmt_sig(row.len1),
            fmt_sig(row.len8),
            fmt_sig(row.distinct_mean),
            fmt_sig(row.pairwise_dist),
            fmt_sig(row.branch_ratio),
            sat,
            fmt_sig(row.fwd_passes),
            fmt_sig(row.eta),
        ));
    }
    out
}

pub fn trace_json(rows: &[TraceRow]) -> Result<String, ReportError> {
    let mut out = serde_json::to_string_pretty(rows)?;
    out.push('\n');
    Ok(out)
}

fn write_file(path: &Path, contents: &str) -> Result<(), ReportError> {
    std::fs::write(path, contents).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes an evaluation report to `path` in the chosen format.
pub fn emit_report(
    report: &EvalReport,
    format: ReportFormat,
    path: &Path,
) -> Result<(), ReportError> {
    let contents = match format {
        ReportFormat::Csv => eval_report_csv(report),
        ReportFormat::Json => eval_report_json(report)?,
    };
    write_file(path, &contents)
}

/// Writes a training trace to `path` in the chosen format.
pub fn write_trace(
    rows: &[TraceRow],
    format: ReportFormat,
    path: &Path,
) -> Result<(), ReportError> {
    let contents = match format {
        ReportFormat::Csv => trace_csv(rows),
        ReportFormat::Json => trace_json(rows)?,
    };
    write_file(path, &contents)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::countdown::countdown_vocab;
    use crate::policy::SoftmaxPolicy;
    use crate::rl::{Algo, Strategy};
    use approx::assert_abs_diff_eq;

    #[test]
    fn pass_rates_follow_their_definitions() {
        let one_of_eight = vec![vec![false, false, true, false, false, false, false, false]];
        assert_eq!(pass_at_k(&one_of_eight).unwrap(), (0.125, 1.0));

        let two_tasks = vec![vec![true, true], vec![false, false]];
        assert_eq!(pass_at_k(&two_tasks).unwrap(), (0.5, 0.5));

        assert!(matches!(pass_at_k(&[]), Err(ReportError::Empty)));
        assert!(matches!(
            pass_at_k(&[vec![true], vec![]]),
            Err(ReportError::EmptyGroup { index: 1 })
        ));
    }

    #[test]
    fn length_stats_pool_means_and_average_maxima() {
        assert_eq!(length_stats(&[vec![4, 8]]).unwrap(), (6.0, 8.0));
        assert_eq!(
            length_stats(&[vec![2, 2], vec![6, 10]]).unwrap(),
            (5.0, 6.0)
        );
        assert_eq!(length_stats(&[vec![10; 8]]).unwrap(), (10.0, 10.0));
        assert!(matches!(length_stats(&[]), Err(ReportError::Empty)));
    }

    #[test]
    fn rollout_stats_pool_trees_and_skip_unsaturated_means() {
        let tree = |branches, tokens, sat| TreeStats {
            branch_events: branches,
            tokens_generated: tokens,
            saturation_step: sat,
            forward_passes: tokens,
            ..TreeStats::default()
        };
        let stats = [
            tree(10, 100, Some(60)),
            tree(0, 100, Some(80)),
            tree(0, 200, None),
        ];
        let rs = rollout_stats(&stats).unwrap();
        assert_abs_diff_eq!(rs.branching_ratio, 10.0 / 400.0, epsilon = 1e-15);
        assert_eq!(rs.saturation_length_mean, Some(70.0));
        assert_eq!((rs.saturated, rs.unsaturated), (2, 1));
        assert_abs_diff_eq!(rs.forward_passes_mean, 400.0 / 3.0, epsilon = 1e-12);

        let quiet = [tree(0, 50, None)];
        let rs = rollout_stats(&quiet).unwrap();
        assert_eq!(rs.branching_ratio, 0.0);
        assert_eq!(rs.saturation_length_mean, None);
        assert!(matches!(rollout_stats(&[]), Err(ReportError::Empty)));
    }

    fn toks(ids: &[u32]) -> Vec<TokenId> {
        ids.iter().map(|&i| TokenId(i)).collect()
    }

    #[test]
    fn diversity_counts_answers_and_averages_pair_distances() {
        // An identical group: one answer, zero distance.
        let same = vec![vec![toks(&[6, 11, 7, 9]), toks(&[6, 11, 7, 9])]];
        assert_eq!(diversity_stats(&same).unwrap(), (1.0, 0.0));

        // Fully disjoint token strings are at distance one.
        let disjoint = vec![vec![toks(&[1, 2, 3]), toks(&[4, 5])]];
        let (_, pairwise) = diversity_stats(&disjoint).unwrap();
        assert_eq!(pairwise, 1.0);

        // `<ans> 7 </ans>` vs `<ans> 3 + 4 </ans>` vs `<ans> 8 </ans>`:
        // values 7, 7 and 8 make two distinct answers.
        let answers = vec![vec![
            toks(&[6, 16, 7, 9]),
            toks(&[6, 12, 2, 13, 7, 9]),
            toks(&[6, 17, 7, 9]),
        ]];
        let (distinct, _) = diversity_stats(&answers).unwrap();
        assert_eq!(distinct, 2.0);

        // Singleton groups contribute no pairs.
        let singles = vec![vec![toks(&[1])], vec![toks(&[2])]];
        assert_eq!(diversity_stats(&singles).unwrap(), (1.0, 0.0));

        assert!(matches!(
            diversity_stats::<Vec<TokenId>>(&[]),
            Err(ReportError::Empty)
        ));
    }

    #[test]
    fn diversity_ignores_group_order() {
        let a = vec![
            vec![toks(&[6, 16, 7, 9]), toks(&[6, 17, 7, 9])],
            vec![toks(&[1, 2]), toks(&[1, 2])],
        ];
        let b: Vec<_> = a.iter().rev().cloned().collect();
        assert_eq!(diversity_stats(&a).unwrap(), diversity_stats(&b).unwrap());
    }

    #[test]
    fn significant_digit_formatting_is_frozen() {
        assert_eq!(fmt_sig(0.0), "0");
        assert_eq!(fmt_sig(1.0), "1.00000");
        assert_eq!(fmt_sig(0.1), "0.100000");
        assert_eq!(fmt_sig(0.123456789), "0.123457");
        assert_eq!(fmt_sig(123.456789), "123.457");
        assert_eq!(fmt_sig(1000.0), "1000.00");
        assert_eq!(fmt_sig(-0.5), "-0.500000");
        assert_eq!(fmt_sig(1234567.0), "1234567");
        assert_eq!(fmt_sig(0.0625), "0.0625000");
        assert_eq!(fmt_sig(0.0001234567), "0.000123457");
    }

    fn sample_rows() -> Vec<TraceRow> {
        vec![
            TraceRow {
                step: 0,
                algo: Algo::Grpo,
                strategy: Strategy::Latr,
                mean_reward: 0.1,
                pass1: 0.25,
                pass8: 0.5,
                len1: 12.5,
                len8: 24.0,
                distinct_mean: 3.0,
                pairwise_dist: 0.75,
                branch_ratio: 0.0625,
                sat_len: None,
                fwd_passes: 160.0,
                eta: 1.0,
            },
            TraceRow {
                step: 1,
                algo: Algo::Dapo,
                strategy: Strategy::Stochastic,
                mean_reward: 0.0,
                pass1: 1.0,
                pass8: 1.0,
                len1: 6.0,
                len8: 6.0,
                distinct_mean: 1.0,
                pairwise_dist: 0.0,
                branch_ratio: 0.0,
                sat_len: Some(20.5),
                fwd_passes: 48.0,
                eta: 0.0,
            },
        ]
    }

    #[test]
    fn trace_csv_bytes_are_frozen() {
        let expected = "step,algo,strategy,mean_reward,pass1,pass8,len1,len8,\
                        distinct_mean,pairwise_dist,branch_ratio,sat_len,fwd_passes,eta\n\
                        0,grpo,latr,0.100000,0.250000,0.500000,12.5000,24.0000,3.00000,\
                        0.750000,0.0625000,,160.000,1.00000\n\
                        1,dapo,stochastic,0,1.00000,1.00000,6.00000,6.00000,1.00000,\
                        0,0,20.5000,48.0000,0\n";
        assert_eq!(trace_csv(&sample_rows()), expected);
    }

    #[test]
    fn trace_json_round_trips() {
        let rows = sample_rows();
        let json = trace_json(&rows).unwrap();
        let back: Vec<TraceRow> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rows);
    }

    /// An order-1 policy scripted to spell `<ans> 2 + 3 </ans> <eos>` by
    /// putting a huge logit on the successor of each context token.
    fn scripted_policy() -> SoftmaxPolicy<f64> {
        let mut policy = SoftmaxPolicy::new(countdown_vocab(), 1);
        // Prompt is `2 3 : 5`, so generation starts in context [14] ("5").
        for (ctx_tok, next) in [(14, 6), (6, 11), (11, 2), (2, 12), (12, 7), (7, 9)] {
            let ctx = crate::policy::ContextKey::from_parts(&[TokenId(ctx_tok)], &[], 1);
            policy.logit_row_mut(&ctx)[next] = 50.0;
        }
        policy
    }

    #[test]
    fn scripted_evaluation_produces_frozen_report() {
        let policy = scripted_policy();
        let task = CountdownTask::new(vec![2, 3], 5).unwrap();
        let cfg = SamplingConfig::eval(3);
        let report = evaluate_policy(&policy, &[task], 2, 24, &cfg).unwrap();
        assert_eq!(report.pass1, 1.0);
        assert_eq!(report.pass8, 1.0);
        assert_eq!(report.len1, 6.0);
        assert_eq!(report.len8, 6.0);
        assert_eq!(report.distinct_answers_mean, 1.0);
        assert_eq!(report.mean_pairwise_distance, 0.0);
        assert_eq!(report.per_task_rows.len(), 1);
        assert_eq!(report.per_task_rows[0].task, "2 3 : 5");

        let expected = "task,pass1,pass8,len1,len8,distinct,pairwise\n\
                        2 3 : 5,1.00000,1.00000,6.00000,6.00000,1,0\n";
        assert_eq!(eval_report_csv(&report), expected);
    }

    #[test]
    fn evaluation_is_deterministic_and_seed_sensitive() {
        let policy = SoftmaxPolicy::<f64>::new(countdown_vocab(), 2);
        let tasks = vec![
            CountdownTask::new(vec![2, 3], 5).unwrap(),
            CountdownTask::new(vec![4, 5], 9).unwrap(),
        ];
        let cfg = SamplingConfig::eval(7);
        let a = evaluate_policy(&policy, &tasks, 4, 16, &cfg).unwrap();
        let b = evaluate_policy(&policy, &tasks, 4, 16, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(eval_report_csv(&a), eval_report_csv(&b));
        let json = eval_report_json(&a).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, a);

        let other = evaluate_policy(&policy, &tasks, 4, 16, &SamplingConfig::eval(8)).unwrap();
        assert_ne!(
            a, other,
            "a different seed should change at least one sampled completion"
        );
    }

    #[test]
    fn evaluation_rejects_degenerate_requests() {
        let policy = SoftmaxPolicy::<f64>::new(countdown_vocab(), 1);
        let task = CountdownTask::new(vec![2, 3], 5).unwrap();
        let cfg = SamplingConfig::eval(0);
        assert!(matches!(
            evaluate_policy(&policy, &[], 4, 16, &cfg),
            Err(ReportError::Empty)
        ));
        assert!(matches!(
            evaluate_policy(&policy, &[task], 0, 16, &cfg),
            Err(ReportError::ZeroRollouts)
        ));
    }

    #[test]
    fn report_files_land_where_asked() {
        let dir = tempfile::tempdir().unwrap();
        let report = EvalReport {
            pass1: 0.5,
            pass8: 1.0,
            len1: 6.0,
            len8: 8.0,
            distinct_answers_mean: 2.0,
            mean_pairwise_distance: 0.25,
            per_task_rows: vec![TaskRow {
                task: "2 3 : 5".into(),
                pass1: 0.5,
                pass8: 1.0,
                len1: 6.0,
                len8: 8.0,
                distinct: 2,
                pairwise: 0.25,
            }],
        };
        let csv_path = dir.path().join("eval.csv");
        emit_report(&report, ReportFormat::Csv, &csv_path).unwrap();
        let contents = std::fs::read_to_string(&csv_path).unwrap();
        assert!(contents.starts_with(EVAL_CSV_HEADER));

        let json_path = dir.path().join("eval.json");
        emit_report(&report, ReportFormat::Json, &json_path).unwrap();
        let back: EvalReport =
            serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
        assert_eq!(back, report);

        let trace_path = dir.path().join("trace.csv");
        write_trace(&sample_rows(), ReportFormat::Csv, &trace_path).unwrap();
        let trace = std::fs::read_to_string(&trace_path).unwrap();
        assert!(trace.starts_with("step,algo,strategy"));

        let missing = dir.path().join("no-such-dir").join("x.csv");
        let err = emit_report(&report, ReportFormat::Csv, &missing).unwrap_err();
        assert!(matches!(err, ReportError::Io { .. }));

        assert_eq!("csv".parse::<ReportFormat>().unwrap(), ReportFormat::Csv);
        assert!("yaml".parse::<ReportFormat>().is_err());
    }
}
