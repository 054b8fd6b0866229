//! `latr-lab`: desk-scale experiments with lookahead tree-based rollouts.
//!
//! Five subcommands drive the core crate end to end:
//!
//! - `rollout` — grow one rollout group for a single task and dump the event
//!   log, the detokenized sequences, and (for tree strategies) the stats;
//! - `train` — run the full rollout-and-update loop, writing a per-step trace
//!   and policy checkpoints;
//! - `eval` — score a checkpoint (or the uniform start) on a task set with
//!   fixed-count stochastic sampling;
//! - `compare` — train a matrix of algorithm × strategy × seed cells (with
//!   optional k and temperature sweeps) and merge the traces into one
//!   long-format CSV plus a seed-median summary;
//! - `gen-tasks` — write train/validation task files drawn from disjoint
//!   seed streams.
//!
//! Every command is deterministic under a fixed config and seed, validates
//! the whole config before touching the filesystem, and writes only inside
//! the configured output directory. Exit codes: 0 success, 1 usage or config
//! error, 2 runtime failure.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Overrides, RunConfig};
use latr_core::countdown::{
    countdown_vocab, generate_task, read_tasks, reward, write_tasks, CountdownTask,
};
use latr_core::policy::PolicyRole;
use latr_core::report::{
    emit_report, evaluate_policy, fmt_sig, write_trace, ReportFormat,
};
use latr_core::rl::{train_loop, Algo, Strategy, TraceRow};
use latr_core::rng::{self, tags};
use latr_core::sampling::{sr_rollout, stochastic_rollout, Sequence};
use latr_core::tree::{latr_variant_rollout, LatrVariant, SequenceOrigin, TreeEvent, TreeStats};
use latr_core::Policy;

#[derive(Parser)]
#[command(
    name = "latr-lab",
    version,
    about = "Desk-scale lab for lookahead tree-based rollouts on mini-Countdown"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Grow one rollout group for a task and dump its events and sequences.
    Rollout(RolloutArgs),
    /// Train a policy and write the per-step trace and checkpoints.
    Train(TrainArgs),
    /// Score a checkpoint on a task set.
    Eval(EvalArgs),
    /// Train a matrix of cells and merge their traces into one report.
    Compare(CompareArgs),
    /// Write train/validation task files from disjoint seed streams.
    GenTasks(GenTasksArgs),
}

#[derive(Args)]
struct RolloutArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Task operands, comma-separated.
    #[arg(long, value_delimiter = ',', default_value = "3,5,2")]
    numbers: Vec<i64>,
    /// Task target value.
    #[arg(long, default_value_t = 16)]
    target: i64,
    /// Start from a checkpoint instead of the uniform policy.
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Training task file (JSON lines); generated from the seed when absent.
    #[arg(long, value_name = "FILE")]
    tasks: Option<PathBuf>,
    /// Validation task file; generated from the seed when absent.
    #[arg(long, value_name = "FILE")]
    val_tasks: Option<PathBuf>,
    /// Initial policy checkpoint; uniform start when absent.
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Policy checkpoint to score; the uniform start when absent.
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    /// Task file to evaluate on; generated from the seed when absent.
    #[arg(long, value_name = "FILE")]
    tasks: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Algorithms to compare, comma-separated (default: the configured one).
    #[arg(long, value_delimiter = ',')]
    algos: Option<Vec<Algo>>,
    /// Strategies to compare, comma-separated (default: latr,stochastic).
    #[arg(long, value_delimiter = ',')]
    strategies: Option<Vec<Strategy>>,
    /// Group sizes to sweep, comma-separated (default: the configured k).
    #[arg(long, value_delimiter = ',')]
    sweep_k: Option<Vec<usize>>,
    /// Rollout temperatures to sweep (default: the configured temperature).
    #[arg(long, value_delimiter = ',')]
    sweep_temperature: Option<Vec<f64>>,
    /// Shared training task file; generated from the seed when absent.
    #[arg(long, value_name = "FILE")]
    tasks: Option<PathBuf>,
    /// Shared validation task file; generated from the seed when absent.
    #[arg(long, value_name = "FILE")]
    val_tasks: Option<PathBuf>,
}

#[derive(Args)]
struct GenTasksArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Training tasks to generate (default: the configured train_pool).
    #[arg(long)]
    train_count: Option<usize>,
    /// Validation tasks to generate (default: the configured val_pool).
    #[arg(long)]
    val_count: Option<usize>,
}

/// A failure, classified by exit code.
enum Failure {
    /// Bad invocation or config: exit 1.
    Usage(String),
    /// The run itself failed: exit 2.
    Runtime(String),
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn runtime(msg: impl Into<String>) -> Failure {
    Failure::Runtime(msg.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Rollout(args) => cmd_rollout(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Compare(args) => cmd_compare(args),
        Command::GenTasks(args) => cmd_gen_tasks(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn prepare_out_dir(cfg: &RunConfig) -> Result<PathBuf, Failure> {
    std::fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| runtime(format!("creating {}: {e}", cfg.output_dir.display())))?;
    Ok(cfg.output_dir.clone())
}

fn write_text(path: &Path, contents: &str) -> Result<(), Failure> {
    std::fs::write(path, contents)
        .map_err(|e| runtime(format!("writing {}: {e}", path.display())))
}

fn load_policy(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Policy, Failure> {
    match checkpoint {
        Some(path) => Policy::load_checkpoint(
            path,
            countdown_vocab(),
            cfg.context_order,
            PolicyRole::Current,
        )
        .map_err(|e| usage(format!("loading checkpoint {}: {e}", path.display()))),
        None => Ok(Policy::new(countdown_vocab(), cfg.context_order)),
    }
}

/// Stream indices under the task tag: train and validation pools draw from
/// disjoint streams of the same base seed.
const TRAIN_SPLIT: u64 = 0;
const VAL_SPLIT: u64 = 1;

fn generate_tasks(cfg: &RunConfig, split: u64, count: usize) -> Result<Vec<CountdownTask>, Failure> {
    let mut rng = rng::stream(cfg.seed, &[tags::TASK, split]);
    (0..count)
        .map(|_| {
            generate_task(
                &mut rng,
                cfg.numbers_per_task,
                cfg.min_value..=cfg.max_value,
                cfg.min_target..=cfg.max_target,
            )
            .map_err(|e| runtime(format!("generating tasks: {e}")))
        })
        .collect()
}

fn load_or_generate_tasks(
    cfg: &RunConfig,
    file: Option<&Path>,
    split: u64,
    count: usize,
) -> Result<Vec<CountdownTask>, Failure> {
    match file {
        Some(path) => {
            let tasks = read_tasks(path)
                .map_err(|e| usage(format!("reading tasks {}: {e}", path.display())))?;
            if tasks.is_empty() {
                return Err(usage(format!("task file {} is empty", path.display())));
            }
            Ok(tasks)
        }
        None => generate_tasks(cfg, split, count),
    }
}

fn origin_name(origin: SequenceOrigin) -> &'static str {
    match origin {
        SequenceOrigin::Latr => "latr",
        SequenceOrigin::Padding => "padding",
        SequenceOrigin::Stochastic => "stochastic",
    }
}

fn to_json_line<T: serde::Serialize>(value: &T) -> Result<String, Failure> {
    serde_json::to_string(value).map_err(|e| runtime(e.to_string()))
}

fn cmd_rollout(args: RolloutArgs) -> Result<(), Failure> {
    let cfg = RunConfig::resolve(&args.overrides).map_err(Failure::Usage)?;
    let task = CountdownTask::new(args.numbers.clone(), args.target)
        .map_err(|e| usage(format!("bad task: {e}")))?;
    let policy = load_policy(&cfg, args.checkpoint.as_deref())?;
    let sampling = cfg.sampling().map_err(Failure::Usage)?;
    let prompt = task.prompt_tokens();
    let tag = task.stream_tag();

    type RolloutOutput = (
        Vec<Sequence>,
        Vec<SequenceOrigin>,
        Vec<TreeEvent>,
        Option<TreeStats>,
    );
    let (sequences, origins, events, stats): RolloutOutput = match cfg.strategy {
        Strategy::Latr | Strategy::LatrVariant => {
            let variant = match cfg.strategy {
                Strategy::LatrVariant => cfg.variant().map_err(Failure::Usage)?,
                _ => LatrVariant::Full,
            };
            let out = latr_variant_rollout(&policy, prompt, &cfg.latr(), &sampling, &variant, tag);
            (out.sequences, out.origins, out.events, Some(out.stats))
        }
        Strategy::Stochastic => {
            let seqs = stochastic_rollout(&policy, prompt, cfg.k, cfg.n, &sampling, tag);
            let origins = vec![SequenceOrigin::Stochastic; seqs.len()];
            (seqs, origins, Vec::new(), None)
        }
        Strategy::Sr => {
            let seqs = sr_rollout(&policy, prompt, cfg.n, &cfg.sr(), &sampling, tag)
                .map_err(|e| runtime(format!("selection rollout failed: {e}")))?;
            let origins = vec![SequenceOrigin::Stochastic; seqs.len()];
            (seqs, origins, Vec::new(), None)
        }
    };

    let out_dir = prepare_out_dir(&cfg)?;
    let mut event_log = String::new();
    for event in &events {
        event_log.push_str(&to_json_line(event)?);
        event_log.push('\n');
    }
    write_text(&out_dir.join("events.jsonl"), &event_log)?;

    let vocab = countdown_vocab();
    println!(
        "task {}  strategy {}  k {}  n {}",
        vocab.decode(prompt),
        cfg.strategy,
        cfg.k,
        cfg.n
    );
    let mut listing = String::new();
    for (seq, origin) in sequences.iter().zip(&origins) {
        let r = reward(&task, &seq.tokens).total;
        let text = vocab.decode(&seq.tokens);
        listing.push_str(&format!("{}\t{}\t{}\n", fmt_sig(r), origin_name(*origin), text));
        println!("  [{:>10}] reward {:>8}  {text}", origin_name(*origin), fmt_sig(r));
    }
    write_text(&out_dir.join("sequences.txt"), &listing)?;

    if let Some(stats) = &stats {
        let mut json = serde_json::to_string_pretty(stats).map_err(|e| runtime(e.to_string()))?;
        json.push('\n');
        write_text(&out_dir.join("stats.json"), &json)?;
        println!(
            "branches {}  pruned {}  saturation {}  passes {} (+{} padding)  events {}",
            stats.branch_events,
            stats.pruned_count,
            stats
                .saturation_step
                .map(|s| s.to_string())
                .unwrap_or_else(|| "-".to_string()),
            stats.forward_passes,
            stats.padding_passes,
            events.len()
        );
    }
    println!("wrote events.jsonl and sequences.txt to {}", out_dir.display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), Failure> {
    let cfg = RunConfig::resolve(&args.overrides).map_err(Failure::Usage)?;
    if cfg.steps == 0 {
        return Err(usage("train needs steps >= 1"));
    }
    let train_cfg = cfg.train_config().map_err(Failure::Usage)?;
    let train_tasks =
        load_or_generate_tasks(&cfg, args.tasks.as_deref(), TRAIN_SPLIT, cfg.train_pool)?;
    let val_tasks =
        load_or_generate_tasks(&cfg, args.val_tasks.as_deref(), VAL_SPLIT, cfg.val_pool)?;
    let mut policy = load_policy(&cfg, args.checkpoint.as_deref())?;

    let out_dir = prepare_out_dir(&cfg)?;
    write_text(&out_dir.join("config.json"), &cfg.to_json().map_err(Failure::Runtime)?)?;
    write_tasks(&out_dir.join("train_tasks.jsonl"), &train_tasks)
        .map_err(|e| runtime(format!("writing train task file: {e}")))?;
    write_tasks(&out_dir.join("val_tasks.jsonl"), &val_tasks)
        .map_err(|e| runtime(format!("writing val task file: {e}")))?;

    let every = cfg.checkpoint_every;
    let ckpt_dir = out_dir.clone();
    let mut ckpt_err: Option<String> = None;
    let result = train_loop(&mut policy, &train_tasks, &val_tasks, &train_cfg, |step, p| {
        if every > 0 && (step + 1) % every == 0 && ckpt_err.is_none() {
            let path = ckpt_dir.join(format!("checkpoint_step_{:04}.json", step + 1));
            if let Err(e) = p.save_checkpoint(&path) {
                ckpt_err = Some(format!("writing {}: {e}", path.display()));
            }
        }
    });

    let (trace, abort_msg) = match result {
        Ok(trace) => (trace, None),
        Err(abort) => {
            let msg = abort.to_string();
            (abort.partial, Some(msg))
        }
    };
    write_trace(&trace, ReportFormat::Csv, &out_dir.join("trace.csv"))
        .map_err(|e| runtime(e.to_string()))?;
    write_trace(&trace, ReportFormat::Json, &out_dir.join("trace.json"))
        .map_err(|e| runtime(e.to_string()))?;
    for row in &trace {
        println!(
            "step {:>4}  reward {:>8}  pass1 {:>8}  pass8 {:>8}  eta {}",
            row.step,
            fmt_sig(row.mean_reward),
            fmt_sig(row.pass1),
            fmt_sig(row.pass8),
            fmt_sig(row.eta)
        );
    }
    if let Some(msg) = abort_msg {
        return Err(runtime(format!(
            "{msg} (partial trace with {} rows preserved in {})",
            trace.len(),
            out_dir.display()
        )));
    }
    policy
        .save_checkpoint(&out_dir.join("checkpoint.json"))
        .map_err(|e| runtime(format!("writing final checkpoint: {e}")))?;
    if let Some(e) = ckpt_err {
        return Err(Failure::Runtime(e));
    }
    println!(
        "wrote {} trace rows and final checkpoint to {}",
        trace.len(),
        out_dir.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), Failure> {
    let cfg = RunConfig::resolve(&args.overrides).map_err(Failure::Usage)?;
    let tasks = load_or_generate_tasks(&cfg, args.tasks.as_deref(), VAL_SPLIT, cfg.val_pool)?;
    let policy = load_policy(&cfg, args.checkpoint.as_deref())?;
    let eval_cfg = cfg.eval_sampling().map_err(Failure::Usage)?;
    let report = evaluate_policy(&policy, &tasks, cfg.val_rollouts, cfg.n, &eval_cfg)
        .map_err(|e| runtime(e.to_string()))?;

    let out_dir = prepare_out_dir(&cfg)?;
    emit_report(&report, ReportFormat::Csv, &out_dir.join("eval.csv"))
        .map_err(|e| runtime(e.to_string()))?;
    emit_report(&report, ReportFormat::Json, &out_dir.join("eval.json"))
        .map_err(|e| runtime(e.to_string()))?;
    println!(
        "tasks {}  rollouts {}  pass1 {}  pass8 {}  len1 {}  len8 {}  distinct {}  pairwise {}",
        tasks.len(),
        cfg.val_rollouts,
        fmt_sig(report.pass1),
        fmt_sig(report.pass8),
        fmt_sig(report.len1),
        fmt_sig(report.len8),
        fmt_sig(report.distinct_answers_mean),
        fmt_sig(report.mean_pairwise_distance)
    );
    println!("wrote eval.csv and eval.json to {}", out_dir.display());
    Ok(())
}

fn cmd_gen_tasks(args: GenTasksArgs) -> Result<(), Failure> {
    let cfg = RunConfig::resolve(&args.overrides).map_err(Failure::Usage)?;
    let train_count = args.train_count.unwrap_or(cfg.train_pool);
    let val_count = args.val_count.unwrap_or(cfg.val_pool);
    if train_count == 0 || val_count == 0 {
        return Err(usage("task counts must be at least 1"));
    }
    let train = generate_tasks(&cfg, TRAIN_SPLIT, train_count)?;
    let val = generate_tasks(&cfg, VAL_SPLIT, val_count)?;

    let out_dir = prepare_out_dir(&cfg)?;
    let train_path = out_dir.join("train_tasks.jsonl");
    let val_path = out_dir.join("val_tasks.jsonl");
    write_tasks(&train_path, &train)
        .map_err(|e| runtime(format!("writing {}: {e}", train_path.display())))?;
    write_tasks(&val_path, &val)
        .map_err(|e| runtime(format!("writing {}: {e}", val_path.display())))?;
    println!(
        "wrote {} train tasks to {} and {} val tasks to {} (all solvable)",
        train.len(),
        train_path.display(),
        val.len(),
        val_path.display()
    );
    Ok(())
}

const COMPARE_TRACE_HEADER: &str = "algo,strategy,k,temperature,seed,step,mean_reward,pass1,\
                                    pass8,len1,len8,distinct_mean,pairwise_dist,branch_ratio,\
                                    sat_len,fwd_passes,eta";

const COMPARE_SUMMARY_HEADER: &str = "algo,strategy,k,temperature,seeds,hit_seeds,\
                                      median_steps_to_threshold,median_final_pass1,failed_seeds";

fn compare_row(k: usize, temperature: f64, seed: u64, row: &TraceRow) -> String {
    let sat = row.sat_len.map(fmt_sig).unwrap_or_default();
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
        row.algo,
        row.strategy,
        k,
        temperature,
        seed,
        row.step,
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
        fmt_sig(row.eta)
    )
}

/// Median of the per-seed first-hit steps, with "never hit" counted as
/// infinity; `None` when the median seed never hit. Even counts take the
/// mean of the two middle values.
fn median_steps(hits: &[Option<usize>]) -> Option<f64> {
    let mut sorted: Vec<Option<usize>> = hits.to_vec();
    sorted.sort_by_key(|h| h.map_or(u64::MAX, |s| s as u64));
    let n = sorted.len();
    if n == 0 {
        return None;
    }
    if n % 2 == 1 {
        sorted[n / 2].map(|s| s as f64)
    } else {
        match (sorted[n / 2 - 1], sorted[n / 2]) {
            (Some(a), Some(b)) => Some((a + b) as f64 / 2.0),
            _ => None,
        }
    }
}

fn median_f64(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("metrics are never NaN"));
    let n = sorted.len();
    Some(if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    })
}

/// Trains one compare cell from a fresh uniform policy. On failure, returns
/// whatever trace rows completed along with the error message.
fn run_cell(
    cell: &RunConfig,
    train_tasks: &[CountdownTask],
    val_tasks: &[CountdownTask],
) -> Result<Vec<TraceRow>, (Vec<TraceRow>, String)> {
    let train_cfg = match cell.train_config() {
        Ok(tc) => tc,
        Err(e) => return Err((Vec::new(), e)),
    };
    let mut policy = Policy::new(countdown_vocab(), cell.context_order);
    match train_loop(&mut policy, train_tasks, val_tasks, &train_cfg, |_, _| {}) {
        Ok(rows) => Ok(rows),
        Err(abort) => {
            let msg = abort.to_string();
            Err((abort.partial, msg))
        }
    }
}

fn cmd_compare(args: CompareArgs) -> Result<(), Failure> {
    let cfg = RunConfig::resolve(&args.overrides).map_err(Failure::Usage)?;
    if cfg.steps == 0 {
        return Err(usage("compare needs steps >= 1"));
    }
    let algos = args.algos.clone().unwrap_or_else(|| vec![cfg.algo]);
    let strategies = args
        .strategies
        .clone()
        .unwrap_or_else(|| vec![Strategy::Latr, Strategy::Stochastic]);
    let ks = args.sweep_k.clone().unwrap_or_else(|| vec![cfg.k]);
    let temps = args
        .sweep_temperature
        .clone()
        .unwrap_or_else(|| vec![cfg.temperature]);
    let seeds = cfg.seeds.clone();
    if algos.is_empty() || strategies.is_empty() || ks.is_empty() || temps.is_empty()
        || seeds.is_empty()
    {
        return Err(usage(
            "compare matrix is empty: algos, strategies, sweep values and seeds must each \
             be non-empty",
        ));
    }

    // Tasks are shared across every cell so the comparison is apples to
    // apples; only the per-cell seed changes the sampling streams.
    let train_tasks =
        load_or_generate_tasks(&cfg, args.tasks.as_deref(), TRAIN_SPLIT, cfg.train_pool)?;
    let val_tasks =
        load_or_generate_tasks(&cfg, args.val_tasks.as_deref(), VAL_SPLIT, cfg.val_pool)?;
    let out_dir = prepare_out_dir(&cfg)?;
    let cells_dir = out_dir.join("cells");

    let mut merged = String::from(COMPARE_TRACE_HEADER);
    merged.push('\n');
    let mut summary = String::from(COMPARE_SUMMARY_HEADER);
    summary.push('\n');
    let mut failed = 0usize;
    let mut total = 0usize;

    for &algo in &algos {
        for &strategy in &strategies {
            for &k in &ks {
                for &temp in &temps {
                    let mut hits: Vec<Option<usize>> = Vec::new();
                    let mut finals: Vec<f64> = Vec::new();
                    let mut cell_failures = 0usize;
                    for &seed in &seeds {
                        total += 1;
                        let mut cell = cfg.clone();
                        cell.algo = algo;
                        cell.strategy = strategy;
                        cell.k = k;
                        cell.temperature = temp;
                        cell.seed = seed;
                        let label = format!("{algo}-{strategy}-k{k}-t{temp}-s{seed}");

                        let (rows, error) = match run_cell(&cell, &train_tasks, &val_tasks) {
                            Ok(rows) => (rows, None),
                            Err((rows, msg)) => (rows, Some(msg)),
                        };
                        let cell_dir = cells_dir.join(&label);
                        std::fs::create_dir_all(&cell_dir)
                            .map_err(|e| runtime(format!("creating {}: {e}", cell_dir.display())))?;
                        write_trace(&rows, ReportFormat::Csv, &cell_dir.join("trace.csv"))
                            .map_err(|e| runtime(e.to_string()))?;
                        for row in &rows {
                            merged.push_str(&compare_row(k, temp, seed, row));
                        }
                        match error {
                            None => {
                                let hit =
                                    rows.iter().find(|r| r.pass1 >= cfg.threshold).map(|r| r.step);
                                hits.push(hit);
                                if let Some(last) = rows.last() {
                                    finals.push(last.pass1);
                                }
                                println!(
                                    "cell {label}: steps_to_threshold {}  final_pass1 {}",
                                    hit.map(|s| s.to_string()).unwrap_or_else(|| "-".to_string()),
                                    rows.last()
                                        .map(|r| fmt_sig(r.pass1))
                                        .unwrap_or_else(|| "-".to_string())
                                );
                            }
                            Some(msg) => {
                                failed += 1;
                                cell_failures += 1;
                                println!("cell {label}: FAILED ({msg})");
                            }
                        }
                    }
                    summary.push_str(&format!(
                        "{},{},{},{},{},{},{},{},{}\n",
                        algo,
                        strategy,
                        k,
                        temp,
                        seeds.len(),
                        hits.iter().filter(|h| h.is_some()).count(),
                        median_steps(&hits).map(fmt_sig).unwrap_or_default(),
                        median_f64(&finals).map(fmt_sig).unwrap_or_default(),
                        cell_failures
                    ));
                }
            }
        }
    }

    write_text(&out_dir.join("compare_trace.csv"), &merged)?;
    write_text(&out_dir.join("compare_summary.csv"), &summary)?;
    println!(
        "ran {total} cells; wrote compare_trace.csv and compare_summary.csv to {}",
        out_dir.display()
    );
    if failed > 0 {
        return Err(runtime(format!("{failed} of {total} compare cells failed")));
    }
    Ok(())
}
