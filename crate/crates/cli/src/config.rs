//! Run configuration: one flat document covering every knob of the lab.
//!
//! Values resolve in documented precedence order, lowest to highest:
//!
//! 1. built-in defaults ([`RunConfig::default`]),
//! 2. a JSON config file (`--config run.json`; unknown keys are rejected),
//! 3. the `LATR_LAB_OUT` environment variable (output directory only),
//! 4. command-line flags, which mirror the config keys in kebab-case
//!    (`tau_abs` ↔ `--tau-abs`).
//!
//! [`RunConfig::resolve`] applies that order and validates the result against
//! every module's invariants before any command does work, so a bad value
//! never produces partial output.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use latr_core::rl::{
    Algo, DapoConfig, GrpoConfig, HybridSchedule, Strategy, TrainConfig,
};
use latr_core::sampling::{SamplingConfig, SrConfig, TopK};
use latr_core::similarity::SimilarityMetric;
use latr_core::tree::{LatrConfig, LatrVariant};

/// Environment variable that overrides the output directory (flags still
/// win).
pub const OUTPUT_ENV_VAR: &str = "LATR_LAB_OUT";

/// Everything a run needs, in one serializable document.
///
/// The same keys appear in JSON config files (snake_case) and as flags
/// (kebab-case); `top_k` uses `-1` as the "unlimited" sentinel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Policy-update algorithm: `grpo` or `dapo`.
    pub algo: Algo,
    /// Group rollout strategy: `latr`, `stochastic`, `sr`, or `latr_variant`.
    pub strategy: Strategy,
    /// Tree ablation for `latr_variant`: `full`, `random_branch`,
    /// `random_prune`, or `no_prune`.
    pub variant_kind: String,
    /// Rate parameter for the random ablations.
    pub variant_rate: f64,

    /// Minimum candidate probability for a branch fork.
    pub tau_abs: f64,
    /// Maximum probability gap below the argmax for a branch fork.
    pub tau_rel: f64,
    /// Minimum lookahead divergence a branch must keep to survive.
    pub tau_ed: f64,
    /// Lookahead window lengths, strictly ascending.
    pub windows: Vec<usize>,
    /// Group size: completions per prompt (and maximum tree width).
    pub k: usize,
    /// Maximum completion length in tokens.
    pub n: usize,
    /// Tokens of context the tabular policy conditions on.
    pub context_order: usize,

    /// Rollout sampling temperature.
    pub temperature: f64,
    /// Rollout top-k cutoff (`-1` = unlimited).
    pub top_k: i64,
    /// Rollout nucleus mass.
    pub top_p: f64,
    /// Evaluation sampling temperature.
    pub eval_temperature: f64,
    /// Evaluation top-k cutoff (`-1` = unlimited).
    pub eval_top_k: i64,
    /// Evaluation nucleus mass.
    pub eval_top_p: f64,
    /// Base seed; every random stream in a run derives from it.
    pub seed: u64,

    /// Tree fraction of the group budget at step 0.
    pub eta0: f64,
    /// Per-step decay of the tree fraction.
    pub gamma: f64,

    /// Symmetric clip radius (GRPO).
    pub clip_eps: f64,
    /// KL penalty weight (GRPO).
    pub kl_beta: f64,
    /// Downward clip radius (DAPO).
    pub clip_low: f64,
    /// Upward clip radius (DAPO).
    pub clip_high: f64,
    /// Group oversampling factor for the DAPO filter.
    pub oversample_factor: f64,
    /// Gradient-ascent step size (both algorithms).
    pub learning_rate: f64,
    /// Pool size the `sr` strategy samples before keeping `k`.
    pub sr_oversample: usize,

    /// Training steps.
    pub steps: usize,
    /// Prompts drawn per training step.
    pub batch_size: usize,
    /// Completions per validation task.
    pub val_rollouts: usize,
    /// Save a checkpoint every this many steps (0 = final only).
    pub checkpoint_every: usize,

    /// Generated train-pool size when no task file is supplied.
    pub train_pool: usize,
    /// Generated validation-pool size when no task file is supplied.
    pub val_pool: usize,
    /// Operands per generated task.
    pub numbers_per_task: usize,
    /// Smallest generated operand.
    pub min_value: i64,
    /// Largest generated operand.
    pub max_value: i64,
    /// Smallest generated target.
    pub min_target: i64,
    /// Largest generated target.
    pub max_target: i64,

    /// Validation pass@1 level the compare summary measures steps toward.
    pub threshold: f64,
    /// Seed replicates for `compare`.
    pub seeds: Vec<u64>,
    /// Directory every output file lands under.
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            algo: Algo::Grpo,
            strategy: Strategy::Latr,
            variant_kind: "full".to_string(),
            variant_rate: 0.5,
            tau_abs: 0.25,
            tau_rel: 0.15,
            tau_ed: 0.4,
            windows: vec![20, 30, 50],
            k: 8,
            n: 24,
            context_order: 2,
            temperature: 1.0,
            top_k: -1,
            top_p: 1.0,
            eval_temperature: 0.6,
            eval_top_k: 20,
            eval_top_p: 0.95,
            seed: 0,
            eta0: 1.0,
            gamma: 0.985,
            clip_eps: 0.2,
            kl_beta: 0.01,
            clip_low: 0.2,
            clip_high: 0.28,
            oversample_factor: 1.5,
            learning_rate: 0.05,
            sr_oversample: 16,
            steps: 500,
            batch_size: 8,
            val_rollouts: 8,
            checkpoint_every: 0,
            train_pool: 48,
            val_pool: 16,
            numbers_per_task: 3,
            min_value: 1,
            max_value: 9,
            min_target: 1,
            max_target: 30,
            threshold: 0.6,
            seeds: vec![1, 2, 3],
            output_dir: PathBuf::from("runs"),
        }
    }
}

/// Flag mirror of [`RunConfig`]: every key as an optional kebab-case
/// override, plus `--config` for the file layer.
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    /// JSON config file; explicit flags override its values.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[arg(long)]
    pub algo: Option<Algo>,
    #[arg(long)]
    pub strategy: Option<Strategy>,
    #[arg(long)]
    pub variant_kind: Option<String>,
    #[arg(long)]
    pub variant_rate: Option<f64>,

    #[arg(long)]
    pub tau_abs: Option<f64>,
    #[arg(long)]
    pub tau_rel: Option<f64>,
    #[arg(long)]
    pub tau_ed: Option<f64>,
    /// Comma-separated window lengths, e.g. `20,30,50`.
    #[arg(long, value_delimiter = ',')]
    pub windows: Option<Vec<usize>>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub context_order: Option<usize>,

    #[arg(long)]
    pub temperature: Option<f64>,
    /// `-1` keeps the whole vocabulary.
    #[arg(long, allow_hyphen_values = true)]
    pub top_k: Option<i64>,
    #[arg(long)]
    pub top_p: Option<f64>,
    #[arg(long)]
    pub eval_temperature: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub eval_top_k: Option<i64>,
    #[arg(long)]
    pub eval_top_p: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,

    #[arg(long)]
    pub eta0: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,

    #[arg(long)]
    pub clip_eps: Option<f64>,
    #[arg(long)]
    pub kl_beta: Option<f64>,
    #[arg(long)]
    pub clip_low: Option<f64>,
    #[arg(long)]
    pub clip_high: Option<f64>,
    #[arg(long)]
    pub oversample_factor: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub sr_oversample: Option<usize>,

    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub val_rollouts: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,

    #[arg(long)]
    pub train_pool: Option<usize>,
    #[arg(long)]
    pub val_pool: Option<usize>,
    #[arg(long)]
    pub numbers_per_task: Option<usize>,
    #[arg(long)]
    pub min_value: Option<i64>,
    #[arg(long)]
    pub max_value: Option<i64>,
    #[arg(long)]
    pub min_target: Option<i64>,
    #[arg(long)]
    pub max_target: Option<i64>,

    #[arg(long)]
    pub threshold: Option<f64>,
    /// Comma-separated seed replicates for `compare`, e.g. `1,2,3,4,5`.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, value_name = "DIR")]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Parses a JSON config file, rejecting unknown keys.
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("reading config {}: {e}", path.display()))?;
        serde_json::from_str(&text)
            .map_err(|e| format!("parsing config {}: {e}", path.display()))
    }

    /// Applies the documented precedence (defaults → file → env → flags) and
    /// validates the result.
    pub fn resolve(overrides: &Overrides) -> Result<Self, String> {
        let mut cfg = match &overrides.config {
            Some(path) => Self::load(path)?,
            None => Self::default(),
        };
        if let Ok(dir) = std::env::var(OUTPUT_ENV_VAR) {
            if !dir.is_empty() {
                cfg.output_dir = PathBuf::from(dir);
            }
        }
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, o: &Overrides) {
        macro_rules! take {
            ($($field:ident),* $(,)?) => {
                $(if let Some(v) = &o.$field {
                    self.$field = v.clone();
                })*
            };
        }
        take!(
            algo,
            strategy,
            variant_kind,
            variant_rate,
            tau_abs,
            tau_rel,
            tau_ed,
            windows,
            k,
            n,
            context_order,
            temperature,
            top_k,
            top_p,
            eval_temperature,
            eval_top_k,
            eval_top_p,
            seed,
            eta0,
            gamma,
            clip_eps,
            kl_beta,
            clip_low,
            clip_high,
            oversample_factor,
            learning_rate,
            sr_oversample,
            steps,
            batch_size,
            val_rollouts,
            checkpoint_every,
            train_pool,
            val_pool,
            numbers_per_task,
            min_value,
            max_value,
            min_target,
            max_target,
            threshold,
            seeds,
            output_dir,
        );
    }

    /// Checks every derived module config plus the CLI-only fields; no
    /// command touches the filesystem before this passes.
    pub fn validate(&self) -> Result<(), String> {
        self.train_config()?;
        if self.context_order == 0 {
            return Err("context_order must be at least 1".to_string());
        }
        if !(1..=latr_core::countdown::MAX_NUMBERS).contains(&self.numbers_per_task) {
            return Err(format!(
                "numbers_per_task must lie in 1..={}, got {}",
                latr_core::countdown::MAX_NUMBERS,
                self.numbers_per_task
            ));
        }
        for (name, lo, hi) in [
            ("value", self.min_value, self.max_value),
            ("target", self.min_target, self.max_target),
        ] {
            if !(1 <= lo && lo <= hi && hi <= 30) {
                return Err(format!(
                    "{name} range must satisfy 1 <= min <= max <= 30, got {lo}..={hi}"
                ));
            }
        }
        if self.train_pool == 0 || self.val_pool == 0 {
            return Err("train_pool and val_pool must be at least 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(format!(
                "threshold must lie in [0, 1], got {}",
                self.threshold
            ));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err("output_dir must not be empty".to_string());
        }
        Ok(())
    }

    pub fn latr(&self) -> LatrConfig {
        LatrConfig {
            tau_abs: self.tau_abs,
            tau_rel: self.tau_rel,
            tau_ed: self.tau_ed,
            windows: self.windows.clone(),
            k: self.k,
            n: self.n,
        }
    }

    pub fn sampling(&self) -> Result<SamplingConfig, String> {
        Ok(SamplingConfig {
            temperature: self.temperature,
            top_k: TopK::from_sentinel(self.top_k).map_err(|e| e.to_string())?,
            top_p: self.top_p,
            seed: self.seed,
        })
    }

    pub fn eval_sampling(&self) -> Result<SamplingConfig, String> {
        Ok(SamplingConfig {
            temperature: self.eval_temperature,
            top_k: TopK::from_sentinel(self.eval_top_k).map_err(|e| e.to_string())?,
            top_p: self.eval_top_p,
            seed: self.seed,
        })
    }

    pub fn variant(&self) -> Result<LatrVariant, String> {
        let v = match self.variant_kind.replace('-', "_").as_str() {
            "full" => LatrVariant::Full,
            "random_branch" => LatrVariant::RandomBranch(self.variant_rate),
            "random_prune" => LatrVariant::RandomPrune(self.variant_rate),
            "no_prune" => LatrVariant::NoPrune,
            other => {
                return Err(format!(
                    "unknown variant kind {other:?} (expected full, random_branch, \
                     random_prune, or no_prune)"
                ))
            }
        };
        v.validate().map_err(|e| e.to_string())?;
        Ok(v)
    }

    pub fn sr(&self) -> SrConfig {
        SrConfig {
            oversample_count: self.sr_oversample,
            keep_count: self.k,
            metric: SimilarityMetric::BleuRougeAvg,
        }
    }

    /// Assembles and validates the training configuration.
    pub fn train_config(&self) -> Result<TrainConfig, String> {
        let cfg = TrainConfig {
            algo: self.algo,
            strategy: self.strategy,
            variant: self.variant()?,
            latr: self.latr(),
            sampling: self.sampling()?,
            val_sampling: self.eval_sampling()?,
            grpo: GrpoConfig {
                clip_eps: self.clip_eps,
                kl_beta: self.kl_beta,
                learning_rate: self.learning_rate,
            },
            dapo: DapoConfig {
                clip_low: self.clip_low,
                clip_high: self.clip_high,
                oversample_factor: self.oversample_factor,
                learning_rate: self.learning_rate,
            },
            hybrid: HybridSchedule {
                eta0: self.eta0,
                gamma: self.gamma,
            },
            sr: self.sr(),
            steps: self.steps,
            batch_size: self.batch_size,
            val_rollouts: self.val_rollouts,
        };
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    /// Pretty JSON echo of the resolved config, written next to run outputs.
    pub fn to_json(&self) -> Result<String, String> {
        serde_json::to_string_pretty(self)
            .map(|mut s| {
                s.push('\n');
                s
            })
            .map_err(|e| e.to_string())
    }
}
