//! The Countdown arithmetic environment.
//!
//! A task is a small multiset of integers plus a target; a completion earns
//! reward by emitting, between dedicated answer-delimiter tokens, an
//! arithmetic expression that uses each task number exactly once and
//! evaluates exactly to the target:
//!
//! ```text
//! R = 0.1·R_format + 0.9·R_correctness
//! ```
//!
//! Both indicators are binary, so rewards take exactly the values 0.0, 0.1
//! and 1.0. Evaluation is exact rational arithmetic — no floating point —
//! and a division by zero is an evaluation failure, not a value.
//!
//! The vocabulary is fixed: parentheses, the four operators, answer
//! delimiters, a prompt separator, EOS, and one token per operand value
//! (multi-digit numbers are single tokens). A task's prompt is its numbers
//! in ascending order, a separator, then the target.
//!
//! [`solve_oracle`] enumerates every expression over the task numbers —
//! all orderings, operator assignments and parenthesizations, with the
//! classic exact-division rule — and is both the solvability filter for
//! task generation and the ground-truth generator for tests.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write as _};
use std::path::Path;
use std::sync::{Arc, OnceLock};

use num_rational::Ratio;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{TokenId, Vocabulary};

/// Exact value of an arithmetic expression.
pub type Value = Ratio<i128>;

#[derive(Debug, Error)]
pub enum CountdownError {
    #[error("operand {0} has no vocabulary token (allowed 1..=30)")]
    ValueOutOfRange(i64),
    #[error("a task needs between 1 and 5 numbers, got {got}")]
    BadNumberCount { got: usize },
    #[error("division by zero")]
    DivisionByZero,
    #[error("no solvable task found in {attempts} attempts; ranges look infeasible")]
    RangesInfeasible { attempts: u64 },
    #[error("task io: {0}")]
    Io(#[from] std::io::Error),
    #[error("task decode: {0}")]
    Json(#[from] serde_json::Error),
}

/// Smallest operand value with a vocabulary token.
pub const MIN_VALUE: i64 = 1;
/// Largest operand value with a vocabulary token.
pub const MAX_VALUE: i64 = 30;
/// Exhaustive-enumeration bound for the solution oracle.
pub const MAX_NUMBERS: usize = 5;
/// Rejection-sampling budget for [`generate_task`].
pub const GENERATE_ATTEMPT_CAP: u64 = 100_000;

/// Fixed token ids of the non-numeric vocabulary entries.
pub mod tok {
    use crate::policy::TokenId;

    pub const OPEN: TokenId = TokenId(0);
    pub const CLOSE: TokenId = TokenId(1);
    pub const PLUS: TokenId = TokenId(2);
    pub const MINUS: TokenId = TokenId(3);
    pub const STAR: TokenId = TokenId(4);
    pub const SLASH: TokenId = TokenId(5);
    pub const ANS_OPEN: TokenId = TokenId(6);
    pub const ANS_CLOSE: TokenId = TokenId(7);
    pub const COLON: TokenId = TokenId(8);
    pub const EOS: TokenId = TokenId(9);
    /// Ids `FIRST_NUMBER..FIRST_NUMBER+30` hold the operand values 1..=30.
    pub const FIRST_NUMBER: u32 = 10;
}

/// Token id of an operand value.
pub fn number_token(value: i64) -> Result<TokenId, CountdownError> {
    if !(MIN_VALUE..=MAX_VALUE).contains(&value) {
        return Err(CountdownError::ValueOutOfRange(value));
    }
    Ok(TokenId(tok::FIRST_NUMBER + (value - MIN_VALUE) as u32))
}

/// Operand value of a token id, if it is a number token.
pub fn token_value(token: TokenId) -> Option<i64> {
    let i = token.0;
    if i >= tok::FIRST_NUMBER && i < tok::FIRST_NUMBER + (MAX_VALUE - MIN_VALUE + 1) as u32 {
        Some(MIN_VALUE + (i - tok::FIRST_NUMBER) as i64)
    } else {
        None
    }
}

/// The fixed 40-token Countdown vocabulary.
pub fn countdown_vocab() -> Arc<Vocabulary> {
    static VOCAB: OnceLock<Arc<Vocabulary>> = OnceLock::new();
    VOCAB
        .get_or_init(|| {
            let mut tokens: Vec<String> = vec![
                "(".into(),
                ")".into(),
                "+".into(),
                "-".into(),
                "*".into(),
                "/".into(),
                "<ans>".into(),
                "</ans>".into(),
                ":".into(),
                "<eos>".into(),
            ];
            tokens.extend((MIN_VALUE..=MAX_VALUE).map(|v| v.to_string()));
            Arc::new(Vocabulary::new(tokens, tok::EOS).expect("fixed layout is valid"))
        })
        .clone()
}

/// Binary arithmetic operator.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
}

impl Op {
    pub fn token(self) -> TokenId {
        match self {
            Op::Add => tok::PLUS,
            Op::Sub => tok::MINUS,
            Op::Mul => tok::STAR,
            Op::Div => tok::SLASH,
        }
    }

    fn symbol(self) -> char {
        match self {
            Op::Add => '+',
            Op::Sub => '-',
            Op::Mul => '*',
            Op::Div => '/',
        }
    }
}

/// Arithmetic expression tree over integer leaves.
#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub enum Expression {
    Num(i64),
    Bin {
        op: Op,
        lhs: Box<Expression>,
        rhs: Box<Expression>,
    },
}

impl Expression {
    pub fn bin(op: Op, lhs: Expression, rhs: Expression) -> Self {
        Expression::Bin {
            op,
            lhs: Box::new(lhs),
            rhs: Box::new(rhs),
        }
    }

    /// Renders the expression fully parenthesized, one vocabulary token per
    /// number, operator, or parenthesis.
    pub fn to_tokens(&self) -> Vec<TokenId> {
        let mut out = Vec::new();
        self.push_tokens(&mut out);
        out
    }

    fn push_tokens(&self, out: &mut Vec<TokenId>) {
        match self {
            Expression::Num(n) => {
                out.push(number_token(*n).expect("leaves hold vocabulary values"))
            }
            Expression::Bin { op, lhs, rhs } => {
                out.push(tok::OPEN);
                lhs.push_tokens(out);
                out.push(op.token());
                rhs.push_tokens(out);
                out.push(tok::CLOSE);
            }
        }
    }

    /// Leaf values in left-to-right order.
    pub fn leaf_numbers(&self) -> Vec<i64> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves(&self, out: &mut Vec<i64>) {
        match self {
            Expression::Num(n) => out.push(*n),
            Expression::Bin { lhs, rhs, .. } => {
                lhs.collect_leaves(out);
                rhs.collect_leaves(out);
            }
        }
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expression::Num(n) => write!(f, "{n}"),
            Expression::Bin { op, lhs, rhs } => {
                write!(f, "({lhs}{}{rhs})", op.symbol())
            }
        }
    }
}

/// Exact rational evaluation.
pub fn evaluate(expr: &Expression) -> Result<Value, CountdownError> {
    match expr {
        Expression::Num(n) => Ok(Value::from_integer(*n as i128)),
        Expression::Bin { op, lhs, rhs } => {
            let a = evaluate(lhs)?;
            let b = evaluate(rhs)?;
            Ok(match op {
                Op::Add => a + b,
                Op::Sub => a - b,
                Op::Mul => a * b,
                Op::Div => {
                    if b == Value::from_integer(0) {
                        return Err(CountdownError::DivisionByZero);
                    }
                    a / b
                }
            })
        }
    }
}

/// One Countdown instance: a number multiset and a target.
#[derive(Debug)]
pub struct CountdownTask {
    numbers: Vec<i64>,
    target: i64,
    prompt_tokens: Vec<TokenId>,
    solutions: OnceLock<Vec<Expression>>,
}

impl CountdownTask {
    /// Validates operand and target values against the vocabulary and
    /// canonicalizes the numbers in ascending order.
    pub fn new(mut numbers: Vec<i64>, target: i64) -> Result<Self, CountdownError> {
        if numbers.is_empty() || numbers.len() > MAX_NUMBERS {
            return Err(CountdownError::BadNumberCount {
                got: numbers.len(),
            });
        }
        numbers.sort_unstable();
        let mut prompt_tokens = Vec::with_capacity(numbers.len() + 2);
        for &n in &numbers {
            prompt_tokens.push(number_token(n)?);
        }
        prompt_tokens.push(tok::COLON);
        prompt_tokens.push(number_token(target)?);
        Ok(Self {
            numbers,
            target,
            prompt_tokens,
            solutions: OnceLock::new(),
        })
    }

    /// Numbers in ascending order.
    pub fn numbers(&self) -> &[i64] {
        &self.numbers
    }

    pub fn target(&self) -> i64 {
        self.target
    }

    /// Prompt encoding: the numbers ascending, a separator, the target.
    pub fn prompt_tokens(&self) -> &[TokenId] {
        &self.prompt_tokens
    }

    /// A stable tag for RNG stream derivation, unique per (numbers, target)
    /// within the allowed value ranges.
    pub fn stream_tag(&self) -> u64 {
        let mut tag = self.target as u64;
        for &n in &self.numbers {
            tag = tag * 31 + n as u64;
        }
        tag
    }
}

impl Clone for CountdownTask {
    fn clone(&self) -> Self {
        let solutions = OnceLock::new();
        if let Some(v) = self.solutions.get() {
            let _ = solutions.set(v.clone());
        }
        Self {
            numbers: self.numbers.clone(),
            target: self.target,
            prompt_tokens: self.prompt_tokens.clone(),
            solutions,
        }
    }
}

impl PartialEq for CountdownTask {
    fn eq(&self, other: &Self) -> bool {
        self.numbers == other.numbers && self.target == other.target
    }
}

impl Eq for CountdownTask {}

#[derive(Serialize, Deserialize)]
struct TaskRecord {
    numbers: Vec<i64>,
    target: i64,
}

impl Serialize for CountdownTask {
    fn serialize<Ser: serde::Serializer>(&self, s: Ser) -> Result<Ser::Ok, Ser::Error> {
        TaskRecord {
            numbers: self.numbers.clone(),
            target: self.target,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for CountdownTask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rec = TaskRecord::deserialize(d)?;
        CountdownTask::new(rec.numbers, rec.target).map_err(serde::de::Error::custom)
    }
}

/// Every expression over the task numbers that evaluates exactly to the
/// target, under the classic rule that division must be exact (and defined)
/// at the node where it occurs. Memoized per task; deterministic order.
pub fn solve_oracle(task: &CountdownTask) -> &[Expression] {
    task.solutions
        .get_or_init(|| enumerate_solutions(&task.numbers, task.target))
}

fn enumerate_solutions(numbers: &[i64], target: i64) -> Vec<Expression> {
    let mut orderings = Vec::new();
    let mut scratch = Vec::with_capacity(numbers.len());
    let mut pool = numbers.to_vec();
    pool.sort_unstable();
    distinct_permutations(&pool, &mut vec![false; numbers.len()], &mut scratch, &mut orderings);

    let mut seen: HashSet<Expression> = HashSet::new();
    let mut out: Vec<Expression> = Vec::new();
    for ordering in &orderings {
        for (expr, value) in integer_trees(ordering) {
            if value == target as i128 && seen.insert(expr.clone()) {
                out.push(expr);
            }
        }
    }
    out.sort_by_key(|e| e.to_tokens());
    out
}

/// Permutations of a sorted multiset without duplicates.
fn distinct_permutations(
    pool: &[i64],
    used: &mut [bool],
    scratch: &mut Vec<i64>,
    out: &mut Vec<Vec<i64>>,
) {
    if scratch.len() == pool.len() {
        out.push(scratch.clone());
        return;
    }
    let mut last: Option<i64> = None;
    for i in 0..pool.len() {
        if used[i] || last == Some(pool[i]) {
            continue;
        }
        last = Some(pool[i]);
        used[i] = true;
        scratch.push(pool[i]);
        distinct_permutations(pool, used, scratch, out);
        scratch.pop();
        used[i] = false;
    }
}

/// All integer-valued expression trees over an ordered leaf list, applying
/// the exact-division rule at every division node.
fn integer_trees(leaves: &[i64]) -> Vec<(Expression, i128)> {
    if leaves.len() == 1 {
        return vec![(Expression::Num(leaves[0]), leaves[0] as i128)];
    }
    let mut out = Vec::new();
    for split in 1..leaves.len() {
        for (le, lv) in integer_trees(&leaves[..split]) {
            for (re, rv) in integer_trees(&leaves[split..]) {
                for op in [Op::Add, Op::Sub, Op::Mul, Op::Div] {
                    let value = match op {
                        Op::Add => lv + rv,
                        Op::Sub => lv - rv,
                        Op::Mul => lv * rv,
                        Op::Div => {
                            if rv == 0 || lv % rv != 0 {
                                continue;
                            }
                            lv / rv
                        }
                    };
                    out.push((Expression::bin(op, le.clone(), re.clone()), value));
                }
            }
        }
    }
    out
}

/// Rejection-samples a solvable task; deterministic under the caller's RNG.
pub fn generate_task<R: Rng>(
    rng: &mut R,
    count: usize,
    value_range: std::ops::RangeInclusive<i64>,
    target_range: std::ops::RangeInclusive<i64>,
) -> Result<CountdownTask, CountdownError> {
    for _ in 0..GENERATE_ATTEMPT_CAP {
        let numbers: Vec<i64> = (0..count)
            .map(|_| rng.gen_range(value_range.clone()))
            .collect();
        let target = rng.gen_range(target_range.clone());
        let task = CountdownTask::new(numbers, target)?;
        if !solve_oracle(&task).is_empty() {
            return Ok(task);
        }
    }
    Err(CountdownError::RangesInfeasible {
        attempts: GENERATE_ATTEMPT_CAP,
    })
}

/// What [`parse_completion`] recovered from a completion.
#[derive(Clone, Debug, PartialEq)]
pub struct ParseOutcome {
    /// True iff the completion holds exactly one well-delimited answer
    /// region whose contents parse as an arithmetic expression.
    pub format: bool,
    /// The parsed expression; present iff `format` is true.
    pub expr: Option<Expression>,
}

/// Scans for exactly one `<ans> … </ans>` region and parses its contents.
///
/// Tokens outside the region are unrestricted. Extra or missing delimiters,
/// an empty region, or any trailing/ill-formed expression syntax inside the
/// region all map to `format = false`; there are no parse errors.
pub fn parse_completion(tokens: &[TokenId]) -> ParseOutcome {
    let malformed = ParseOutcome {
        format: false,
        expr: None,
    };
    let opens: Vec<usize> = positions(tokens, tok::ANS_OPEN);
    let closes: Vec<usize> = positions(tokens, tok::ANS_CLOSE);
    if opens.len() != 1 || closes.len() != 1 || opens[0] + 1 >= closes[0] {
        return malformed;
    }
    let inner = &tokens[opens[0] + 1..closes[0]];
    match parse_expression(inner) {
        Some(expr) => ParseOutcome {
            format: true,
            expr: Some(expr),
        },
        None => malformed,
    }
}

fn positions(tokens: &[TokenId], needle: TokenId) -> Vec<usize> {
    tokens
        .iter()
        .enumerate()
        .filter(|&(_, &t)| t == needle)
        .map(|(i, _)| i)
        .collect()
}

/// Recursive-descent parser with the usual precedence: `expr := term ((+|-)
/// term)*`, `term := factor ((*|/) factor)*`, `factor := number | ( expr )`.
/// Fully parenthesized and precedence-form expressions both parse.
fn parse_expression(tokens: &[TokenId]) -> Option<Expression> {
    let mut p = Parser { tokens, pos: 0 };
    let expr = p.expr()?;
    if p.pos == tokens.len() {
        Some(expr)
    } else {
        None
    }
}

struct Parser<'a> {
    tokens: &'a [TokenId],
    pos: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<TokenId> {
        self.tokens.get(self.pos).copied()
    }

    fn bump(&mut self) -> Option<TokenId> {
        let t = self.peek()?;
        self.pos += 1;
        Some(t)
    }

    fn expr(&mut self) -> Option<Expression> {
        let mut lhs = self.term()?;
        while let Some(t) = self.peek() {
            let op = match t {
                tok::PLUS => Op::Add,
                tok::MINUS => Op::Sub,
                _ => break,
            };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Expression::bin(op, lhs, rhs);
        }
        Some(lhs)
    }

    fn term(&mut self) -> Option<Expression> {
        let mut lhs = self.factor()?;
        while let Some(t) = self.peek() {
            let op = match t {
                tok::STAR => Op::Mul,
                tok::SLASH => Op::Div,
                _ => break,
            };
            self.pos += 1;
            let rhs = self.factor()?;
            lhs = Expression::bin(op, lhs, rhs);
        }
        Some(lhs)
    }

    fn factor(&mut self) -> Option<Expression> {
        match self.bump()? {
            tok::OPEN => {
                let inner = self.expr()?;
                if self.bump()? == tok::CLOSE {
                    Some(inner)
                } else {
                    None
                }
            }
            t => token_value(t).map(Expression::Num),
        }
    }
}

/// Reward decomposition for one completion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format: bool,
    pub correctness: bool,
    /// `0.1·format + 0.9·correctness`, always exactly 0.0, 0.1 or 1.0.
    pub total: f64,
}

/// Scores a completion: format per [`parse_completion`]; correctness iff the
/// expression additionally uses each task number exactly once and evaluates
/// exactly to the target.
pub fn reward(task: &CountdownTask, completion: &[TokenId]) -> RewardBreakdown {
    let parsed = parse_completion(completion);
    let correctness = parsed
        .expr
        .as_ref()
        .map(|expr| {
            let mut used = expr.leaf_numbers();
            used.sort_unstable();
            used == task.numbers
                && evaluate(expr)
                    .map(|v| v == Value::from_integer(task.target as i128))
                    .unwrap_or(false)
        })
        .unwrap_or(false);
    let total = if correctness {
        1.0
    } else if parsed.format {
        0.1
    } else {
        0.0
    };
    RewardBreakdown {
        format: parsed.format,
        correctness,
        total,
    }
}

/// Key under which completions are considered "the same answer".
#[derive(PartialEq, Eq, Hash)]
enum AnswerClass {
    /// Well-formed with a defined value: compared by exact value.
    Value(Value),
    /// Everything else: compared by literal token string.
    Literal(Vec<TokenId>),
}

/// Number of semantically distinct answers in a group: well-formed
/// completions are grouped by exact evaluated value; the rest (including
/// division-by-zero answers) by literal token string.
pub fn distinct_answers<T: AsRef<[TokenId]>>(completions: &[T]) -> usize {
    let mut classes: HashSet<AnswerClass> = HashSet::with_capacity(completions.len());
    for c in completions {
        let tokens = c.as_ref();
        let class = match parse_completion(tokens).expr.map(|e| evaluate(&e)) {
            Some(Ok(v)) => AnswerClass::Value(v),
            _ => AnswerClass::Literal(tokens.to_vec()),
        };
        classes.insert(class);
    }
    classes.len()
}

/// A canonical full completion for an expression: `<ans> expr </ans> <eos>`.
pub fn completion_for(expr: &Expression) -> Vec<TokenId> {
    let mut out = vec![tok::ANS_OPEN];
    out.extend(expr.to_tokens());
    out.push(tok::ANS_CLOSE);
    out.push(tok::EOS);
    out
}

/// Writes tasks as JSON lines `{"numbers": [...], "target": N}`.
pub fn write_tasks(path: &Path, tasks: &[CountdownTask]) -> Result<(), CountdownError> {
    let mut w = BufWriter::new(File::create(path)?);
    for task in tasks {
        serde_json::to_writer(&mut w, task)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a JSON-lines task file; blank lines are ignored.
pub fn read_tasks(path: &Path) -> Result<Vec<CountdownTask>, CountdownError> {
    let reader = BufReader::new(File::open(path)?);
    let mut tasks = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        tasks.push(serde_json::from_str(&line)?);
    }
    Ok(tasks)
}
