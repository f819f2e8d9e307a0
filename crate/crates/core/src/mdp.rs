//! Exact finite MDPs: validation, value iteration and the augmented
//! (delayed) construction over `S × A^d`.

use std::fmt;

use thiserror::Error;

use crate::scalar::{argmax_lowest, Scalar};

/// Default cap on the number of augmented states `|S|·|A|^d`.
pub const DEFAULT_STATE_CAP: usize = 1_000_000;
/// Default iteration cap for value iteration.
pub const DEFAULT_MAX_ITERATIONS: usize = 1_000_000;
/// Tolerance used by `validate` for probability sums.
pub const STOCHASTIC_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum MdpError {
    #[error("value iteration did not converge after {iterations} iterations (residual {residual})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("augmented state count {count} exceeds cap {cap}")]
    StateCapExceeded { count: u128, cap: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// A single broken invariant reported by [`TabularMdp::validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    RowSum { state: usize, action: usize, sum: f64 },
    ProbabilityRange { state: usize, action: usize, next: usize, p: f64 },
    IndexOutOfRange { state: usize, action: usize, next: usize },
    InitialSum { sum: f64 },
    InitialRange { state: usize, p: f64 },
    Discount { gamma: f64 },
    TerminalNotAbsorbing { state: usize, action: usize },
    TerminalReward { state: usize, action: usize, reward: f64 },
    NonFiniteReward { state: usize, action: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::RowSum { state, action, sum } => {
                write!(f, "P[{state}][{action}] sums to {sum}, expected 1")
            }
            Violation::ProbabilityRange { state, action, next, p } => {
                write!(f, "P[{state}][{action}][{next}] = {p} outside [0, 1]")
            }
            Violation::IndexOutOfRange { state, action, next } => {
                write!(f, "P[{state}][{action}] references missing state {next}")
            }
            Violation::InitialSum { sum } => write!(f, "initial distribution sums to {sum}"),
            Violation::InitialRange { state, p } => {
                write!(f, "initial probability {p} of state {state} outside [0, 1]")
            }
            Violation::Discount { gamma } => write!(f, "discount {gamma} outside (0, 1)"),
            Violation::TerminalNotAbsorbing { state, action } => {
                write!(f, "terminal state {state} does not self-loop under action {action}")
            }
            Violation::TerminalReward { state, action, reward } => {
                write!(f, "terminal state {state} pays {reward} under action {action}")
            }
            Violation::NonFiniteReward { state, action } => {
                write!(f, "r[{state}][{action}] is not finite")
            }
        }
    }
}

/// Finite MDP `(S, A, P, r, μ, γ)` with terminal flags.
///
/// Transition rows are stored sparsely as `(next_state, probability)` pairs,
/// indexed by `state * num_actions + action`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp<T> {
    num_states: usize,
    num_actions: usize,
    transitions: Vec<Vec<(usize, T)>>,
    reward: Vec<T>,
    initial: Vec<T>,
    discount: T,
    terminal: Vec<bool>,
}

impl<T: Scalar> TabularMdp<T> {
    /// Empty MDP: no transitions, zero rewards, initial mass on state 0.
    pub fn new(num_states: usize, num_actions: usize, discount: T) -> Self {
        assert!(num_states > 0 && num_actions > 0, "MDP needs states and actions");
        let mut initial = vec![T::zero(); num_states];
        initial[0] = T::one();
        Self {
            num_states,
            num_actions,
            transitions: vec![Vec::new(); num_states * num_actions],
            reward: vec![T::zero(); num_states * num_actions],
            initial,
            discount,
            terminal: vec![false; num_states],
        }
    }

    /// Builds an MDP from a dense tensor `P[s][a][s']` and matrix `r[s][a]`.
    pub fn from_dense(
        transition: &[Vec<Vec<T>>],
        reward: &[Vec<T>],
        initial: Vec<T>,
        discount: T,
    ) -> Result<Self, MdpError> {
        let num_states = transition.len();
        let num_actions = transition.first().map_or(0, Vec::len);
        if num_states == 0 || num_actions == 0 {
            return Err(MdpError::InvalidArgument("empty transition tensor".into()));
        }
        if reward.len() != num_states || initial.len() != num_states {
            return Err(MdpError::InvalidArgument("reward/initial shape mismatch".into()));
        }
        let mut mdp = Self::new(num_states, num_actions, discount);
        for s in 0..num_states {
            if transition[s].len() != num_actions || reward[s].len() != num_actions {
                return Err(MdpError::InvalidArgument(format!("row {s} has wrong action count")));
            }
            for a in 0..num_actions {
                mdp.set_dense_row(s, a, &transition[s][a])?;
                mdp.set_reward(s, a, reward[s][a]);
            }
        }
        mdp.initial = initial;
        Ok(mdp)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn discount(&self) -> T {
        self.discount
    }

    pub fn initial(&self) -> &[T] {
        &self.initial
    }

    pub fn terminal(&self) -> &[bool] {
        &self.terminal
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    #[inline]
    pub fn row(&self, s: usize, a: usize) -> &[(usize, T)] {
        &self.transitions[s * self.num_actions + a]
    }

    #[inline]
    pub fn reward(&self, s: usize, a: usize) -> T {
        self.reward[s * self.num_actions + a]
    }

    /// `P[s][a][next]`.
    pub fn prob(&self, s: usize, a: usize, next: usize) -> T {
        self.row(s, a)
            .iter()
            .filter(|(n, _)| *n == next)
            .map(|&(_, p)| p)
            .fold(T::zero(), |acc, p| acc + p)
    }

    pub fn dense_row(&self, s: usize, a: usize) -> Vec<T> {
        let mut out = vec![T::zero(); self.num_states];
        for &(n, p) in self.row(s, a) {
            if n < self.num_states {
                out[n] = out[n] + p;
            }
        }
        out
    }

    /// Replaces the row `P[s][a]`. Entries with equal targets are merged and
    /// zero entries dropped.
    pub fn set_row(&mut self, s: usize, a: usize, mut row: Vec<(usize, T)>) {
        row.sort_by_key(|&(n, _)| n);
        let mut merged: Vec<(usize, T)> = Vec::with_capacity(row.len());
        for (n, p) in row {
            match merged.last_mut() {
                Some((last, acc)) if *last == n => *acc = *acc + p,
                _ => merged.push((n, p)),
            }
        }
        merged.retain(|&(_, p)| p != T::zero());
        self.transitions[s * self.num_actions + a] = merged;
    }

    pub fn set_dense_row(&mut self, s: usize, a: usize, dense: &[T]) -> Result<(), MdpError> {
        if dense.len() != self.num_states {
            return Err(MdpError::InvalidArgument(format!(
                "row P[{s}][{a}] has {} entries, expected {}",
                dense.len(),
                self.num_states
            )));
        }
        let row = dense
            .iter()
            .enumerate()
            .map(|(n, &p)| (n, p))
            .collect();
        self.set_row(s, a, row);
        Ok(())
    }

    pub fn set_reward(&mut self, s: usize, a: usize, r: T) {
        self.reward[s * self.num_actions + a] = r;
    }

    pub fn set_initial(&mut self, initial: Vec<T>) {
        assert_eq!(initial.len(), self.num_states);
        self.initial = initial;
    }

    /// Marks `s` terminal and makes it absorbing with zero reward.
    pub fn make_terminal(&mut self, s: usize) {
        self.terminal[s] = true;
        for a in 0..self.num_actions {
            self.set_row(s, a, vec![(s, T::one())]);
            self.set_reward(s, a, T::zero());
        }
    }

    pub fn set_terminal_flag(&mut self, s: usize, flag: bool) {
        self.terminal[s] = flag;
    }

    /// True when every transition row is a point mass.
    pub fn is_deterministic(&self) -> bool {
        let tol = T::from_f64_lossy(STOCHASTIC_TOL);
        self.transitions
            .iter()
            .all(|row| row.len() == 1 && (row[0].1 - T::one()).abs() <= tol)
    }

    /// Copy with `shift` added to the reward of every non-terminal state.
    pub fn shift_rewards(&self, shift: T) -> Self {
        let mut out = self.clone();
        for s in 0..self.num_states {
            if self.terminal[s] {
                continue;
            }
            for a in 0..self.num_actions {
                out.set_reward(s, a, self.reward(s, a) + shift);
            }
        }
        out
    }

    /// Every broken invariant; empty iff the MDP is well formed.
    pub fn validate(&self) -> Vec<Violation> {
        let tol = STOCHASTIC_TOL;
        let mut out = Vec::new();
        let gamma = self.discount.to_f64_lossy();
        if !(gamma > 0.0 && gamma < 1.0) {
            out.push(Violation::Discount { gamma });
        }
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                let mut sum = 0.0;
                for &(n, p) in self.row(s, a) {
                    let p = p.to_f64_lossy();
                    if n >= self.num_states {
                        out.push(Violation::IndexOutOfRange { state: s, action: a, next: n });
                    }
                    if !(0.0..=1.0).contains(&p) {
                        out.push(Violation::ProbabilityRange { state: s, action: a, next: n, p });
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > tol {
                    out.push(Violation::RowSum { state: s, action: a, sum });
                }
                let r = self.reward(s, a).to_f64_lossy();
                if !r.is_finite() {
                    out.push(Violation::NonFiniteReward { state: s, action: a });
                }
                if self.terminal[s] {
                    let stays = self.prob(s, a, s).to_f64_lossy();
                    if (stays - 1.0).abs() > tol {
                        out.push(Violation::TerminalNotAbsorbing { state: s, action: a });
                    }
                    if r != 0.0 {
                        out.push(Violation::TerminalReward { state: s, action: a, reward: r });
                    }
                }
            }
        }
        let mut init_sum = 0.0;
        for (s, &p) in self.initial.iter().enumerate() {
            let p = p.to_f64_lossy();
            if !(0.0..=1.0).contains(&p) {
                out.push(Violation::InitialRange { state: s, p });
            }
            init_sum += p;
        }
        if (init_sum - 1.0).abs() > tol {
            out.push(Violation::InitialSum { sum: init_sum });
        }
        out
    }

    /// Serializes to the line-oriented text format:
    ///
    /// ```text
    /// mdp <num_states> <num_actions> <gamma>
    /// <P[s][a][0]> ... <P[s][a][S-1]> <r[s][a]>     (one line per (s, a), s-major)
    /// init <mu_0> ... <mu_{S-1}>
    /// terminal <s> <s> ...
    /// ```
    pub fn to_text(&self) -> String {
        let mut out = format!("mdp {} {} {}\n", self.num_states, self.num_actions, self.discount);
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                let row = self.dense_row(s, a);
                push_row(&mut out, &row);
                out.push(' ');
                out.push_str(&self.reward(s, a).to_string());
                out.push('\n');
            }
        }
        out.push_str("init ");
        push_row(&mut out, &self.initial);
        out.push('\n');
        out.push_str("terminal");
        for (s, _) in self.terminal.iter().enumerate().filter(|(_, &t)| t) {
            out.push(' ');
            out.push_str(&s.to_string());
        }
        out.push('\n');
        out
    }

    pub fn from_text(text: &str) -> Result<Self, MdpError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| parse_err(0, "missing header"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 || fields[0] != "mdp" {
            return Err(parse_err(1, "expected `mdp <S> <A> <gamma>`"));
        }
        let num_states: usize = parse_field(fields[1], 1)?;
        let num_actions: usize = parse_field(fields[2], 1)?;
        let discount: T = parse_field(fields[3], 1)?;
        if num_states == 0 || num_actions == 0 {
            return Err(parse_err(1, "state and action counts must be positive"));
        }
        let mut mdp = Self::new(num_states, num_actions, discount);
        for s in 0..num_states {
            for a in 0..num_actions {
                let (idx, line) = lines
                    .next()
                    .ok_or_else(|| parse_err(0, "truncated transition block"))?;
                let values: Vec<T> = parse_values(line.split_whitespace(), idx + 1)?;
                if values.len() != num_states + 1 {
                    return Err(parse_err(idx + 1, "wrong number of entries in transition row"));
                }
                mdp.set_dense_row(s, a, &values[..num_states])?;
                mdp.set_reward(s, a, values[num_states]);
            }
        }
        for (idx, line) in lines {
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("init") => {
                    let init: Vec<T> = parse_values(parts, idx + 1)?;
                    if init.len() != num_states {
                        return Err(parse_err(idx + 1, "initial distribution has wrong length"));
                    }
                    mdp.initial = init;
                }
                Some("terminal") => {
                    for p in parts {
                        let s: usize = parse_field(p, idx + 1)?;
                        if s >= num_states {
                            return Err(parse_err(idx + 1, "terminal index out of range"));
                        }
                        mdp.terminal[s] = true;
                    }
                }
                _ => return Err(parse_err(idx + 1, "unexpected line")),
            }
        }
        Ok(mdp)
    }
}

pub(crate) fn push_row<T: fmt::Display>(out: &mut String, row: &[T]) {
    for (i, v) in row.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(&v.to_string());
    }
}

pub(crate) fn parse_err(line: usize, message: &str) -> MdpError {
    MdpError::Parse { line, message: message.to_string() }
}

pub(crate) fn parse_field<V: std::str::FromStr>(field: &str, line: usize) -> Result<V, MdpError> {
    field
        .parse()
        .map_err(|_| parse_err(line, &format!("cannot parse `{field}`")))
}

pub(crate) fn parse_values<'a, V: std::str::FromStr>(
    fields: impl Iterator<Item = &'a str>,
    line: usize,
) -> Result<Vec<V>, MdpError> {
    fields.map(|f| parse_field(f, line)).collect()
}

/// Exact solution of the Bellman optimality equation.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueSolution<T> {
    pub v_star: Vec<T>,
    /// Row-major `(state, action)` matrix.
    pub q_star: Vec<T>,
    pub num_actions: usize,
    pub iterations: usize,
    /// Sup-norm change of the final sweep.
    pub residual: T,
}

impl<T: Scalar> ValueSolution<T> {
    pub fn q_row(&self, s: usize) -> &[T] {
        &self.q_star[s * self.num_actions..(s + 1) * self.num_actions]
    }

    pub fn q(&self, s: usize, a: usize) -> T {
        self.q_star[s * self.num_actions + a]
    }

    pub fn num_states(&self) -> usize {
        self.v_star.len()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ValueIterationOptions<T> {
    pub tol: T,
    pub max_iterations: usize,
}

/// Synchronous value iteration on Q.
///
/// Stops once successive sweeps differ by at most
/// `tol · min(1, (1-γ)/(2γ))` in sup-norm, which bounds both the reported
/// residual and the distance to the true fixed point by `tol`.
pub fn value_iteration<T: Scalar>(mdp: &TabularMdp<T>, tol: T) -> Result<ValueSolution<T>, MdpError> {
    value_iteration_with(mdp, ValueIterationOptions { tol, max_iterations: DEFAULT_MAX_ITERATIONS })
}

pub fn value_iteration_with<T: Scalar>(
    mdp: &TabularMdp<T>,
    opts: ValueIterationOptions<T>,
) -> Result<ValueSolution<T>, MdpError> {
    if !(opts.tol > T::zero()) {
        return Err(MdpError::InvalidArgument("tolerance must be positive".into()));
    }
    let gamma = mdp.discount();
    let two = T::one() + T::one();
    let contraction = ((T::one() - gamma) / (two * gamma)).min(T::one());
    let threshold = opts.tol * contraction;
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let mut q = vec![T::zero(); ns * na];
    let mut v = vec![T::zero(); ns];
    let mut next_q = vec![T::zero(); ns * na];
    let mut residual = T::infinity();
    for iteration in 1..=opts.max_iterations {
        residual = T::zero();
        for s in 0..ns {
            for a in 0..na {
                let expected = mdp
                    .row(s, a)
                    .iter()
                    .fold(T::zero(), |acc, &(n, p)| acc + p * v[n]);
                let value = mdp.reward(s, a) + gamma * expected;
                let idx = s * na + a;
                residual = residual.max((value - q[idx]).abs());
                next_q[idx] = value;
            }
        }
        std::mem::swap(&mut q, &mut next_q);
        for s in 0..ns {
            v[s] = q[s * na..(s + 1) * na]
                .iter()
                .copied()
                .fold(T::neg_infinity(), T::max);
        }
        if residual <= threshold {
            return Ok(ValueSolution { v_star: v, q_star: q, num_actions: na, iterations: iteration, residual });
        }
    }
    Err(MdpError::NotConverged { iterations: opts.max_iterations, residual: residual.to_f64_lossy() })
}

/// Tie-breaking rule for argmax over actions: lowest index among all actions
/// within `tol` of the maximum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TieBreak<T> {
    pub tol: T,
}

impl<T: Scalar> Default for TieBreak<T> {
    fn default() -> Self {
        Self { tol: T::zero() }
    }
}

pub fn greedy_policy<T: Scalar>(sol: &ValueSolution<T>, tie_break: TieBreak<T>) -> Vec<usize> {
    (0..sol.num_states())
        .map(|s| argmax_lowest(sol.q_row(s), tie_break.tol).unwrap_or(0))
        .collect()
}

/// Mixed-radix codec for augmented states `(s, a_1, …, a_d)`: the base state
/// is the most significant digit, then the queue from oldest to newest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentedCodec {
    pub num_states: usize,
    pub num_actions: usize,
    pub delay: usize,
    queue_count: usize,
}

impl AugmentedCodec {
    pub fn new(num_states: usize, num_actions: usize, delay: usize, cap: usize) -> Result<Self, MdpError> {
        let count = (num_states as u128) * (num_actions as u128).pow(delay as u32);
        if count > cap as u128 {
            return Err(MdpError::StateCapExceeded { count, cap });
        }
        Ok(Self { num_states, num_actions, delay, queue_count: num_actions.pow(delay as u32) })
    }

    pub fn len(&self) -> usize {
        self.num_states * self.queue_count
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn queue_count(&self) -> usize {
        self.queue_count
    }

    pub fn encode(&self, s: usize, queue: &[usize]) -> usize {
        debug_assert_eq!(queue.len(), self.delay);
        s * self.queue_count + self.encode_queue(queue)
    }

    pub fn encode_queue(&self, queue: &[usize]) -> usize {
        queue.iter().fold(0, |acc, &a| acc * self.num_actions + a)
    }

    pub fn decode_queue(&self, mut code: usize) -> Vec<usize> {
        let mut queue = vec![0; self.delay];
        for slot in queue.iter_mut().rev() {
            *slot = code % self.num_actions;
            code /= self.num_actions;
        }
        queue
    }

    pub fn decode(&self, index: usize) -> (usize, Vec<usize>) {
        (index / self.queue_count, self.decode_queue(index % self.queue_count))
    }

    /// Index of the state reached by popping the head and pushing `action`.
    pub fn shift(&self, next_base: usize, queue_code: usize, action: usize) -> usize {
        let tail = if self.delay == 0 { 0 } else { queue_code % (self.queue_count / self.num_actions) };
        let code = if self.delay == 0 { 0 } else { tail * self.num_actions + action };
        next_base * self.queue_count + code
    }

    /// Head (oldest queued action) of an encoded queue.
    pub fn head(&self, queue_code: usize) -> usize {
        queue_code / (self.queue_count / self.num_actions)
    }
}

#[derive(Debug, Clone)]
pub struct AmdpOptions<T> {
    pub state_cap: usize,
    /// Distribution over encoded queues (`|A|^d` entries); uniform when `None`.
    pub initial_queue: Option<Vec<T>>,
}

impl<T> Default for AmdpOptions<T> {
    fn default() -> Self {
        Self { state_cap: DEFAULT_STATE_CAP, initial_queue: None }
    }
}

/// Augmented MDP over `S × A^d` with the queue-shift transition and the
/// asynchronized reward `r'((s, a_1, …), a) = r(s, a_1)`.
pub fn build_amdp<T: Scalar>(mdp: &TabularMdp<T>, delay: usize) -> Result<TabularMdp<T>, MdpError> {
    build_amdp_with(mdp, delay, &AmdpOptions::default())
}

pub fn build_amdp_with<T: Scalar>(
    mdp: &TabularMdp<T>,
    delay: usize,
    opts: &AmdpOptions<T>,
) -> Result<TabularMdp<T>, MdpError> {
    let codec = AugmentedCodec::new(mdp.num_states(), mdp.num_actions(), delay, opts.state_cap)?;
    if delay == 0 {
        return Ok(mdp.clone());
    }
    let na = mdp.num_actions();
    let queue_dist = match &opts.initial_queue {
        Some(dist) if dist.len() == codec.queue_count() => dist.clone(),
        Some(_) => return Err(MdpError::InvalidArgument("initial queue distribution has wrong length".into())),
        None => vec![T::one() / T::from_usize(codec.queue_count()).unwrap(); codec.queue_count()],
    };
    let mut out = TabularMdp::new(codec.len(), na, mdp.discount());
    let mut initial = vec![T::zero(); codec.len()];
    for s in 0..mdp.num_states() {
        for code in 0..codec.queue_count() {
            let index = s * codec.queue_count() + code;
            initial[index] = mdp.initial()[s] * queue_dist[code];
            let head = codec.head(code);
            let reward = mdp.reward(s, head);
            for a in 0..na {
                let row = mdp
                    .row(s, head)
                    .iter()
                    .map(|&(next, p)| (codec.shift(next, code, a), p))
                    .collect();
                out.set_row(index, a, row);
                out.set_reward(index, a, reward);
            }
        }
    }
    out.set_initial(initial);
    Ok(out)
}
