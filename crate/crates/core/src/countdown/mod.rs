//! Symbolic ground truth for the Countdown task.
//!
//! A problem is a target plus a multiset of operands. Each [`Step`] consumes
//! two operands and inserts its result, so a problem with `K` numbers is
//! solved by exactly `K - 1` steps ending in the single value `target`.
//! Arithmetic is over non-negative integers: subtraction requires
//! `lhs >= rhs` and division must be exact.

mod format;
mod verify;

pub use format::{parse_int, parse_prompt, parse_step_line, render_completion, render_prompt, render_step_line};
pub use verify::{verify_path, Verdict, VerdictKind};

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sentinel budget for [`dfs_with_budget`] meaning "never stop retracting".
pub const UNLIMITED_BUDGET: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StepError {
    #[error("operand(s) of `{0}` not available in the remaining numbers")]
    OperandUnavailable(Step),
    #[error("`{0}` is not a legal exact computation")]
    BadArithmetic(Step),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
}

impl Op {
    pub const ALL: [Op; 4] = [Op::Add, Op::Sub, Op::Mul, Op::Div];

    pub fn symbol(self) -> char {
        match self {
            Op::Add => '+',
            Op::Sub => '-',
            Op::Mul => '*',
            Op::Div => '/',
        }
    }

    pub fn from_symbol(c: char) -> Option<Op> {
        match c {
            '+' => Some(Op::Add),
            '-' => Some(Op::Sub),
            '*' => Some(Op::Mul),
            '/' => Some(Op::Div),
            _ => None,
        }
    }

    pub fn is_commutative(self) -> bool {
        matches!(self, Op::Add | Op::Mul)
    }

    /// Exact result of `lhs op rhs`, or `None` when the operation is illegal
    /// (negative difference, inexact or zero division, overflow).
    pub fn apply(self, lhs: u64, rhs: u64) -> Option<u64> {
        match self {
            Op::Add => lhs.checked_add(rhs),
            Op::Sub => lhs.checked_sub(rhs),
            Op::Mul => lhs.checked_mul(rhs),
            Op::Div => {
                if rhs == 0 || lhs % rhs != 0 {
                    None
                } else {
                    Some(lhs / rhs)
                }
            }
        }
    }
}

/// One arithmetic action `lhs op rhs = result`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Step {
    pub lhs: u64,
    pub op: Op,
    pub rhs: u64,
    pub result: u64,
}

impl Step {
    /// Builds the step with its exact result, if the operation is legal.
    pub fn compute(lhs: u64, op: Op, rhs: u64) -> Option<Step> {
        op.apply(lhs, rhs).map(|result| Step { lhs, op, rhs, result })
    }

    pub fn is_arithmetically_valid(&self) -> bool {
        self.op.apply(self.lhs, self.rhs) == Some(self.result)
    }

    /// Commutative operations are written with the larger operand first.
    pub fn canonical(self) -> Step {
        if self.op.is_commutative() && self.lhs < self.rhs {
            Step { lhs: self.rhs, rhs: self.lhs, ..self }
        } else {
            self
        }
    }
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}{}={}", self.lhs, self.op.symbol(), self.rhs, self.result)
    }
}

impl PartialOrd for Step {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Steps order lexicographically by their rendered text (`"10+2=12" < "2+1=3"`).
impl Ord for Step {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.to_string().cmp(&other.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub numbers: Vec<u64>,
    pub target: u64,
}

impl Problem {
    pub fn new(id: impl Into<String>, numbers: Vec<u64>, target: u64) -> Problem {
        Problem { id: id.into(), numbers, target }
    }

    pub fn k(&self) -> usize {
        self.numbers.len()
    }

    /// Checks the structural invariants: non-empty operands, all `>= 1`, target `>= 1`.
    pub fn is_well_formed(&self) -> bool {
        !self.numbers.is_empty() && self.numbers.iter().all(|&n| n >= 1) && self.target >= 1
    }

    pub fn initial_state(&self) -> CountdownState {
        CountdownState::new(self.numbers.clone(), self.target)
    }

    pub fn is_solvable(&self) -> bool {
        has_solution(&self.initial_state())
    }
}

/// An MDP state: remaining operands (kept sorted ascending) and the trace so far.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CountdownState {
    remaining: Vec<u64>,
    trace: Vec<Step>,
    target: u64,
}

impl CountdownState {
    pub fn new(mut numbers: Vec<u64>, target: u64) -> CountdownState {
        numbers.sort_unstable();
        CountdownState { remaining: numbers, trace: Vec::new(), target }
    }

    pub fn remaining(&self) -> &[u64] {
        &self.remaining
    }

    pub fn trace(&self) -> &[Step] {
        &self.trace
    }

    pub fn target(&self) -> u64 {
        self.target
    }

    pub fn is_goal(&self) -> bool {
        self.remaining.len() == 1 && self.remaining[0] == self.target
    }

    /// True once no further step can be applied.
    pub fn is_terminal(&self) -> bool {
        self.remaining.len() <= 1
    }

    pub fn contains(&self, value: u64) -> bool {
        self.remaining.binary_search(&value).is_ok()
    }

    /// Whether `lhs` and `rhs` can both be drawn, counting multiplicity.
    pub fn has_operands(&self, lhs: u64, rhs: u64) -> bool {
        if lhs == rhs {
            self.remaining.iter().filter(|&&v| v == lhs).count() >= 2
        } else {
            self.contains(lhs) && self.contains(rhs)
        }
    }

    pub fn apply_step(&self, step: Step) -> Result<CountdownState, StepError> {
        let mut next = self.clone();
        next.apply_in_place(step)?;
        Ok(next)
    }

    pub(crate) fn apply_in_place(&mut self, step: Step) -> Result<(), StepError> {
        if !self.has_operands(step.lhs, step.rhs) {
            return Err(StepError::OperandUnavailable(step));
        }
        if !step.is_arithmetically_valid() {
            return Err(StepError::BadArithmetic(step));
        }
        remove_one(&mut self.remaining, step.lhs);
        remove_one(&mut self.remaining, step.rhs);
        insert_sorted(&mut self.remaining, step.result);
        self.trace.push(step);
        Ok(())
    }

    /// Every distinct legal canonical step from this state, sorted by text.
    pub fn legal_steps(&self) -> Vec<Step> {
        let mut steps = BTreeSet::new();
        let r = &self.remaining;
        for i in 0..r.len() {
            for j in 0..r.len() {
                if i == j {
                    continue;
                }
                for op in Op::ALL {
                    if let Some(step) = Step::compute(r[i], op, r[j]) {
                        steps.insert(step.canonical());
                    }
                }
            }
        }
        steps.into_iter().collect()
    }
}

fn remove_one(values: &mut Vec<u64>, v: u64) {
    let idx = values.binary_search(&v).expect("operand checked before removal");
    values.remove(idx);
}

fn insert_sorted(values: &mut Vec<u64>, v: u64) {
    let idx = values.partition_point(|&x| x < v);
    values.insert(idx, v);
}

/// Free-function form of [`CountdownState::apply_step`].
pub fn apply_step(state: &CountdownState, step: Step) -> Result<CountdownState, StepError> {
    state.apply_step(step)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SolutionPath {
    pub steps: Vec<Step>,
}

impl SolutionPath {
    pub fn new(steps: Vec<Step>) -> SolutionPath {
        SolutionPath { steps }
    }

    pub fn canonical(&self) -> SolutionPath {
        SolutionPath { steps: self.steps.iter().map(|s| s.canonical()).collect() }
    }

    /// Folds `apply_step` over the problem's initial state.
    pub fn replay(&self, problem: &Problem) -> Result<CountdownState, StepError> {
        let mut state = problem.initial_state();
        for &step in &self.steps {
            state.apply_in_place(step)?;
        }
        Ok(state)
    }

    pub fn solves(&self, problem: &Problem) -> bool {
        self.steps.len() + 1 == problem.k()
            && self.replay(problem).map(|s| s.is_goal()).unwrap_or(false)
    }

    fn sort_key(&self) -> Vec<String> {
        self.steps.iter().map(Step::to_string).collect()
    }
}

/// All distinct solution paths, canonical and sorted by their step strings.
///
/// Intended for `K <= 5`; the enumeration grows factorially beyond that.
pub fn solve_exhaustive(problem: &Problem) -> Vec<SolutionPath> {
    let mut out = Vec::new();
    collect_solutions(&problem.initial_state(), &mut out);
    let mut keyed: Vec<(Vec<String>, SolutionPath)> =
        out.into_iter().map(|p| (p.sort_key(), p)).collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0));
    keyed.dedup_by(|a, b| a.0 == b.0);
    keyed.into_iter().map(|(_, p)| p).collect()
}

fn collect_solutions(state: &CountdownState, out: &mut Vec<SolutionPath>) {
    if state.is_terminal() {
        if state.is_goal() {
            out.push(SolutionPath::new(state.trace.clone()));
        }
        return;
    }
    for step in state.legal_steps() {
        let mut next = state.clone();
        next.apply_in_place(step).expect("legal step");
        collect_solutions(&next, out);
    }
}

/// Whether any sequence of legal steps from `state` reaches the goal.
pub fn has_solution(state: &CountdownState) -> bool {
    if state.is_terminal() {
        return state.is_goal();
    }
    state.legal_steps().into_iter().any(|step| {
        let mut next = state.clone();
        next.apply_in_place(step).expect("legal step");
        has_solution(&next)
    })
}

/// Budgeted depth-first search over canonical steps in lexicographic order.
///
/// Children are goal-checked as they are generated and terminal dead ends
/// never enter the trace. Every retraction of a trace element (a state whose
/// candidates are exhausted) costs one unit of `budget`; the search gives up
/// when a retraction is needed and the budget is spent.
/// Pass [`UNLIMITED_BUDGET`] for an exhaustive search.
pub fn dfs_with_budget(problem: &Problem, budget: u64) -> Option<SolutionPath> {
    struct Frame {
        state: CountdownState,
        actions: Vec<Step>,
        next: usize,
    }

    let root = problem.initial_state();
    if root.is_goal() {
        return Some(SolutionPath::new(Vec::new()));
    }
    let mut spent = 0u64;
    let mut stack = vec![Frame { actions: root.legal_steps(), state: root, next: 0 }];
    loop {
        let top = stack.last_mut()?;
        if top.next < top.actions.len() {
            let step = top.actions[top.next];
            top.next += 1;
            let mut child = top.state.clone();
            child.apply_in_place(step).expect("legal step");
            if child.is_goal() {
                return Some(SolutionPath::new(child.trace));
            }
            // a terminal non-goal child is rejected without entering the trace
            if !child.is_terminal() {
                stack.push(Frame { actions: child.legal_steps(), state: child, next: 0 });
            }
        } else {
            // dead end: retract the last step
            if stack.len() == 1 {
                return None;
            }
            if spent >= budget {
                return None;
            }
            spent += 1;
            stack.pop();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(lhs: u64, op: char, rhs: u64, result: u64) -> Step {
        Step { lhs, op: Op::from_symbol(op).unwrap(), rhs, result }
    }

    #[test]
    fn apply_step_updates_multiset() {
        let s = CountdownState::new(vec![2, 3, 4, 5], 20);
        let next = s.apply_step(step(4, '*', 5, 20)).unwrap();
        assert_eq!(next.remaining(), &[2, 3, 20]);
        assert_eq!(next.trace().len(), 1);
    }

    #[test]
    fn apply_step_respects_multiplicity() {
        let s = CountdownState::new(vec![7], 14);
        assert!(matches!(s.apply_step(step(7, '+', 7, 14)), Err(StepError::OperandUnavailable(_))));
        let s = CountdownState::new(vec![7, 7], 14);
        assert!(s.apply_step(step(7, '+', 7, 14)).unwrap().is_goal());
    }

    #[test]
    fn apply_step_rejects_bad_arithmetic() {
        let s = CountdownState::new(vec![6, 4], 2);
        assert!(matches!(s.apply_step(step(6, '-', 4, 3)), Err(StepError::BadArithmetic(_))));
        assert!(matches!(s.apply_step(step(4, '-', 6, 0)), Err(StepError::BadArithmetic(_))));
        assert!(matches!(s.apply_step(step(6, '/', 4, 1)), Err(StepError::BadArithmetic(_))));
    }

    #[test]
    fn unknown_operand_wins_over_bad_arithmetic() {
        let s = CountdownState::new(vec![6, 4], 2);
        assert!(matches!(s.apply_step(step(9, '-', 4, 3)), Err(StepError::OperandUnavailable(_))));
    }

    #[test]
    fn solves_one_two_three_four() {
        let p = Problem::new("p", vec![1, 2, 3, 4], 24);
        let sols = solve_exhaustive(&p);
        let wanted = SolutionPath::new(vec![step(1, '*', 2, 2), step(2, '*', 3, 6), step(6, '*', 4, 24)]);
        assert!(sols.contains(&wanted.canonical()));
        assert!(sols.iter().all(|s| s.solves(&p)));
    }

    #[test]
    fn two_ones() {
        let p = Problem::new("p", vec![1, 1], 2);
        assert_eq!(solve_exhaustive(&p), vec![SolutionPath::new(vec![step(1, '+', 1, 2)])]);
        assert!(solve_exhaustive(&Problem::new("q", vec![1, 1], 5)).is_empty());
    }

    #[test]
    fn solutions_are_sorted_and_distinct() {
        let p = Problem::new("p", vec![2, 2, 3, 6], 12);
        let sols = solve_exhaustive(&p);
        let keys: Vec<_> = sols.iter().map(|s| s.sort_key()).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn dfs_finds_trivial_and_respects_zero_budget() {
        let p = Problem::new("p", vec![1, 1], 2);
        for b in [0, 1, 5, UNLIMITED_BUDGET] {
            assert_eq!(dfs_with_budget(&p, b).unwrap().steps, vec![step(1, '+', 1, 2)]);
        }
        // first descent is 5*3=15 leaving [7, 15], which cannot make 1
        let p = Problem::new("q", vec![3, 5, 7], 1);
        assert!(p.is_solvable());
        assert!(dfs_with_budget(&p, 0).is_none());
        let found = dfs_with_budget(&p, UNLIMITED_BUDGET).unwrap();
        assert!(found.solves(&p));
    }

    #[test]
    fn dfs_unlimited_agrees_with_solvability() {
        for target in 1..=30 {
            let p = Problem::new("p", vec![3, 7, 11], target);
            assert_eq!(dfs_with_budget(&p, UNLIMITED_BUDGET).is_some(), p.is_solvable(), "{target}");
        }
    }
}
