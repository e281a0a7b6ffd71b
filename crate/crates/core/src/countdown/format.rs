//! Canonical text rendering of problems and solution traces.
//!
//! ```text
//! Target: 24 | Numbers: 1 2 3 4
//! 1*2=2 (left: 2 3 4)
//! 2*3=6 (left: 4 6)
//! 6*4=24 (left: 24)
//! Goal: 24
//! ```
//!
//! Step lines carry the sorted multiset of operands left after the step, so
//! every intermediate state can be checked. Integers are written without
//! sign or leading zeros.

use std::fmt::Write;

use super::{Op, Problem, SolutionPath, Step};

pub fn render_prompt(problem: &Problem) -> String {
    let mut s = format!("Target: {} | Numbers:", problem.target);
    for n in &problem.numbers {
        write!(s, " {n}").unwrap();
    }
    s.push('\n');
    s
}

/// Inverse of [`render_prompt`]; the problem id is left empty.
pub fn parse_prompt(prompt: &str) -> Option<Problem> {
    let rest = prompt.strip_suffix('\n')?.strip_prefix("Target: ")?;
    let (target, numbers) = rest.split_once(" | Numbers:")?;
    Some(Problem::new("", parse_int_list(numbers)?, parse_int(target)?))
}

/// `lhs op rhs = result (left: ...)\n` with `left` already sorted ascending.
pub fn render_step_line(step: &Step, left: &[u64]) -> String {
    let mut s = format!("{step} (left:");
    for v in left {
        write!(s, " {v}").unwrap();
    }
    s.push_str(")\n");
    s
}

/// Renders the completion for a path; the path must replay on `problem`.
pub fn render_completion(problem: &Problem, path: &SolutionPath) -> String {
    let mut state = problem.initial_state();
    let mut s = String::new();
    for &step in &path.steps {
        state.apply_in_place(step).expect("render requires a replayable path");
        s.push_str(&render_step_line(&step, state.remaining()));
    }
    writeln!(s, "Goal: {}", problem.target).unwrap();
    s
}

/// Parses a canonical non-negative integer (no sign, no leading zeros).
pub fn parse_int(s: &str) -> Option<u64> {
    let bytes = s.as_bytes();
    if bytes.is_empty() || !bytes.iter().all(u8::is_ascii_digit) {
        return None;
    }
    if bytes.len() > 1 && bytes[0] == b'0' {
        return None;
    }
    s.parse().ok()
}

fn parse_int_list(s: &str) -> Option<Vec<u64>> {
    // `s` is " a b c": one leading space before each value
    let rest = s.strip_prefix(' ')?;
    rest.split(' ').map(parse_int).collect()
}

/// Parses one step line without its trailing newline.
///
/// Returns the step and the stated `left` list. The list must be non-empty
/// and sorted ascending.
pub fn parse_step_line(line: &str) -> Option<(Step, Vec<u64>)> {
    let (eq, left_part) = line.split_once(" (left:")?;
    let left_body = left_part.strip_suffix(')')?;
    let left = parse_int_list(left_body)?;
    if left.windows(2).any(|w| w[0] > w[1]) {
        return None;
    }
    let (expr, result) = eq.split_once('=')?;
    let result = parse_int(result)?;
    let op_pos = expr.find(|c: char| Op::from_symbol(c).is_some())?;
    let op = Op::from_symbol(expr[op_pos..].chars().next()?)?;
    let lhs = parse_int(&expr[..op_pos])?;
    let rhs = parse_int(&expr[op_pos + 1..])?;
    Some((Step { lhs, op, rhs, result }, left))
}
