//! Classifies raw model output against a problem.

use serde::{Deserialize, Serialize};

use super::format::{parse_int, parse_step_line, render_prompt};
use super::{Problem, Step};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum VerdictKind {
    Correct,
    NotReachedTarget,
    InvalidStepFormat,
    IncorrectResultInStep,
    UnknownNumbersInStep,
}

impl VerdictKind {
    pub const ERRORS: [VerdictKind; 4] = [
        VerdictKind::NotReachedTarget,
        VerdictKind::InvalidStepFormat,
        VerdictKind::IncorrectResultInStep,
        VerdictKind::UnknownNumbersInStep,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VerdictKind::Correct => "correct",
            VerdictKind::NotReachedTarget => "not_reached_target",
            VerdictKind::InvalidStepFormat => "invalid_step_format",
            VerdictKind::IncorrectResultInStep => "incorrect_result_in_step",
            VerdictKind::UnknownNumbersInStep => "unknown_numbers_in_step",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub kind: VerdictKind,
    pub detail: String,
    pub failing_step_index: Option<usize>,
}

impl Verdict {
    fn new(kind: VerdictKind, detail: impl Into<String>, index: Option<usize>) -> Verdict {
        Verdict { kind, detail: detail.into(), failing_step_index: index }
    }

    pub fn is_correct(&self) -> bool {
        self.kind == VerdictKind::Correct
    }
}

enum Line<'a> {
    Step(Step, Vec<u64>),
    Goal(u64),
    Malformed(&'a str),
}

/// Parses and replays `text`, which is either a bare completion or the
/// rendered prompt followed by the completion.
///
/// Precedence: any malformed line yields `InvalidStepFormat`. Otherwise the
/// steps are replayed in order and the first failing step decides:
/// unavailable operands (`UnknownNumbersInStep`) before a wrong or illegal
/// result or a wrong `left` list (`IncorrectResultInStep`). A fully valid
/// replay that is incomplete, lacks the `Goal:` line or names the wrong goal
/// is `NotReachedTarget`.
pub fn verify_path(problem: &Problem, text: &str) -> Verdict {
    let mut body = text;
    if body.starts_with("Target:") {
        let header = render_prompt(problem);
        match body.strip_prefix(header.as_str()) {
            Some(rest) => body = rest,
            None => {
                return Verdict::new(
                    VerdictKind::InvalidStepFormat,
                    "prompt header does not match the problem",
                    None,
                )
            }
        }
    }

    let mut lines = Vec::new();
    let mut rest = body;
    while !rest.is_empty() {
        let Some((line, tail)) = rest.split_once('\n') else {
            return Verdict::new(
                VerdictKind::InvalidStepFormat,
                format!("unterminated line {rest:?}"),
                Some(lines.len()),
            );
        };
        lines.push(classify_line(line));
        rest = tail;
    }

    let mut steps = Vec::new();
    let mut goal = None;
    for (i, line) in lines.iter().enumerate() {
        match line {
            Line::Malformed(l) => {
                return Verdict::new(VerdictKind::InvalidStepFormat, format!("malformed line {l:?}"), Some(i))
            }
            Line::Goal(_) if i + 1 != lines.len() => {
                return Verdict::new(VerdictKind::InvalidStepFormat, "text after the Goal line", Some(i))
            }
            Line::Goal(g) => goal = Some(*g),
            Line::Step(step, left) => steps.push((*step, left)),
        }
    }

    let mut state = problem.initial_state();
    for (i, (step, left)) in steps.iter().enumerate() {
        if !state.has_operands(step.lhs, step.rhs) {
            return Verdict::new(
                VerdictKind::UnknownNumbersInStep,
                format!("step {i} `{step}` uses numbers not in {:?}", state.remaining()),
                Some(i),
            );
        }
        if !step.is_arithmetically_valid() {
            return Verdict::new(VerdictKind::IncorrectResultInStep, format!("step {i} `{step}` is wrong"), Some(i));
        }
        state.apply_in_place(*step).expect("checked above");
        if state.remaining() != left.as_slice() {
            return Verdict::new(
                VerdictKind::IncorrectResultInStep,
                format!("step {i} states left {left:?} but {:?} remain", state.remaining()),
                Some(i),
            );
        }
    }

    match goal {
        _ if !state.is_goal() => Verdict::new(
            VerdictKind::NotReachedTarget,
            format!("final numbers {:?} do not equal target {}", state.remaining(), problem.target),
            None,
        ),
        None => Verdict::new(VerdictKind::NotReachedTarget, "missing Goal line", None),
        Some(g) if g != problem.target => {
            Verdict::new(VerdictKind::NotReachedTarget, format!("Goal {g} is not the target"), None)
        }
        Some(_) => Verdict::new(VerdictKind::Correct, "", None),
    }
}

fn classify_line(line: &str) -> Line<'_> {
    if let Some(g) = line.strip_prefix("Goal: ") {
        return parse_int(g).map_or(Line::Malformed(line), Line::Goal);
    }
    match parse_step_line(line) {
        Some((step, left)) => Line::Step(step, left),
        None => Line::Malformed(line),
    }
}
