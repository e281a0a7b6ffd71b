use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusConfig, DataError, ErrorMode, RenderedSample, SampleKind, BACKTRACK_TEXT};
use crate::countdown::{
    has_solution, render_completion, render_prompt, render_step_line, Op, Problem, SolutionPath, Step,
};
use crate::rng::{self, domain};

const MAX_REJECTIONS: usize = 10_000;

/// Disjoint seen / held-out target values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSplit {
    pub seen: Vec<u64>,
    pub new: Vec<u64>,
}

/// Partitions `1..=target_max` according to the config's split settings.
pub fn resolve_split(config: &CorpusConfig) -> TargetSplit {
    let all: Vec<u64> = (1..=config.target_max).collect();
    let mut new: Vec<u64> = match &config.split.new_targets {
        Some(explicit) => explicit.iter().copied().filter(|t| (1..=config.target_max).contains(t)).collect(),
        None => {
            let n_new = (all.len() as f64 * config.split.new_fraction).round() as usize;
            let mut shuffled = all.clone();
            shuffled.shuffle(&mut rng::stream(config.seed, &[domain::SPLIT]));
            shuffled.truncate(n_new);
            shuffled
        }
    };
    new.sort_unstable();
    new.dedup();
    let seen = all.into_iter().filter(|t| new.binary_search(t).is_err()).collect();
    TargetSplit { seen, new }
}

/// Draws a target from `targets`, then `k` operands, until the problem is solvable.
pub fn gen_problem<R: Rng>(
    rng: &mut R,
    config: &CorpusConfig,
    targets: &[u64],
    id: impl Into<String>,
) -> Result<Problem, DataError> {
    if targets.is_empty() {
        return Err(DataError::InvalidConfig("empty target set".into()));
    }
    for _ in 0..MAX_REJECTIONS {
        let target = *targets.choose(rng).unwrap();
        let numbers: Vec<u64> = (0..config.k).map(|_| rng.gen_range(config.number_min..=config.number_max)).collect();
        let problem = Problem { id: String::new(), numbers, target };
        if problem.is_solvable() {
            return Ok(Problem { id: id.into(), ..problem });
        }
    }
    Err(DataError::ExhaustedRetries(MAX_REJECTIONS))
}

/// Renders `(prompt, completion)` for a path that solves `problem`.
pub fn render(problem: &Problem, path: &SolutionPath) -> (String, String) {
    (render_prompt(problem), render_completion(problem, path))
}

/// Builds `prefix(path) ∘ a_err ∘ <backtrack>` with the error line masked.
///
/// The prefix length is uniform over `0..=K-2`. For exploration errors every
/// prefix length is tried (in random order) before giving up.
pub fn make_backtrack_sample<R: Rng>(
    problem: &Problem,
    path: &SolutionPath,
    mode: ErrorMode,
    rng: &mut R,
    number_max: u64,
) -> Result<RenderedSample, DataError> {
    let max_prefix = problem.k().saturating_sub(2).min(path.steps.len());
    let mut prefixes: Vec<usize> = (0..=max_prefix).collect();
    prefixes.shuffle(rng);

    for prefix_len in prefixes {
        let mut state = problem.initial_state();
        let mut completion = String::new();
        for &step in &path.steps[..prefix_len] {
            state.apply_in_place(step).expect("optimal path replays");
            completion.push_str(&render_step_line(&step, state.remaining()));
        }

        let injected = match mode {
            ErrorMode::Exploration => {
                let dead: Vec<Step> = state
                    .legal_steps()
                    .into_iter()
                    .filter(|&s| !has_solution(&state.apply_step(s).expect("legal step")))
                    .collect();
                dead.choose(rng).map(|&s| {
                    let next = state.apply_step(s).unwrap();
                    render_step_line(&s, next.remaining())
                })
            }
            ErrorMode::Computational => {
                let legal = state.legal_steps();
                let step = *legal.choose(rng).expect("non-terminal state has a legal step");
                let wrong = false_result(&step, problem.target, rng);
                let mut left = state.remaining().to_vec();
                remove_value(&mut left, step.lhs);
                remove_value(&mut left, step.rhs);
                insert_value(&mut left, wrong);
                Some(render_step_line(&Step { result: wrong, ..step }, &left))
            }
            ErrorMode::RuleViolation => {
                let real = *state.remaining().choose(rng).unwrap();
                let fake = pick_absent(state.remaining(), number_max.max(2), rng);
                let (lhs, rhs) = if rng.gen_bool(0.5) { (real, fake) } else { (fake, real) };
                let ops: Vec<Op> = Op::ALL.into_iter().filter(|op| op.apply(lhs, rhs).is_some()).collect();
                let op = *ops.choose(rng).expect("+ is always legal");
                let step = Step::compute(lhs, op, rhs).unwrap().canonical();
                let mut left = state.remaining().to_vec();
                remove_value(&mut left, real);
                insert_value(&mut left, step.result);
                Some(render_step_line(&step, &left))
            }
        };

        if let Some(line) = injected {
            let start = completion.len();
            completion.push_str(&line);
            let end = completion.len();
            completion.push_str(BACKTRACK_TEXT);
            return Ok(RenderedSample {
                id: String::new(),
                prompt: render_prompt(problem),
                completion,
                kind: SampleKind::Backtrack,
                error_mode: Some(mode),
                mask_spans: vec![(start, end)],
            });
        }
    }
    Err(DataError::NoErrorInjectable(problem.id.clone()))
}

/// A false result for `step`: a small offset, another operator's result on
/// the same operands, or the target, chosen uniformly among those that
/// differ from the true result.
fn false_result<R: Rng>(step: &Step, target: u64, rng: &mut R) -> u64 {
    let mut kinds: Vec<Vec<u64>> = Vec::with_capacity(3);
    let offsets: Vec<u64> = (1..=3u64)
        .flat_map(|d| [step.result.checked_sub(d), Some(step.result + d)])
        .flatten()
        .collect();
    kinds.push(offsets);
    let other_ops: Vec<u64> = Op::ALL
        .into_iter()
        .filter_map(|op| op.apply(step.lhs, step.rhs))
        .filter(|&v| v != step.result)
        .collect();
    if !other_ops.is_empty() {
        kinds.push(other_ops);
    }
    if target != step.result {
        kinds.push(vec![target]);
    }
    *kinds.choose(rng).unwrap().choose(rng).unwrap()
}

fn pick_absent<R: Rng>(present: &[u64], hi: u64, rng: &mut R) -> u64 {
    let candidates: Vec<u64> = (1..=hi).filter(|v| !present.contains(v)).collect();
    match candidates.choose(rng) {
        Some(&v) => v,
        None => present.iter().max().unwrap() + 1,
    }
}

fn remove_value(values: &mut Vec<u64>, v: u64) {
    if let Some(i) = values.iter().position(|&x| x == v) {
        values.remove(i);
    }
}

fn insert_value(values: &mut Vec<u64>, v: u64) {
    let i = values.partition_point(|&x| x < v);
    values.insert(i, v);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::countdown::{solve_exhaustive, verify_path, VerdictKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> CorpusConfig {
        CorpusConfig { k: 2, number_min: 1, number_max: 2, target_max: 4, ..CorpusConfig::default() }
    }

    #[test]
    fn generated_problems_are_solvable() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = small_config();
        for i in 0..50 {
            let p = gen_problem(&mut rng, &c, &[1, 2, 3, 4], format!("p{i}")).unwrap();
            assert!(!solve_exhaustive(&p).is_empty());
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let c = CorpusConfig::default();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            (0..20).map(|i| gen_problem(&mut rng, &c, &[10, 20, 30], i.to_string()).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn infeasible_space_exhausts() {
        let c = CorpusConfig { k: 2, number_min: 1, number_max: 1, ..CorpusConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(gen_problem(&mut rng, &c, &[5], "x"), Err(DataError::ExhaustedRetries(10_000))));
    }

    #[test]
    fn split_is_disjoint_and_covering() {
        let c = CorpusConfig::default();
        let s = resolve_split(&c);
        assert_eq!(s.new.len(), 6);
        assert_eq!(s.seen.len() + s.new.len(), 30);
        assert!(s.seen.iter().all(|t| !s.new.contains(t)));
    }

    #[test]
    fn injected_errors_classify_as_their_mode() {
        let p = Problem::new("p", vec![3, 5, 7, 11], 6);
        let paths = solve_exhaustive(&p);
        let path = &paths[0];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            for mode in ErrorMode::ALL {
                let s = make_backtrack_sample(&p, path, mode, &mut rng, 20).unwrap();
                let (start, end) = s.mask_spans[0];
                assert!(s.completion.ends_with(BACKTRACK_TEXT));
                assert_eq!(end + BACKTRACK_TEXT.len(), s.completion.len());
                let upto_err = &s.completion[..end];
                let injected_index = s.completion[..start].matches('\n').count();
                let v = verify_path(&p, upto_err);
                match mode {
                    ErrorMode::Computational => {
                        assert_eq!(v.kind, VerdictKind::IncorrectResultInStep, "{upto_err}");
                        assert_eq!(v.failing_step_index, Some(injected_index));
                    }
                    ErrorMode::RuleViolation => {
                        assert_eq!(v.kind, VerdictKind::UnknownNumbersInStep, "{upto_err}");
                        assert_eq!(v.failing_step_index, Some(injected_index));
                    }
                    ErrorMode::Exploration => {
                        assert_eq!(v.kind, VerdictKind::NotReachedTarget, "{upto_err}");
                    }
                }
            }
        }
    }

    #[test]
    fn false_results_cover_every_variant() {
        let step = Step::compute(6, Op::Mul, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seen: std::collections::BTreeSet<u64> = (0..300).map(|_| false_result(&step, 24, &mut rng)).collect();
        assert!(!seen.contains(&18));
        for v in [15, 21, 3, 9, 24] {
            assert!(seen.contains(&v), "{v} never drawn: {seen:?}");
        }
    }
}
