use std::collections::HashSet;

use btlab_core::countdown::{
    dfs_with_budget, render_completion, solve_exhaustive, verify_path, Problem, SolutionPath, VerdictKind,
    UNLIMITED_BUDGET,
};
use proptest::prelude::*;

/// A random legal path of K-1 steps, chosen by the indices in `picks`.
fn random_path(p: &Problem, picks: &[usize]) -> SolutionPath {
    let mut state = p.initial_state();
    let mut steps = Vec::new();
    for &i in picks.iter().take(p.k() - 1) {
        let legal = state.legal_steps();
        let step = legal[i % legal.len()];
        state = state.apply_step(step).unwrap();
        steps.push(step);
    }
    SolutionPath::new(steps)
}

fn problem_strategy() -> impl Strategy<Value = (Problem, Vec<usize>)> {
    (2usize..=4)
        .prop_flat_map(|k| (prop::collection::vec(1u64..=10, k), prop::collection::vec(0usize..1000, 3), 1u64..=40, any::<bool>()))
        .prop_map(|(numbers, picks, target, aim)| {
            let mut p = Problem::new("p", numbers, target);
            if aim {
                // aim the target at the path's final value so about half the
                // problems are solved by the generated path
                let end = random_path(&p, &picks).replay(&p).unwrap();
                p.target = end.remaining()[0];
            }
            (p, picks)
        })
}

proptest! {
    #[test]
    fn verifier_agrees_with_exhaustive_enumeration((p, picks) in problem_strategy()) {
        let path = random_path(&p, &picks);
        let text = render_completion(&p, &path);
        let solutions: HashSet<SolutionPath> = solve_exhaustive(&p).into_iter().collect();
        let member = solutions.contains(&path.canonical());
        prop_assert_eq!(verify_path(&p, &text).is_correct(), member, "{}", text);
    }

    #[test]
    fn corrupted_renders_are_classified((p, picks) in problem_strategy(), line in 0usize..3, delta in 1u64..5) {
        let path = random_path(&p, &picks);
        let i = line % path.steps.len();
        let mut state = p.initial_state();
        for &s in &path.steps[..i] {
            state = state.apply_step(s).unwrap();
        }
        let text = render_completion(&p, &path);
        let lines: Vec<&str> = text.lines().collect();
        let rejoin = |ls: &[String]| ls.iter().map(|l| format!("{l}\n")).collect::<String>();
        let mut owned: Vec<String> = lines.iter().map(|l| l.to_string()).collect();

        // format: drop the closing parenthesis
        let mut f = owned.clone();
        f[i] = f[i].trim_end_matches(')').to_string();
        prop_assert_eq!(verify_path(&p, &rejoin(&f)).kind, VerdictKind::InvalidStepFormat);

        // wrong result
        let step = path.steps[i];
        let wrong = step.result + delta;
        let mut left = state.remaining().to_vec();
        for v in [step.lhs, step.rhs] {
            let j = left.iter().position(|&x| x == v).unwrap();
            left.remove(j);
        }
        left.push(wrong);
        left.sort_unstable();
        let mut w = owned.clone();
        let left_text: Vec<String> = left.iter().map(u64::to_string).collect();
        w[i] = format!("{}{}{}={} (left: {})", step.lhs, step.op.symbol(), step.rhs, wrong, left_text.join(" "));
        prop_assert_eq!(verify_path(&p, &rejoin(&w)).kind, VerdictKind::IncorrectResultInStep);

        // unknown operand
        let absent = (100..).find(|v| !state.contains(*v)).unwrap();
        let mut u = owned.clone();
        u[i] = format!("{}+{}={} (left: 1)", absent, step.rhs, absent + step.rhs);
        prop_assert_eq!(verify_path(&p, &rejoin(&u)).kind, VerdictKind::UnknownNumbersInStep);

        // not reached: drop the last step line
        let last = path.steps.len() - 1;
        owned.remove(last);
        prop_assert_eq!(verify_path(&p, &rejoin(&owned)).kind, VerdictKind::NotReachedTarget);
    }

    #[test]
    fn dfs_is_complete_and_monotone_in_budget((p, _) in problem_strategy()) {
        let solvable = !solve_exhaustive(&p).is_empty();
        let full = dfs_with_budget(&p, UNLIMITED_BUDGET);
        prop_assert_eq!(full.is_some(), solvable);
        if let Some(path) = &full {
            prop_assert!(verify_path(&p, &render_completion(&p, path)).is_correct());
        }
        let mut solved = false;
        for budget in [0, 1, 2, 4, 8, 16, 64, UNLIMITED_BUDGET] {
            let found = dfs_with_budget(&p, budget).is_some();
            prop_assert!(!solved || found, "solved below budget {} but not at it", budget);
            solved |= found;
        }
    }
}

#[test]
fn two_ones_make_two_at_any_budget() {
    let p = Problem::new("p", vec![1, 1], 2);
    for budget in [0, 1, UNLIMITED_BUDGET] {
        let path = dfs_with_budget(&p, budget).unwrap();
        assert_eq!(path.steps.iter().map(|s| s.to_string()).collect::<Vec<_>>(), ["1+1=2"]);
    }
}
