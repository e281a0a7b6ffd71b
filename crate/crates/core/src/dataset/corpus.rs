use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::synth::{gen_problem, make_backtrack_sample, render, resolve_split, TargetSplit};
use super::{CorpusConfig, DataError, ErrorMode, RenderedSample, SampleKind};
use crate::countdown::{parse_prompt, render_prompt, solve_exhaustive, Problem};
use crate::rng::{self, domain};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_SEEN_FILE: &str = "test_seen.jsonl";
pub const TEST_NEW_FILE: &str = "test_new.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestItem {
    pub id: String,
    pub prompt: String,
    pub target: u64,
    pub numbers: Vec<u64>,
}

impl TestItem {
    pub fn from_problem(p: &Problem) -> TestItem {
        TestItem { id: p.id.clone(), prompt: render_prompt(p), target: p.target, numbers: p.numbers.clone() }
    }

    pub fn problem(&self) -> Problem {
        Problem::new(self.id.clone(), self.numbers.clone(), self.target)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub config: CorpusConfig,
    pub split: TargetSplit,
    pub n_optimal: usize,
    pub n_backtrack: usize,
    pub mode_counts: Vec<(ErrorMode, usize)>,
    pub n_test_seen: usize,
    pub n_test_new: usize,
    pub files: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<RenderedSample>,
    /// Problems behind the optimal samples, in order.
    pub train_problems: Vec<Problem>,
    pub test_seen: Vec<TestItem>,
    pub test_new: Vec<TestItem>,
    pub manifest: CorpusManifest,
}

pub fn problem_key(p: &Problem) -> (Vec<u64>, u64) {
    let mut n = p.numbers.clone();
    n.sort_unstable();
    (n, p.target)
}

/// Generates the full corpus in memory.
///
/// Backtrack sample `j` is derived from optimal sample `j mod n_optimal`;
/// when no exploration error fits that problem the next one is used.
pub fn build_corpus(config: &CorpusConfig) -> Result<Corpus, DataError> {
    config.validate()?;
    let split = resolve_split(config);
    if split.seen.is_empty() {
        return Err(DataError::InvalidConfig("no seen targets".into()));
    }

    let mut train = Vec::with_capacity(config.n_optimal + config.n_backtrack());
    let mut problems = Vec::with_capacity(config.n_optimal);
    let mut paths = Vec::with_capacity(config.n_optimal);
    for i in 0..config.n_optimal {
        let mut r = rng::stream(config.seed, &[domain::PROBLEM, i as u64]);
        let problem = gen_problem(&mut r, config, &split.seen, format!("train-{i}"))?;
        let solutions = solve_exhaustive(&problem);
        let path = solutions.choose(&mut r).expect("generated problems are solvable").clone();
        let (prompt, completion) = render(&problem, &path);
        train.push(RenderedSample {
            id: problem.id.clone(),
            prompt,
            completion,
            kind: SampleKind::Optimal,
            error_mode: None,
            mask_spans: Vec::new(),
        });
        problems.push(problem);
        paths.push(path);
    }

    let n_back = config.n_backtrack();
    let mode_counts = config.error_mix.apportion(n_back);
    let mut modes: Vec<ErrorMode> = mode_counts.iter().flat_map(|&(m, c)| std::iter::repeat(m).take(c)).collect();
    modes.shuffle(&mut rng::stream(config.seed, &[domain::BACKTRACK, u64::MAX]));
    if n_back > 0 && problems.is_empty() {
        return Err(DataError::InvalidConfig("backtrack samples need optimal samples".into()));
    }
    for (j, &mode) in modes.iter().enumerate() {
        let mut r = rng::stream(config.seed, &[domain::BACKTRACK, j as u64]);
        let mut sample = None;
        for offset in 0..problems.len() {
            let src = (j + offset) % problems.len();
            match make_backtrack_sample(&problems[src], &paths[src], mode, &mut r, config.number_max) {
                Ok(s) => {
                    sample = Some((src, s));
                    break;
                }
                Err(DataError::NoErrorInjectable(_)) => continue,
                Err(e) => return Err(e),
            }
        }
        let (src, mut s) = sample.ok_or_else(|| DataError::NoErrorInjectable("every problem".into()))?;
        s.id = format!("back-{j}-of-{src}");
        train.push(s);
    }

    // seen targets are restricted to those that actually occur in training
    let train_targets: BTreeSet<u64> = problems.iter().map(|p| p.target).collect();
    let seen_targets: Vec<u64> = split.seen.iter().copied().filter(|t| train_targets.contains(t)).collect();
    let train_keys: HashSet<(Vec<u64>, u64)> = problems.iter().map(problem_key).collect();
    let test_seen = gen_test_split(config, &seen_targets, &train_keys, "seen", 0)?;
    let test_new = gen_test_split(config, &split.new, &train_keys, "new", 1)?;

    let manifest = CorpusManifest {
        config: config.clone(),
        split,
        n_optimal: config.n_optimal,
        n_backtrack: n_back,
        mode_counts: mode_counts.to_vec(),
        n_test_seen: test_seen.len(),
        n_test_new: test_new.len(),
        files: vec![TRAIN_FILE.into(), TEST_SEEN_FILE.into(), TEST_NEW_FILE.into()],
    };
    Ok(Corpus { train, train_problems: problems, test_seen, test_new, manifest })
}

fn gen_test_split(
    config: &CorpusConfig,
    targets: &[u64],
    exclude: &HashSet<(Vec<u64>, u64)>,
    name: &str,
    split_key: u64,
) -> Result<Vec<TestItem>, DataError> {
    if targets.is_empty() || config.n_test == 0 {
        return Ok(Vec::new());
    }
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(config.n_test);
    let mut r = rng::stream(config.seed, &[domain::TEST_SET, split_key]);
    let mut misses = 0usize;
    while out.len() < config.n_test {
        let p = gen_problem(&mut r, config, targets, format!("{name}-{}", out.len()))?;
        let key = problem_key(&p);
        if exclude.contains(&key) || !seen.insert(key) {
            misses += 1;
            if misses > 100_000 {
                // the problem space is too small for the requested size
                break;
            }
            continue;
        }
        out.push(TestItem::from_problem(&p));
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, DataError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn read_train_set(path: &Path) -> Result<Vec<RenderedSample>, DataError> {
    read_jsonl(path)
}

pub fn read_test_set(path: &Path) -> Result<Vec<TestItem>, DataError> {
    read_jsonl(path)
}

/// Writes the three JSONL files and `manifest.json` into `dir`.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<(), DataError> {
    std::fs::create_dir_all(dir)?;
    write_jsonl(&dir.join(TRAIN_FILE), &corpus.train)?;
    write_jsonl(&dir.join(TEST_SEEN_FILE), &corpus.test_seen)?;
    write_jsonl(&dir.join(TEST_NEW_FILE), &corpus.test_new)?;
    let mut f = BufWriter::new(File::create(dir.join(MANIFEST_FILE))?);
    serde_json::to_writer_pretty(&mut f, &corpus.manifest)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

/// The first `n` distinct problems of a training set, in corpus order.
pub fn training_problems(samples: &[RenderedSample], n: usize) -> Vec<Problem> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    for s in samples {
        if out.len() == n {
            break;
        }
        let Some(mut p) = parse_prompt(&s.prompt) else { continue };
        if seen.insert(problem_key(&p)) {
            p.id = s.id.clone();
            out.push(p);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::countdown::{has_solution, parse_step_line, verify_path, VerdictKind};

    fn cfg() -> CorpusConfig {
        CorpusConfig { n_optimal: 100, n_test: 50, seed: 5, ..CorpusConfig::default() }
    }

    #[test]
    fn counts_follow_the_mix() {
        let c = build_corpus(&cfg()).unwrap();
        let count = |m| c.train.iter().filter(|s| s.error_mode == Some(m)).count();
        assert_eq!(count(ErrorMode::Exploration), 20);
        assert_eq!(count(ErrorMode::Computational), 40);
        assert_eq!(count(ErrorMode::RuleViolation), 40);
        assert_eq!(c.train.iter().filter(|s| s.kind == SampleKind::Optimal).count(), 100);
    }

    #[test]
    fn splits_are_disjoint_from_training() {
        let c = build_corpus(&cfg()).unwrap();
        let train_targets: BTreeSet<u64> = c.train_problems.iter().map(|p| p.target).collect();
        assert!(c.test_new.iter().all(|t| !train_targets.contains(&t.target)));
        assert!(c.test_seen.iter().all(|t| train_targets.contains(&t.target)));
        let keys: HashSet<_> = c.train_problems.iter().map(problem_key).collect();
        assert!(c.test_seen.iter().all(|t| !keys.contains(&problem_key(&t.problem()))));
        assert_eq!(c.test_seen.len(), 50);
        assert_eq!(c.test_new.len(), 50);
    }

    #[test]
    fn samples_satisfy_generator_postconditions() {
        let c = build_corpus(&cfg()).unwrap();
        let by_id: std::collections::HashMap<&str, &Problem> =
            c.train_problems.iter().map(|p| (p.id.as_str(), p)).collect();
        for s in &c.train {
            let src = match s.kind {
                SampleKind::Optimal => s.id.as_str(),
                SampleKind::Backtrack => s.id.rsplit("-of-").next().unwrap(),
            };
            let problem = if s.kind == SampleKind::Optimal {
                by_id[src]
            } else {
                &c.train_problems[src.parse::<usize>().unwrap()]
            };
            assert_eq!(s.prompt, render_prompt(problem));
            match s.kind {
                SampleKind::Optimal => {
                    assert!(s.mask_spans.is_empty());
                    assert!(verify_path(problem, &format!("{}{}", s.prompt, s.completion)).is_correct());
                }
                SampleKind::Backtrack => {
                    let (start, end) = s.mask_spans[0];
                    let kind = verify_path(problem, &s.completion[..end]).kind;
                    let line = s.completion[start..end].trim_end();
                    match s.error_mode.unwrap() {
                        ErrorMode::Computational => assert_eq!(kind, VerdictKind::IncorrectResultInStep),
                        ErrorMode::RuleViolation => assert_eq!(kind, VerdictKind::UnknownNumbersInStep),
                        ErrorMode::Exploration => {
                            assert_eq!(kind, VerdictKind::NotReachedTarget);
                            let (_, left) = parse_step_line(line).unwrap();
                            let state = crate::countdown::CountdownState::new(left, problem.target);
                            assert!(!has_solution(&state));
                        }
                    }
                    // the unmasked text is the optimal prefix plus the token
                    let kept = s.unmasked_completion();
                    let prefix = kept.strip_suffix(super::super::BACKTRACK_TEXT).unwrap();
                    assert!(verify_path(problem, prefix).kind == VerdictKind::NotReachedTarget || prefix.is_empty());
                }
            }
        }
    }

    #[test]
    fn corpus_files_are_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_corpus(&build_corpus(&cfg()).unwrap(), a.path()).unwrap();
        write_corpus(&build_corpus(&cfg()).unwrap(), b.path()).unwrap();
        for f in [TRAIN_FILE, TEST_SEEN_FILE, TEST_NEW_FILE, MANIFEST_FILE] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        }
        let back: Vec<RenderedSample> = read_train_set(&a.path().join(TRAIN_FILE)).unwrap();
        assert_eq!(back.len(), 200);
    }
}
