use btlab_core::countdown::VerdictKind;
use btlab_core::dataset::{build_corpus, Corpus, CorpusConfig, TestItem};
use btlab_core::eval::{
    backtrack_trigger_rate, evaluate, sweep_search, EvalConfig, EvalError, EvalReport, Method, SweepAxis,
};
use btlab_core::lm::{Model, ModelConfig, Vocab, BACKTRACK, EOS};
use btlab_core::search::SearchConfig;
use proptest::prelude::*;

fn corpus() -> Corpus {
    build_corpus(&CorpusConfig { n_optimal: 200, n_test: 60, ..CorpusConfig::default() }).unwrap()
}

fn tiny(seed: u64) -> Model<f32> {
    let cfg = ModelConfig { n_layers: 1, d_model: 16, n_heads: 2, d_ff: 32, context_len: 128, seed, ..ModelConfig::default() };
    let mut m = Model::<f32>::new(cfg).unwrap();
    for p in &mut m.params {
        *p *= 3.0;
    }
    m
}

fn forced(token: u32) -> Model<f32> {
    let mut m = tiny(2);
    let hb = m.layout.head_b;
    m.params[hb.off + token as usize] = 1e5;
    m
}

fn run(model: Option<&Model<f32>>, items: &[TestItem], method: Method) -> Result<EvalReport, EvalError> {
    let search = SearchConfig { max_new: 40, ..SearchConfig::default() };
    let cfg = EvalConfig { max_new: 40, ..EvalConfig::default() };
    evaluate(model, &Vocab::default(), "test", items, method, &cfg, &search, |_, _, _| {})
}

#[test]
fn unlimited_dfs_solves_every_test_problem() {
    let c = corpus();
    for items in [&c.test_seen, &c.test_new] {
        let r = run(None, items, Method::Dfs { budget: None }).unwrap();
        assert_eq!(r.accuracy, 1.0);
        r.audit(items).unwrap();
    }
}

#[test]
fn dfs_accuracy_grows_with_budget() {
    let c = corpus();
    let mut last = 0.0;
    for budget in [1, 4, 16, 64, 1_000_000] {
        let r = run(None, &c.test_seen, Method::Dfs { budget: Some(budget) }).unwrap();
        assert!(r.accuracy >= last, "budget {budget}: {} < {last}", r.accuracy);
        last = r.accuracy;
    }
    assert_eq!(last, 1.0);
}

#[test]
fn random_model_answers_are_mostly_malformed() {
    let c = corpus();
    let m = tiny(4);
    let r = run(Some(&m), &c.test_seen[..20], Method::Greedy).unwrap();
    r.audit(&c.test_seen[..20]).unwrap();
    assert_eq!(r.n_correct, 0);
    assert!(r.error_counts["invalid_step_format"] >= 15, "{:?}", r.error_counts);
}

#[test]
fn empty_answers_do_not_reach_the_target() {
    let c = corpus();
    let m = forced(EOS);
    for method in [Method::Greedy, Method::Beam { width: 3 }, Method::SelfBacktrack { b: 1, n: 4 }] {
        let r = run(Some(&m), &c.test_new[..5], method).unwrap();
        assert!(r.answers.iter().all(|a| a.text.is_empty() && a.verdict == VerdictKind::NotReachedTarget), "{method}");
        assert_eq!(r.error_histogram["not_reached_target"], 1.0);
    }
}

#[test]
fn report_aggregates_close_and_tampering_is_caught() {
    let c = corpus();
    let m = tiny(6);
    let items = &c.test_seen[..10];
    let r = run(Some(&m), items, Method::SelfBacktrack { b: 1, n: 4 }).unwrap();
    r.audit(items).unwrap();
    assert_eq!(r.error_histogram.len(), 4);
    assert_eq!(r.n_correct + r.error_counts.values().sum::<usize>(), r.n_problems);

    let mut bad = r.clone();
    bad.n_correct += 1;
    assert!(bad.audit(items).is_err());
    let mut bad = r.clone();
    bad.answers[0].text = "1+1=2 (left: 2)\n".into();
    assert!(bad.audit(items).is_err());
    assert!(r.audit(&items[..9]).is_err());
}

#[test]
fn evaluation_is_deterministic_and_serializes_without_wall_time() {
    let c = corpus();
    let m = tiny(8);
    let items = &c.test_seen[..8];
    let method = Method::SelfBacktrack { b: 1, n: 4 };
    let mut a = run(Some(&m), items, method).unwrap();
    let mut b = run(Some(&m), items, method).unwrap();
    assert!(a.wall_time_secs.is_some());
    a.wall_time_secs = None;
    b.wall_time_secs = None;
    let (ja, jb) = (serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(ja, jb);
    assert!(!ja.contains("wall_time"));
    let back: EvalReport = serde_json::from_str(&ja).unwrap();
    assert_eq!(back, a);
}

#[test]
fn model_methods_require_a_model_and_sets_must_be_non_empty() {
    let c = corpus();
    assert!(matches!(run(None, &c.test_seen, Method::Greedy), Err(EvalError::ModelRequired(_))));
    assert!(matches!(run(None, &[], Method::Dfs { budget: None }), Err(EvalError::EmptyTestSet)));
}

#[test]
fn trigger_rate_of_forced_models() {
    let c = corpus();
    let v = Vocab::default();
    let back = backtrack_trigger_rate(&forced(BACKTRACK), &v, &c.train).unwrap();
    assert_eq!(back.n, c.train.iter().filter(|s| s.error_mode.is_some()).count());
    assert_eq!(back.rate, 1.0);
    let stop = backtrack_trigger_rate(&forced(EOS), &v, &c.train).unwrap();
    assert_eq!(stop.hits, 0);
}

#[test]
fn sweep_reports_one_row_per_value() {
    let c = corpus();
    let m = tiny(3);
    let cfg = EvalConfig { limit: Some(4), max_new: 30, ..EvalConfig::default() };
    let search = SearchConfig { max_new: 30, ..SearchConfig::default() };
    let rows = sweep_search(&m, &Vocab::default(), "seen", &c.test_seen, SweepAxis::N, &[1.0, 4.0, 9.0], &cfg, &search).unwrap();
    assert_eq!(rows.len(), 3);
    assert!("ratio_back".parse::<SweepAxis>().is_ok());
    assert!("width".parse::<SweepAxis>().is_err());
}

#[test]
fn method_descriptors_parse() {
    assert_eq!("greedy".parse::<Method>().unwrap(), Method::Greedy);
    assert_eq!("dfs(inf)".parse::<Method>().unwrap(), Method::Dfs { budget: None });
    assert_eq!(" self_backtrack(1, 32) ".parse::<Method>().unwrap(), Method::SelfBacktrack { b: 1, n: 32 });
    for bad in ["", "beam", "beam()", "dfs(-1)", "self_backtrack(1)", "sample(3)"] {
        assert!(bad.parse::<Method>().is_err(), "{bad}");
    }
}

fn any_method() -> impl Strategy<Value = Method> {
    prop_oneof![
        Just(Method::Greedy),
        (1usize..64).prop_map(|width| Method::Beam { width }),
        proptest::option::of(0u64..1_000_000).prop_map(|budget| Method::Dfs { budget }),
        (0usize..5, 1usize..100).prop_map(|(b, n)| Method::SelfBacktrack { b, n }),
    ]
}

proptest! {
    #[test]
    fn method_display_round_trips(m in any_method()) {
        prop_assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        let json = serde_json::to_string(&m).unwrap();
        prop_assert_eq!(serde_json::from_str::<Method>(&json).unwrap(), m);
    }
}
