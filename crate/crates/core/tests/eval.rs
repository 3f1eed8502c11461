mod common;

use common::tiny;
use neurovq::eval::{
    accuracy_diff_report, run_case, run_cases, zero_sensors, CaseKind, CaseSpec, ModelKind, Runner, TrainedModel, ALL_PCTS,
};

fn spec(kind: CaseKind, train: &str, test: &str, model: ModelKind) -> CaseSpec {
    CaseSpec {
        kind,
        train_session: train.into(),
        test_session: test.into(),
        failure_pcts: vec![0, 50, 100],
        model_seeds: vec![0, 1],
        failure_seeds: vec![0, 1, 2],
        model,
    }
}

#[test]
fn case_results_count_values_and_hit_chance_at_total_failure() {
    let sessions = tiny::sessions();
    let cfgs = tiny::configs();
    for model in [ModelKind::TokenPipeline, ModelKind::CnnBaseline] {
        let out = run_case(&spec(CaseKind::Within, "A1", "A1", model), &sessions, &cfgs).unwrap();
        assert_eq!(out.results.len(), 3);
        assert_eq!(out.results[0].values.len(), 2);
        assert!(out.results[0].values.iter().all(|v| v.failure_seed.is_none()));
        assert_eq!(out.results[1].values.len(), 6);
        assert_eq!(out.results[1].per_model_seed.len(), 2);
        assert!(out.results[1].per_model_seed.iter().all(|s| s.n == 3));
        // every test split is class balanced and a dead input gives one constant prediction
        assert!(out.results[2].values.iter().all(|v| v.accuracy == 0.25), "{:?}", out.results[2]);
        assert_eq!(out.test_leakage(), 0);
    }
}

#[test]
fn both_models_lose_the_same_sensors() {
    let sessions = tiny::sessions();
    let cfgs = tiny::configs();
    let a = run_case(&spec(CaseKind::CrossSession, "A1", "A2", ModelKind::TokenPipeline), &sessions, &cfgs).unwrap();
    let b = run_case(&spec(CaseKind::CrossSession, "A1", "A2", ModelKind::CnnBaseline), &sessions, &cfgs).unwrap();
    assert_eq!(a.failures.len(), 6);
    assert_eq!(a.failures, b.failures);
}

#[test]
fn runs_are_reproducible_and_independent_of_jobs() {
    let sessions = tiny::sessions();
    let cfgs = tiny::configs();
    let specs = vec![
        spec(CaseKind::Within, "A1", "A1", ModelKind::CnnBaseline),
        spec(CaseKind::CrossSubject, "A1", "B1", ModelKind::CnnBaseline),
        spec(CaseKind::CrossSession, "A1", "A2", ModelKind::TokenPipeline),
    ];
    let one = run_cases(&specs, &sessions, &cfgs, 1).unwrap();
    let two = run_cases(&specs, &sessions, &cfgs, 2).unwrap();
    for (x, y) in one.iter().zip(&two) {
        assert_eq!(x.results, y.results);
    }
    for out in &one[1..] {
        assert_eq!(out.test_leakage(), 0, "{:?}", out.spec);
        assert!(out.access.total() > 0);
    }
}

#[test]
fn token_substitution_equals_tokenizing_zeroed_data() {
    let sessions = tiny::sessions();
    let cfgs = tiny::configs();
    let a1 = sessions.get("A1").unwrap();
    let (model, _) = TrainedModel::train(ModelKind::TokenPipeline, a1, &cfgs, 3).unwrap();
    let TrainedModel::Tokens { tokenizer, .. } = &model else { unreachable!() };
    let eval = model.evaluator(&a1.test).unwrap();
    let failed = [1, 4];
    let direct = tokenizer.tokenize_all(&zero_sensors(&a1.test, &failed).unwrap()).unwrap();
    assert_eq!(eval.failed_tokens(&failed).unwrap(), direct);
    assert_eq!(eval.predict(&failed).unwrap(), model.predict(&zero_sensors(&a1.test, &failed).unwrap()).unwrap());
}

#[test]
fn inconsistent_specs_fail_before_training() {
    let sessions = tiny::sessions();
    let cfgs = tiny::configs();
    let bad = [
        spec(CaseKind::Within, "A1", "A2", ModelKind::CnnBaseline),
        spec(CaseKind::CrossSession, "A1", "B1", ModelKind::CnnBaseline),
        spec(CaseKind::CrossSubject, "A1", "A2", ModelKind::CnnBaseline),
        CaseSpec { failure_pcts: vec![110], ..spec(CaseKind::Within, "A1", "A1", ModelKind::CnnBaseline) },
        spec(CaseKind::CrossSession, "A1", "A9", ModelKind::CnnBaseline),
    ];
    let mut runner = Runner::new(&cfgs);
    for s in &bad {
        assert!(runner.run(s, &sessions).is_err(), "{s:?}");
    }
    assert_eq!(runner.trained().count(), 0);
}

#[test]
fn difference_report_is_a_subtraction() {
    let sessions = tiny::sessions();
    let cfgs = tiny::configs();
    let s = CaseSpec { failure_pcts: ALL_PCTS.to_vec(), model_seeds: vec![0], failure_seeds: vec![0], ..spec(CaseKind::Within, "A1", "A1", ModelKind::CnnBaseline) };
    let a = run_case(&s, &sessions, &cfgs).unwrap();
    let b = run_case(&CaseSpec { model: ModelKind::TokenPipeline, ..s }, &sessions, &cfgs).unwrap();
    let same = accuracy_diff_report(&a.results, &a.results).unwrap();
    assert!(same.rows.iter().all(|r| r.difference == 0.0) && same.mean_difference == 0.0);
    let d = accuracy_diff_report(&b.results, &a.results).unwrap();
    for (row, (x, y)) in d.rows.iter().zip(b.results.iter().zip(&a.results)) {
        assert_eq!(row.difference, x.mean - y.mean);
    }
    let mean = |r: &[neurovq::eval::CaseResult]| r.iter().map(|p| p.mean).sum::<f64>() / r.len() as f64;
    assert!((d.mean_difference - (mean(&b.results) - mean(&a.results))).abs() < 1e-12);
    assert!(accuracy_diff_report(&b.results, &a.results[1..]).is_err());
    assert_eq!(a.curve().points.len(), 11);
}
