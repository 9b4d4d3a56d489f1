use rand::Rng;

use coco_core::bench::linear_optim_config;
use coco_core::env_data::{generate, ScenarioKind, SemScenario};
use coco_core::identify::intersect_plausible_sets;
use coco_core::objectives::{coco_penalty, coco_penalty_biased, coco_penalty_unbiased, ObjectiveSpec};
use coco_core::optimizer::fit;
use coco_core::predictors::{ModelParams, ModelShape, RiskSpec};
use coco_core::rng;

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

#[test]
fn batch_estimators_bracket_the_full_sample_penalty() {
    let (multi, _) = generate(&SemScenario::from_values(ScenarioKind::Case1, &[1.0], 4000, 17)).unwrap();
    let env = &multi.environments[0];
    let params = ModelParams::new(ModelShape::linear(3), vec![1.0, 0.5, 0.3].into()).unwrap();
    let full = coco_penalty(&params, env, RiskSpec::SQUARED).unwrap();

    let mut stream = rng::stream(99);
    let (batches, k) = (10_000, 8);
    let mut approx1 = Vec::with_capacity(batches);
    let mut approx2 = Vec::with_capacity(batches);
    for _ in 0..batches {
        let idx: Vec<usize> = (0..k).map(|_| stream.random_range(0..env.n())).collect();
        let batch = env.select_rows(&idx).unwrap();
        approx1.push(coco_penalty_unbiased(&params, &batch, RiskSpec::SQUARED).unwrap());
        approx2.push(coco_penalty_biased(&params, &batch, RiskSpec::SQUARED).unwrap());
    }
    let (m1, se1) = mean_and_se(&approx1);
    let (m2, _) = mean_and_se(&approx2);
    assert!((m1 - full).abs() < 3.0 * se1, "approx1 mean {m1} vs full {full} (se {se1})");
    assert!(m2 >= m1, "approx2 mean {m2} below approx1 mean {m1}");
    assert!(m2 > full, "the squared batch mean is biased upward");
}

#[test]
fn unbiased_estimator_needs_two_samples() {
    let (multi, _) = generate(&SemScenario::from_values(ScenarioKind::Case5, &[1.0], 50, 1)).unwrap();
    let one = multi.environments[0].select_rows(&[3]).unwrap();
    let params = ModelParams::new(ModelShape::linear(2), vec![1.0, 1.0].into()).unwrap();
    assert!(coco_penalty_unbiased(&params, &one, RiskSpec::SQUARED).is_err());
}

/// Gradient-descent CoCo fits against the enumerated intersection for the
/// linear scenarios with at most six covariates.
#[test]
fn descent_solutions_lie_in_the_plausible_intersection() {
    let cases = [
        (ScenarioKind::Case1, vec![0.5, 2.0]),
        (ScenarioKind::Case2, vec![0.5, 2.0]),
        (ScenarioKind::Case3, vec![0.5, 2.0]),
        (ScenarioKind::Case4, vec![0.5, 2.0]),
        (ScenarioKind::Case5, vec![0.5, 2.0]),
        (ScenarioKind::AppendixB1, vec![0.2, 0.5, 1.0]),
        (ScenarioKind::NonIdentifiable, vec![0.5, 2.0]),
    ];
    for (kind, values) in cases {
        let (multi, _) = generate(&SemScenario::from_values(kind, &values, 100_000, 21)).unwrap();
        let p = multi.p();
        assert!(p <= 6);
        let inter = intersect_plausible_sets(&multi, 0.05).unwrap();
        for obj in [ObjectiveSpec::coco(), ObjectiveSpec::coco_modified(kind.default_nondescendants())] {
            let res = fit(&multi, RiskSpec::SQUARED, &obj, &linear_optim_config(5), &ModelShape::linear(p)).unwrap();
            let sol: Vec<f64> = res.params.theta.iter().copied().collect();
            let best = inter.iter().map(|v| max_abs(v, &sol)).fold(f64::INFINITY, f64::min);
            assert!(best < 1e-2, "{kind} {}: {sol:?} is {best} from {inter:?}", obj.method);
        }
    }
}

#[test]
fn modified_objective_recovers_the_causal_vector() {
    for i in 1..=5 {
        let kind = ScenarioKind::linear_case(i).unwrap();
        let (multi, truth) = generate(&SemScenario::from_values(kind, &[0.5, 2.0], 10_000, 30 + i as u64)).unwrap();
        let res = fit(
            &multi,
            RiskSpec::SQUARED,
            &ObjectiveSpec::coco_modified(vec![0]),
            &linear_optim_config(1),
            &ModelShape::linear(multi.p()),
        )
        .unwrap();
        let est: Vec<f64> = res.params.theta.iter().copied().collect();
        assert!(max_abs(&est, &truth.beta) < 0.1, "{kind}: {est:?}");
    }
}
