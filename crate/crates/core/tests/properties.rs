use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use coco_core::env_data::{EnvironmentDataset, MultiEnvData};
use coco_core::identify::numerical_rank;
use coco_core::objectives::{
    coco_penalty, irmv1_penalty, total_objective, weak_penalty, ObjectiveSpec,
};
use coco_core::optimizer::{outer_gradient, OptimConfig, OuterGradient};
use coco_core::predictors::{
    risk_gradient, Activation, ModelParams, ModelShape, RiskSpec,
};

fn dataset(n: usize, p: usize, xs: &[f64], ys: &[f64]) -> EnvironmentDataset {
    let names = (1..=p).map(|j| format!("c{j}")).collect();
    EnvironmentDataset::new("e", DMatrix::from_row_slice(n, p, &xs[..n * p]), DVector::from_column_slice(&ys[..n]), names)
        .unwrap()
}

fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-6)
}

/// Central differences of any scalar function of the flat parameters.
fn fd_gradient(theta: &DVector<f64>, f: impl Fn(&DVector<f64>) -> f64) -> DVector<f64> {
    let h = 1e-5;
    DVector::from_fn(theta.len(), |j, _| {
        let mut up = theta.clone();
        let mut down = theta.clone();
        up[j] += h;
        down[j] -= h;
        (f(&up) - f(&down)) / (2.0 * h)
    })
}

fn vec_strategy(len: usize, scale: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-scale..scale, len)
}

const N: usize = 24;

prop_compose! {
    fn linear_instance()(p in 1usize..5)(
        p in Just(p),
        xs in vec_strategy(N * 4, 2.0),
        ys in vec_strategy(N, 3.0),
        theta in vec_strategy(p, 2.0),
    ) -> (EnvironmentDataset, ModelParams) {
        let data = dataset(N, p, &xs, &ys);
        let params = ModelParams::new(ModelShape::linear(p), DVector::from_vec(theta)).unwrap();
        (data, params)
    }
}

prop_compose! {
    fn logistic_instance()(p in 1usize..5)(
        p in Just(p),
        xs in vec_strategy(N * 4, 2.0),
        labels in prop::collection::vec(0u8..2, N),
        theta in vec_strategy(p, 2.0),
    ) -> (EnvironmentDataset, ModelParams) {
        let ys: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
        let data = dataset(N, p, &xs, &ys);
        let params = ModelParams::new(ModelShape::logistic(p), DVector::from_vec(theta)).unwrap();
        (data, params)
    }
}

prop_compose! {
    /// Tanh network with one or two hidden layers and squared or
    /// cross-entropy loss.
    fn mlp_instance()(p in 1usize..4, h1 in 1usize..5, h2 in 0usize..4, classes in 1usize..4)(
        p in Just(p),
        hidden in Just(if h2 == 0 { vec![h1] } else { vec![h1, h2] }),
        classes in Just(classes),
        xs in vec_strategy(N * 3, 2.0),
        labels in prop::collection::vec(0usize..3, N),
        cont in vec_strategy(N, 2.0),
        theta in vec_strategy(64, 1.0),
    ) -> (EnvironmentDataset, ModelParams, RiskSpec) {
        let (output, risk, ys): (usize, RiskSpec, Vec<f64>) = if classes == 1 {
            (1, RiskSpec::SQUARED, cont)
        } else {
            let k = classes.max(2);
            (k, RiskSpec::CROSS_ENTROPY, labels.iter().map(|&l| (l % k) as f64).collect())
        };
        let shape = ModelShape::mlp(p, hidden, output, Activation::Tanh);
        let len = shape.param_count();
        let params = ModelParams::new(shape, DVector::from_column_slice(&theta[..len])).unwrap();
        (dataset(N, p, &xs, &ys), params, risk)
    }
}

fn risk_of(params: &ModelParams, data: &EnvironmentDataset, risk: RiskSpec, theta: &DVector<f64>) -> f64 {
    coco_core::predictors::empirical_risk(&params.with_theta(theta.clone()), data, risk).unwrap()
}

fn two_envs(a: EnvironmentDataset, shift: f64) -> MultiEnvData {
    let mut b = a.clone();
    b.env_id = "f".into();
    b.x.iter_mut().enumerate().for_each(|(i, v)| *v = *v * (1.0 + shift) + 0.1 * (i % 3) as f64);
    MultiEnvData::new(vec![a, b], vec![0]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(120))]

    #[test]
    fn linear_risk_gradient_matches_differences((data, params) in linear_instance()) {
        let g = risk_gradient(&params, &data, RiskSpec::SQUARED).unwrap();
        let fd = fd_gradient(&params.theta, |t| risk_of(&params, &data, RiskSpec::SQUARED, t));
        prop_assert!(rel_err(&g, &fd) < 1e-4, "rel err {}", rel_err(&g, &fd));
    }

    #[test]
    fn tanh_mlp_risk_gradient_matches_differences((data, params, risk) in mlp_instance()) {
        let g = risk_gradient(&params, &data, risk).unwrap();
        let fd = fd_gradient(&params.theta, |t| risk_of(&params, &data, risk, t));
        prop_assert!(rel_err(&g, &fd) < 1e-4, "rel err {}", rel_err(&g, &fd));
    }

    #[test]
    fn linear_outer_gradient_matches_differences((data, params) in linear_instance(), shift in 0.2f64..1.5,
                                                 lambda_r in 0.0f64..2.0) {
        let multi = two_envs(data, shift);
        let cfg = OptimConfig::default();
        for obj in [ObjectiveSpec::coco(), ObjectiveSpec::coco_modified(vec![0]), ObjectiveSpec::coco_erm(lambda_r)] {
            let g = outer_gradient(&params, &multi, RiskSpec::SQUARED, &obj, &cfg).unwrap();
            let fd = fd_gradient(&params.theta, |t| {
                total_objective(&params.with_theta(t.clone()), &multi, RiskSpec::SQUARED, &obj).unwrap()
            });
            prop_assert!(rel_err(&g, &fd) < 1e-4, "{:?}: rel err {}", obj.method, rel_err(&g, &fd));
        }
    }

    #[test]
    fn tanh_mlp_outer_gradient_matches_differences((data, params, risk) in mlp_instance(), shift in 0.2f64..1.5) {
        let multi = two_envs(data, shift);
        let cfg = OptimConfig { outer_grad: OuterGradient::HessianVector, ..OptimConfig::default() };
        for obj in [ObjectiveSpec::coco(), ObjectiveSpec::coco_erm(0.5)] {
            let g = outer_gradient(&params, &multi, risk, &obj, &cfg).unwrap();
            let fd = fd_gradient(&params.theta, |t| {
                total_objective(&params.with_theta(t.clone()), &multi, risk, &obj).unwrap()
            });
            prop_assert!(rel_err(&g, &fd) < 1e-4, "{:?}: rel err {}", obj.method, rel_err(&g, &fd));
        }
    }

    #[test]
    fn irmv1_equals_weak_penalty_for_linear_squared((data, params) in linear_instance()) {
        let irm = irmv1_penalty(&params, &data, RiskSpec::SQUARED).unwrap();
        let weak = weak_penalty(&params, &data, RiskSpec::SQUARED).unwrap();
        prop_assert!((irm - weak).abs() <= 1e-12 * irm.abs().max(1.0), "{irm} vs {weak}");
    }

    #[test]
    fn irmv1_equals_weak_penalty_for_logistic((data, params) in logistic_instance()) {
        let irm = irmv1_penalty(&params, &data, RiskSpec::CROSS_ENTROPY).unwrap();
        let weak = weak_penalty(&params, &data, RiskSpec::CROSS_ENTROPY).unwrap();
        prop_assert!((irm - weak).abs() <= 1e-12 * irm.abs().max(1.0), "{irm} vs {weak}");
    }

    #[test]
    fn weak_penalty_is_bounded_by_p_times_coco((data, params) in linear_instance()) {
        let weak = weak_penalty(&params, &data, RiskSpec::SQUARED).unwrap();
        let strong = coco_penalty(&params, &data, RiskSpec::SQUARED).unwrap();
        let p = params.len() as f64;
        prop_assert!(weak <= p * strong * (1.0 + 1e-12) + 1e-15);
    }

    #[test]
    fn penalties_are_nonnegative((data, params, risk) in mlp_instance()) {
        prop_assert!(coco_penalty(&params, &data, risk).unwrap() >= 0.0);
        prop_assert!(weak_penalty(&params, &data, risk).unwrap() >= 0.0);
    }

    #[test]
    fn numerical_rank_never_drops_when_rows_are_appended(
        rows in 1usize..6, cols in 1usize..6, vals in vec_strategy(36, 3.0), extra in vec_strategy(6, 3.0),
        low_rank in any::<bool>(),
    ) {
        let mut a = DMatrix::from_row_slice(rows, cols, &vals[..rows * cols]);
        if low_rank && cols > 1 {
            let c0 = a.column(0).clone_owned();
            a.set_column(cols - 1, &c0);
        }
        let (r, _) = numerical_rank(&a);
        let b = a.clone().insert_row(rows, 0.0);
        let mut b = b;
        for j in 0..cols {
            b[(rows, j)] = extra[j];
        }
        let (rb, _) = numerical_rank(&b);
        prop_assert!(rb >= r && rb <= r + 1, "{r} -> {rb}");
        prop_assert!(r <= rows.min(cols));
    }
}
