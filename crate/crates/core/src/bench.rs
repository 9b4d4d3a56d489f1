//! Benchmark suites: causal-coefficient recovery on the linear cases, the
//! Gaussian-mixture classification task and the two-block analytical example.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env_data::{generate, EnvParams, MultiEnvData, ScenarioKind, SemScenario};
use crate::error::{CocoError, Result};
use crate::identify;
use crate::objectives::{Method, ObjectiveSpec};
use crate::optimizer::{self, Init, OptimConfig, OuterGradient, Preconditioner};
use crate::predictors::{self, Activation, ModelParams, ModelShape, RiskSpec};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BenchMethod {
    Erm,
    Irmv1,
    Vrex,
    /// CoCo with the non-descendant mask (linear) or with the risk term
    /// (classification).
    Coco,
    NaiveCoco,
    /// ERM restricted to the causal covariates.
    Oracle,
}

impl BenchMethod {
    pub fn name(self) -> &'static str {
        match self {
            Self::Erm => "erm",
            Self::Irmv1 => "irmv1",
            Self::Vrex => "vrex",
            Self::Coco => "coco",
            Self::NaiveCoco => "naive-coco",
            Self::Oracle => "oracle",
        }
    }
}

impl fmt::Display for BenchMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchMethod {
    type Err = CocoError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "erm" => Self::Erm,
            "irmv1" | "irm" => Self::Irmv1,
            "vrex" | "v-rex" => Self::Vrex,
            "coco" => Self::Coco,
            "naive-coco" | "naivecoco" => Self::NaiveCoco,
            "oracle" => Self::Oracle,
            other => return Err(CocoError::Config(format!("unknown benchmark method `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Suite {
    LinearCases,
    Gmm,
    AppendixB1,
}

impl FromStr for Suite {
    type Err = CocoError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "linear-cases" | "linear" => Self::LinearCases,
            "gmm" => Self::Gmm,
            "appendix-b1" | "b1" => Self::AppendixB1,
            other => return Err(CocoError::Config(format!("unknown suite `{other}`"))),
        })
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::LinearCases => "linear-cases",
            Self::Gmm => "gmm",
            Self::AppendixB1 => "appendix-b1",
        })
    }
}

/// `count` values spaced evenly in log scale over `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..count)
            .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (count - 1) as f64).exp())
            .collect(),
    }
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Mean absolute coordinate error.
pub fn mae(estimate: &[f64], truth: &[f64]) -> f64 {
    crate::linalg::mean_abs_diff(estimate, truth)
}

/// Optimizer settings used for the linear-case fits: plain gradient descent
/// from near zero, once without and once with diagonal preconditioning.
pub fn linear_optim_config(seed: u64) -> OptimConfig {
    OptimConfig {
        step_size: 1.0,
        max_iters: 100_000,
        tol: 1e-10,
        starts: vec![Preconditioner::Identity, Preconditioner::Diagonal],
        outer_grad: OuterGradient::Analytic,
        init: Init::ZeroPlusJitter,
        jitter: 0.01,
        seed,
        ..OptimConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSuiteConfig {
    pub cases: Vec<ScenarioKind>,
    pub gammas: Vec<f64>,
    pub n_per_env: usize,
    pub reps: usize,
    pub seed: u64,
    pub methods: Vec<BenchMethod>,
    pub irm_lambdas: Vec<f64>,
    pub vrex_lambdas: Vec<f64>,
    /// Non-descendant set for the masked CoCo variants.
    pub nondescendants: Vec<usize>,
    pub max_iters: usize,
}

impl Default for LinearSuiteConfig {
    fn default() -> Self {
        Self {
            cases: (1..=5).map(|i| ScenarioKind::linear_case(i).expect("cases 1-5")).collect(),
            gammas: vec![0.5, 2.0],
            n_per_env: 10_000,
            reps: 10,
            seed: 0,
            methods: vec![
                BenchMethod::Erm,
                BenchMethod::Irmv1,
                BenchMethod::Vrex,
                BenchMethod::Coco,
                BenchMethod::NaiveCoco,
            ],
            irm_lambdas: vec![2.0, 20.0, 200.0],
            vrex_lambdas: vec![2.0, 20.0, 200.0],
            nondescendants: vec![0],
            max_iters: 100_000,
        }
    }
}

impl LinearSuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(CocoError::Config("reps must be >= 1".into()));
        }
        if self.gammas.is_empty() {
            return Err(CocoError::Config("at least one environment is required".into()));
        }
        if let Some(k) = self.cases.iter().find(|k| !k.is_linear_case()) {
            return Err(CocoError::Config(format!("{k} is not a linear case")));
        }
        if self.methods.contains(&BenchMethod::Oracle) {
            return Err(CocoError::Config("the oracle method belongs to the gmm suite".into()));
        }
        Ok(())
    }

    /// Data of one replication of one case.
    pub fn scenario(&self, case: ScenarioKind, rep: usize) -> SemScenario {
        let seed = rng::derive_seed(self.seed, &[case_tag(case), rep as u64]);
        SemScenario::from_values(case, &self.gammas, self.n_per_env, seed)
    }
}

fn case_tag(kind: ScenarioKind) -> u64 {
    match kind {
        ScenarioKind::Case1 => 1,
        ScenarioKind::Case2 => 2,
        ScenarioKind::Case3 => 3,
        ScenarioKind::Case4 => 4,
        ScenarioKind::Case5 => 5,
        ScenarioKind::AppendixB1 => 6,
        ScenarioKind::NonIdentifiable => 7,
        ScenarioKind::Gmm { classes } => 100 + classes as u64,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaeRow {
    pub case: String,
    pub method: BenchMethod,
    pub mean: f64,
    pub sd: f64,
    pub reps: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub method: BenchMethod,
    pub train_mean: f64,
    pub train_sd: f64,
    pub test_mean: f64,
    pub test_sd: f64,
    pub reps: usize,
    pub failures: usize,
    /// Penalty weight picked on the validation environment, one per replication.
    pub selected_weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub cell: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchMetadata {
    pub suite: String,
    pub seed: u64,
    pub n_per_env: usize,
    pub environments: Vec<String>,
    pub reps: usize,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub metadata: BenchMetadata,
    pub mae: Vec<MaeRow>,
    pub accuracy: Vec<AccuracyRow>,
    pub appendix_b1: Option<AppendixB1Report>,
    pub failures: Vec<CellFailure>,
}

impl BenchReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// The main table as CSV.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        if !self.mae.is_empty() {
            w.write_record(["case", "method", "mae_mean", "mae_sd", "reps", "failures"])?;
            for r in &self.mae {
                w.write_record([
                    r.case.clone(),
                    r.method.to_string(),
                    r.mean.to_string(),
                    r.sd.to_string(),
                    r.reps.to_string(),
                    r.failures.to_string(),
                ])?;
            }
        } else if !self.accuracy.is_empty() {
            w.write_record([
                "method",
                "train_mean",
                "train_sd",
                "test_mean",
                "test_sd",
                "reps",
                "failures",
                "selected_weights",
            ])?;
            for r in &self.accuracy {
                let weights: Vec<String> = r.selected_weights.iter().map(|v| v.to_string()).collect();
                w.write_record([
                    r.method.to_string(),
                    r.train_mean.to_string(),
                    r.train_sd.to_string(),
                    r.test_mean.to_string(),
                    r.test_sd.to_string(),
                    r.reps.to_string(),
                    r.failures.to_string(),
                    weights.join(";"),
                ])?;
            }
        } else if let Some(b1) = &self.appendix_b1 {
            w.write_record(["sigma", "ols", "closed_form", "ols_max_error", "coco", "coco_max_error"])?;
            for r in &b1.environments {
                w.write_record([
                    r.sigma.to_string(),
                    join(&r.ols),
                    join(&r.closed_form),
                    r.ols_max_error.to_string(),
                    join(&b1.coco_solution),
                    b1.coco_max_error.to_string(),
                ])?;
            }
        }
        let bytes = w.into_inner().map_err(|e| CocoError::Io(e.into_error()))?;
        String::from_utf8(bytes).map_err(|e| CocoError::InvalidData(e.to_string()))
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

fn linear_fit(
    multi: &MultiEnvData,
    obj: &ObjectiveSpec,
    cfg: &OptimConfig,
) -> Result<Vec<f64>> {
    let shape = ModelShape::linear(multi.p());
    let fit = optimizer::fit(multi, RiskSpec::SQUARED, obj, cfg, &shape)?;
    if fit.diverged {
        return Err(CocoError::Singular(
            fit.diagnostic.unwrap_or_else(|| "fit diverged".into()),
        ));
    }
    Ok(fit.params.theta.iter().copied().collect())
}

/// Best MAE over a penalty grid, as in the standard reporting protocol for
/// the baselines.
fn best_over_grid(
    multi: &MultiEnvData,
    beta: &[f64],
    grid: &[f64],
    make: impl Fn(f64) -> ObjectiveSpec,
    cfg: &OptimConfig,
) -> Result<f64> {
    let mut best = f64::INFINITY;
    for &l in grid {
        let est = linear_fit(multi, &make(l), cfg)?;
        best = best.min(mae(&est, beta));
    }
    Ok(best)
}

/// MAE of one method on one dataset.
pub fn linear_cell(
    multi: &MultiEnvData,
    beta: &[f64],
    method: BenchMethod,
    cfg: &LinearSuiteConfig,
    seed: u64,
) -> Result<f64> {
    let mut optim = linear_optim_config(seed);
    optim.max_iters = cfg.max_iters;
    match method {
        BenchMethod::Erm => {
            let fit = optimizer::fit_ols_pooled(multi)?;
            Ok(mae(fit.theta.as_slice(), beta))
        }
        BenchMethod::Irmv1 => best_over_grid(multi, beta, &cfg.irm_lambdas, ObjectiveSpec::irmv1, &optim),
        BenchMethod::Vrex => best_over_grid(multi, beta, &cfg.vrex_lambdas, ObjectiveSpec::vrex, &optim),
        BenchMethod::Coco => {
            let est = linear_fit(multi, &ObjectiveSpec::coco_modified(cfg.nondescendants.clone()), &optim)?;
            Ok(mae(&est, beta))
        }
        BenchMethod::NaiveCoco => {
            let est = linear_fit(multi, &ObjectiveSpec::naive_coco(cfg.nondescendants.clone()), &optim)?;
            Ok(mae(&est, beta))
        }
        BenchMethod::Oracle => Err(CocoError::Config("the oracle method belongs to the gmm suite".into())),
    }
}

pub fn run_linear_suite(cfg: &LinearSuiteConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let datasets: Vec<(ScenarioKind, usize, Result<(MultiEnvData, Vec<f64>)>)> = cfg
        .cases
        .iter()
        .flat_map(|&k| (0..cfg.reps).map(move |r| (k, r)))
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(k, r)| {
            let data = generate(&cfg.scenario(k, r)).map(|(m, t)| (m, t.beta));
            (k, r, data)
        })
        .collect();
    let cells: Vec<(usize, BenchMethod)> = (0..datasets.len())
        .flat_map(|d| cfg.methods.iter().map(move |&m| (d, m)))
        .collect();
    let results: Vec<Result<f64>> = cells
        .par_iter()
        .map(|&(d, m)| {
            let (k, r, data) = &datasets[d];
            let (multi, beta) = data.as_ref().map_err(|e| CocoError::InvalidScenario(e.to_string()))?;
            let seed = rng::derive_seed(cfg.seed, &[case_tag(*k), *r as u64, 1 + m as u64]);
            linear_cell(multi, beta, m, cfg, seed)
        })
        .collect();

    let mut mae_rows = Vec::new();
    let mut failures = Vec::new();
    for &case in &cfg.cases {
        for &method in &cfg.methods {
            let mut values = Vec::new();
            let mut failed = 0;
            for (&(d, m), res) in cells.iter().zip(&results) {
                let (k, r, _) = &datasets[d];
                if *k != case || m != method {
                    continue;
                }
                match res {
                    Ok(v) => values.push(*v),
                    Err(e) => {
                        failed += 1;
                        failures.push(CellFailure {
                            cell: format!("{case}/{method}/rep{r}"),
                            error: e.to_string(),
                        });
                    }
                }
            }
            let (mean, sd) = mean_sd(&values);
            mae_rows.push(MaeRow {
                case: case.to_string(),
                method,
                mean,
                sd,
                reps: values.len(),
                failures: failed,
            });
        }
    }
    Ok(BenchReport {
        metadata: BenchMetadata {
            suite: Suite::LinearCases.to_string(),
            seed: cfg.seed,
            n_per_env: cfg.n_per_env,
            environments: cfg.gammas.iter().map(|g| format!("gamma={g}")).collect(),
            reps: cfg.reps,
            config: serde_json::to_value(cfg)?,
        },
        mae: mae_rows,
        accuracy: Vec::new(),
        appendix_b1: None,
        failures,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmSuiteConfig {
    pub classes: usize,
    /// Label-swap probabilities of the training environments.
    pub train_flips: Vec<f64>,
    pub n_per_env: usize,
    pub n_eval: usize,
    pub test_envs: usize,
    pub hidden: Vec<usize>,
    /// Penalty weights tried for every penalized method.
    pub weights: Vec<f64>,
    pub reps: usize,
    pub seed: u64,
    pub methods: Vec<BenchMethod>,
    pub step_size: f64,
    pub max_iters: usize,
    pub batch_size: usize,
}

impl Default for GmmSuiteConfig {
    fn default() -> Self {
        Self {
            classes: 5,
            train_flips: vec![0.01, 0.02, 0.03, 0.04, 0.05],
            n_per_env: 2000,
            n_eval: 2000,
            test_envs: 10,
            hidden: vec![16, 16],
            weights: log_grid(1.0, 100.0, 10),
            reps: 1,
            seed: 0,
            methods: vec![
                BenchMethod::Erm,
                BenchMethod::Irmv1,
                BenchMethod::Vrex,
                BenchMethod::Coco,
                BenchMethod::Oracle,
            ],
            step_size: 0.5,
            max_iters: 10_000,
            batch_size: 200,
        }
    }
}

impl GmmSuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(CocoError::Config("classes must be >= 2".into()));
        }
        if self.reps == 0 || self.test_envs == 0 || self.train_flips.is_empty() {
            return Err(CocoError::Config(
                "reps, test_envs and the training environments must be nonempty".into(),
            ));
        }
        if self.weights.is_empty() || self.weights.iter().any(|w| !(*w > 0.0)) {
            return Err(CocoError::Config("penalty weights must be positive".into()));
        }
        if self.methods.contains(&BenchMethod::NaiveCoco) {
            return Err(CocoError::Config("naive-coco belongs to the linear suite".into()));
        }
        Ok(())
    }

    pub fn optim_config(&self, seed: u64) -> OptimConfig {
        let mut cfg = OptimConfig {
            step_size: self.step_size,
            max_iters: self.max_iters,
            outer_grad: OuterGradient::HessianVector,
            init: Init::FanIn,
            seed,
            batch_size: self.batch_size,
            ..OptimConfig::default()
        };
        cfg.anneal.enabled = true;
        cfg
    }

    fn kind(&self) -> ScenarioKind {
        ScenarioKind::Gmm { classes: self.classes }
    }

    fn mixture(&self, flips: &[f64], n: usize, seed: u64) -> SemScenario {
        let params = flips
            .iter()
            .map(|&p| EnvParams::Mixture {
                flip_prob: p,
                u_vectors: None,
            })
            .collect();
        SemScenario::new(self.kind(), params, n, seed)
    }

    /// Training, validation and test data of one replication. Every
    /// environment draws its own mixture vectors.
    pub fn datasets(&self, rep: usize) -> Result<GmmData> {
        let base = rng::derive_seed(self.seed, &[case_tag(self.kind()), rep as u64]);
        let train = generate(&self.mixture(&self.train_flips, self.n_per_env, rng::child_seed(base, 0)))?.0;
        let validation = generate(&self.mixture(&[0.0], self.n_eval, rng::child_seed(base, 1)))?.0;
        let test = generate(&self.mixture(&vec![0.0; self.test_envs], self.n_eval, rng::child_seed(base, 2)))?.0;
        Ok(GmmData {
            train,
            validation,
            test,
            init_seed: rng::child_seed(base, 3),
        })
    }
}

pub struct GmmData {
    pub train: MultiEnvData,
    pub validation: MultiEnvData,
    pub test: MultiEnvData,
    pub init_seed: u64,
}

/// Accuracy in percent averaged over environments.
pub fn mean_accuracy(params: &ModelParams, multi: &MultiEnvData) -> Result<f64> {
    let mut total = 0.0;
    for env in &multi.environments {
        total += predictors::accuracy(params, env)?;
    }
    Ok(total / multi.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmCell {
    pub train: f64,
    pub test: f64,
    pub validation: f64,
    pub weight: Option<f64>,
}

fn gmm_train(
    data: &GmmData,
    columns: Option<&[usize]>,
    obj: &ObjectiveSpec,
    cfg: &GmmSuiteConfig,
) -> Result<GmmCell> {
    let (train, val, test) = match columns {
        Some(c) => (
            data.train.select_columns(c)?,
            data.validation.select_columns(c)?,
            data.test.select_columns(c)?,
        ),
        None => (data.train.clone(), data.validation.clone(), data.test.clone()),
    };
    let shape = ModelShape::mlp(train.p(), cfg.hidden.clone(), cfg.classes, Activation::Tanh);
    let mut optim = cfg.optim_config(data.init_seed);
    if obj.method == Method::Irmv1 {
        // The IRMv1 objective sums over environments where the others
        // average, so the step is scaled to match per environment.
        optim.step_size /= train.len() as f64;
    }
    let fit = optimizer::fit(&train, RiskSpec::CROSS_ENTROPY, obj, &optim, &shape)?;
    if fit.diverged {
        return Err(CocoError::Singular(fit.diagnostic.unwrap_or_else(|| "fit diverged".into())));
    }
    Ok(GmmCell {
        train: mean_accuracy(&fit.params, &train)?,
        validation: mean_accuracy(&fit.params, &val)?,
        test: mean_accuracy(&fit.params, &test)?,
        weight: None,
    })
}

/// Objective of a penalized method at penalty weight `w`. For CoCo the
/// weight multiplies the penalty relative to the risk, so the risk weight
/// is `1 / w`.
fn weighted_objective(method: BenchMethod, w: f64) -> Option<ObjectiveSpec> {
    match method {
        BenchMethod::Irmv1 => Some(ObjectiveSpec::irmv1(w)),
        BenchMethod::Vrex => Some(ObjectiveSpec::vrex(w)),
        BenchMethod::Coco => Some(ObjectiveSpec::coco_erm(1.0 / w)),
        _ => None,
    }
}

/// One method on one replication, with validation-based weight selection
/// for the penalized methods.
pub fn gmm_cell(data: &GmmData, method: BenchMethod, cfg: &GmmSuiteConfig) -> Result<GmmCell> {
    match method {
        BenchMethod::Erm => gmm_train(data, None, &ObjectiveSpec::erm(), cfg),
        BenchMethod::Oracle => {
            let x_cols: Vec<usize> = (0..cfg.classes).collect();
            gmm_train(data, Some(&x_cols), &ObjectiveSpec::erm(), cfg)
        }
        BenchMethod::NaiveCoco => Err(CocoError::Config("naive-coco belongs to the linear suite".into())),
        _ => {
            let runs: Vec<Result<GmmCell>> = cfg
                .weights
                .par_iter()
                .map(|&w| {
                    let obj = weighted_objective(method, w).expect("penalized method");
                    gmm_train(data, None, &obj, cfg).map(|c| GmmCell { weight: Some(w), ..c })
                })
                .collect();
            let mut best: Option<GmmCell> = None;
            let mut last_err = None;
            for r in runs {
                match r {
                    Ok(c) => {
                        if best.as_ref().is_none_or(|b| c.validation > b.validation) {
                            best = Some(c);
                        }
                    }
                    Err(e) => last_err = Some(e),
                }
            }
            best.ok_or_else(|| last_err.unwrap_or_else(|| CocoError::Config("empty weight grid".into())))
        }
    }
}

pub fn run_gmm_suite(cfg: &GmmSuiteConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let data: Vec<Result<GmmData>> = (0..cfg.reps).into_par_iter().map(|r| cfg.datasets(r)).collect();
    let cells: Vec<(usize, BenchMethod)> = (0..cfg.reps)
        .flat_map(|r| cfg.methods.iter().map(move |&m| (r, m)))
        .collect();
    let results: Vec<Result<GmmCell>> = cells
        .par_iter()
        .map(|&(r, m)| {
            let d = data[r].as_ref().map_err(|e| CocoError::InvalidScenario(e.to_string()))?;
            gmm_cell(d, m, cfg)
        })
        .collect();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for &method in &cfg.methods {
        let (mut train, mut test, mut weights, mut failed) = (Vec::new(), Vec::new(), Vec::new(), 0);
        for (&(r, m), res) in cells.iter().zip(&results) {
            if m != method {
                continue;
            }
            match res {
                Ok(c) => {
                    train.push(c.train);
                    test.push(c.test);
                    weights.extend(c.weight);
                }
                Err(e) => {
                    failed += 1;
                    failures.push(CellFailure {
                        cell: format!("gmm/{method}/rep{r}"),
                        error: e.to_string(),
                    });
                }
            }
        }
        let (train_mean, train_sd) = mean_sd(&train);
        let (test_mean, test_sd) = mean_sd(&test);
        rows.push(AccuracyRow {
            method,
            train_mean,
            train_sd,
            test_mean,
            test_sd,
            reps: train.len(),
            failures: failed,
            selected_weights: weights,
        });
    }
    Ok(BenchReport {
        metadata: BenchMetadata {
            suite: Suite::Gmm.to_string(),
            seed: cfg.seed,
            n_per_env: cfg.n_per_env,
            environments: cfg.train_flips.iter().map(|p| format!("flip={p}")).collect(),
            reps: cfg.reps,
            config: serde_json::to_value(cfg)?,
        },
        mae: Vec::new(),
        accuracy: rows,
        appendix_b1: None,
        failures,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppendixB1Config {
    pub sigmas: Vec<f64>,
    pub n_per_env: usize,
    pub seed: u64,
    pub tol: f64,
}

impl Default for AppendixB1Config {
    fn default() -> Self {
        Self {
            sigmas: vec![0.2, 0.5, 1.0],
            n_per_env: 100_000,
            seed: 0,
            tol: identify::INVARIANCE_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct B1Environment {
    pub sigma: f64,
    pub ols: Vec<f64>,
    pub closed_form: Vec<f64>,
    pub ols_max_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppendixB1Report {
    pub environments: Vec<B1Environment>,
    pub coco_solution: Vec<f64>,
    pub coco_max_error: f64,
    /// Intersection of the per-environment plausible sets in all four
    /// coordinates.
    pub intersection: Vec<Vec<f64>>,
    /// Intersections within the independent blocks `(x1, z1)` and `(x2, z2)`.
    pub block_intersections: Vec<Vec<Vec<f64>>>,
}

/// Per-environment least squares `(1, 1, v, v) / (1 + v)` with `v = σ²`.
pub fn appendix_b1_closed_form(sigma: f64) -> Vec<f64> {
    let v = sigma * sigma;
    vec![1.0 / (1.0 + v), 1.0 / (1.0 + v), v / (1.0 + v), v / (1.0 + v)]
}

pub fn run_appendix_b1(cfg: &AppendixB1Config) -> Result<BenchReport> {
    if cfg.sigmas.is_empty() {
        return Err(CocoError::Config("at least one sigma is required".into()));
    }
    let scenario = SemScenario::from_values(ScenarioKind::AppendixB1, &cfg.sigmas, cfg.n_per_env, cfg.seed);
    let (multi, truth) = generate(&scenario)?;
    let mut environments = Vec::new();
    for (env, &sigma) in multi.environments.iter().zip(&cfg.sigmas) {
        let ols: Vec<f64> = optimizer::fit_ols_closed_form(env)?.theta.iter().copied().collect();
        let closed_form = appendix_b1_closed_form(sigma);
        let ols_max_error = ols
            .iter()
            .zip(&closed_form)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        environments.push(B1Environment {
            sigma,
            ols,
            closed_form,
            ols_max_error,
        });
    }
    let obj = ObjectiveSpec::coco_modified(ScenarioKind::AppendixB1.default_nondescendants());
    let coco_solution = linear_fit(&multi, &obj, &linear_optim_config(rng::child_seed(cfg.seed, 1)))?;
    let coco_max_error = coco_solution
        .iter()
        .zip(&truth.beta)
        .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
    let intersection = identify::intersect_plausible_sets(&multi, cfg.tol)?;
    let block_intersections = [[0usize, 2], [1, 3]]
        .iter()
        .map(|cols| identify::intersect_plausible_sets(&multi.select_columns(cols)?, cfg.tol))
        .collect::<Result<_>>()?;
    Ok(BenchReport {
        metadata: BenchMetadata {
            suite: Suite::AppendixB1.to_string(),
            seed: cfg.seed,
            n_per_env: cfg.n_per_env,
            environments: cfg.sigmas.iter().map(|s| format!("sigma={s}")).collect(),
            reps: 1,
            config: serde_json::to_value(cfg)?,
        },
        mae: Vec::new(),
        accuracy: Vec::new(),
        appendix_b1: Some(AppendixB1Report {
            environments,
            coco_solution,
            coco_max_error,
            intersection,
            block_intersections,
        }),
        failures: Vec::new(),
    })
}
