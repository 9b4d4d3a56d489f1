//! Gradient descent on the objectives with backtracking, risk-weight
//! annealing, several outer-gradient strategies and best-iterate return.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::env_data::{EnvironmentDataset, MultiEnvData};
use crate::error::{CocoError, Result};
use crate::linalg::{self, GramStats};
use crate::objectives::{
    self, evaluate, quadratic_oracles, sample_oracles, EnvironmentOracle, Method, ObjectiveSpec,
};
use crate::predictors::{ModelKind, ModelParams, ModelShape, RiskSpec};
use crate::rng;

/// Objective magnitude treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e12;
/// Consecutive accepted steps after which the step size is reset.
pub const RESTORE_AFTER: usize = 10;
/// Consecutive halvings after which the run is considered stalled.
pub const MAX_HALVINGS: usize = 60;
/// Stream tag for batch draws, kept apart from the initialization stream.
const BATCH_STREAM: u64 = 0xBA7C;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnealConfig {
    pub enabled: bool,
    /// Fraction of `max_iters` after which annealing may start.
    pub trigger_fraction: f64,
    /// Minimal parameter norm before annealing starts; `None` means
    /// `0.1 * sqrt(dim)`.
    pub escape_norm: Option<f64>,
    /// Per-iteration multiplier applied to the risk weight once triggered.
    pub decay_factor: f64,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            trigger_fraction: 0.5,
            escape_norm: None,
            decay_factor: 0.99,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OuterGradient {
    /// Closed form from Gram statistics (linear model, squared loss).
    Analytic,
    /// Central differences of the total objective, coordinate by coordinate.
    FiniteDifference,
    /// Analytic risk gradients plus exact Hessian-vector products evaluated
    /// on the raw samples. Works for every model.
    HessianVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Init {
    /// Every coordinate drawn from `N(0, jitter²)`.
    ZeroPlusJitter,
    /// Start from the given flat vector.
    GivenVector(Vec<f64>),
    /// Every Mlp weight and bias drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanIn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preconditioner {
    Identity,
    /// Scales each coordinate by the inverse mean second moment of its
    /// covariate (linear and logistic models only).
    Diagonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub step_size: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub anneal: AnnealConfig,
    pub outer_grad: OuterGradient,
    pub fd_step: f64,
    pub init: Init,
    /// Standard deviation of the `ZeroPlusJitter` draw.
    pub jitter: f64,
    pub seed: u64,
    /// One run per entry; the run with the lowest final objective wins.
    pub starts: Vec<Preconditioner>,
    /// Record the objective every this many iterations (0 = automatic).
    pub trace_every: usize,
    /// Rows drawn with replacement from each environment per step; 0 uses
    /// the full sample with backtracking, any other value runs fixed-step
    /// stochastic gradient descent.
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            step_size: 1.0,
            max_iters: 10_000,
            tol: 1e-10,
            anneal: AnnealConfig::default(),
            outer_grad: OuterGradient::Analytic,
            fd_step: 1e-4,
            init: Init::ZeroPlusJitter,
            jitter: 0.01,
            seed: 0,
            starts: vec![Preconditioner::Identity],
            trace_every: 0,
            batch_size: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CocoError::Config(m));
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad(format!("step_size must be positive, got {}", self.step_size));
        }
        if self.max_iters == 0 {
            return bad("max_iters must be >= 1".into());
        }
        if !(self.tol > 0.0) {
            return bad(format!("tol must be positive, got {}", self.tol));
        }
        if !(self.fd_step > 0.0 && self.fd_step.is_finite()) {
            return bad(format!("fd_step must be positive, got {}", self.fd_step));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return bad(format!("jitter must be nonnegative, got {}", self.jitter));
        }
        let a = &self.anneal;
        if !(a.trigger_fraction > 0.0 && a.trigger_fraction <= 1.0) {
            return bad(format!("trigger_fraction must lie in (0, 1], got {}", a.trigger_fraction));
        }
        if !(a.decay_factor > 0.0 && a.decay_factor <= 1.0) {
            return bad(format!("decay_factor must lie in (0, 1], got {}", a.decay_factor));
        }
        if let Some(e) = a.escape_norm {
            if !(e > 0.0) {
                return bad(format!("escape_norm must be positive, got {e}"));
            }
        }
        if self.starts.is_empty() {
            return bad("at least one start is required".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: ModelParams,
    /// `(iteration, objective)` samples of the winning run.
    pub objective_trace: Vec<(usize, f64)>,
    pub converged: bool,
    pub final_gradient_norm: f64,
    pub final_objective: f64,
    pub initial_objective: f64,
    pub iterations: usize,
    /// Risk weight at the end of the run (after annealing).
    pub final_lambda_r: f64,
    pub diverged: bool,
    pub diagnostic: Option<String>,
    /// Preconditioner of the winning run.
    pub start: Preconditioner,
}

/// Objective split into the part that does not depend on the risk weight and
/// the mean risk, so the annealed weight can be changed without recomputing.
#[derive(Debug, Clone)]
struct Split {
    base: f64,
    risk: f64,
    base_grad: DVector<f64>,
    risk_grad: DVector<f64>,
}

impl Split {
    fn value(&self, lambda_r: f64) -> f64 {
        self.base + lambda_r * self.risk
    }

    fn gradient(&self, lambda_r: f64) -> DVector<f64> {
        if lambda_r == 0.0 {
            self.base_grad.clone()
        } else {
            &self.base_grad + &self.risk_grad * lambda_r
        }
    }
}

enum Oracles<'a> {
    Quadratic(Vec<objectives::QuadraticOracle>),
    Sample(Vec<objectives::SampleOracle<'a>>),
}

struct Problem<'a> {
    multi: &'a MultiEnvData,
    risk: RiskSpec,
    oracles: Oracles<'a>,
    /// Objective with the risk weight removed (CocoErm) or unchanged.
    base_spec: ObjectiveSpec,
    anneals: bool,
    mode: OuterGradient,
    fd_step: f64,
}

impl Problem<'_> {
    fn eval_with<O: EnvironmentOracle>(&self, oracles: &[O], params: &ModelParams) -> Result<Split> {
        let dim = params.len();
        let e = oracles.len() as f64;
        let (base, base_grad, risk, risk_grad) = match self.mode {
            OuterGradient::FiniteDifference => {
                let v = evaluate(params, oracles, &self.base_spec, false)?;
                let mut grad = DVector::zeros(dim);
                let mut probe = params.clone();
                for j in 0..dim {
                    let orig = probe.theta[j];
                    probe.theta[j] = orig + self.fd_step;
                    let up = evaluate(&probe, oracles, &self.base_spec, false)?.value;
                    probe.theta[j] = orig - self.fd_step;
                    let down = evaluate(&probe, oracles, &self.base_spec, false)?.value;
                    probe.theta[j] = orig;
                    grad[j] = (up - down) / (2.0 * self.fd_step);
                }
                let (risk, risk_grad) = if self.anneals {
                    let mut g = DVector::zeros(dim);
                    for o in oracles {
                        g += o.risk_and_gradient(params)?.1 / e;
                    }
                    (v.risks.iter().sum::<f64>() / e, g)
                } else {
                    (0.0, DVector::zeros(dim))
                };
                (v.value, grad, risk, risk_grad)
            }
            _ => {
                let v = evaluate(params, oracles, &self.base_spec, true)?;
                let risk = v.risks.iter().sum::<f64>() / e;
                let risk_grad = v.mean_risk_gradient.expect("gradient requested");
                (v.value, v.gradient.expect("gradient requested"), risk, risk_grad)
            }
        };
        Ok(Split {
            base,
            risk,
            base_grad,
            risk_grad,
        })
    }

    fn eval(&self, params: &ModelParams) -> Result<Split> {
        match &self.oracles {
            Oracles::Quadratic(o) => self.eval_with(o, params),
            Oracles::Sample(o) => self.eval_with(o, params),
        }
    }
}

fn initial_params(shape: &ModelShape, cfg: &OptimConfig, start: usize) -> Result<ModelParams> {
    let mut stream = rng::child_stream(cfg.seed, &[start as u64]);
    match &cfg.init {
        Init::GivenVector(v) => ModelParams::new(shape.clone(), DVector::from_column_slice(v)),
        Init::ZeroPlusJitter => {
            if cfg.jitter == 0.0 {
                ModelParams::zeros(shape.clone())
            } else {
                ModelParams::random(shape.clone(), cfg.jitter, &mut stream)
            }
        }
        Init::FanIn => {
            let mut theta = DVector::zeros(shape.param_count());
            match shape.kind {
                ModelKind::Mlp => {
                    let sizes = shape.layer_sizes();
                    for (l, (w_at, b_at)) in shape.layer_offsets().into_iter().enumerate() {
                        let bound = 1.0 / (sizes[l] as f64).sqrt();
                        let d = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                        for j in w_at..b_at + sizes[l + 1] {
                            theta[j] = d.sample(&mut stream);
                        }
                    }
                }
                _ => {
                    let bound = 1.0 / (shape.input as f64).sqrt();
                    for v in theta.iter_mut() {
                        *v = stream.random_range(-bound..=bound);
                    }
                }
            }
            ModelParams::new(shape.clone(), theta)
        }
    }
}

fn preconditioner(multi: &MultiEnvData, shape: &ModelShape, kind: Preconditioner) -> Result<DVector<f64>> {
    match kind {
        Preconditioner::Identity => Ok(DVector::from_element(shape.param_count(), 1.0)),
        Preconditioner::Diagonal => {
            if shape.kind == ModelKind::Mlp {
                return Err(CocoError::Unsupported(
                    "diagonal preconditioning is available for linear and logistic models".into(),
                ));
            }
            let p = multi.p();
            let mut d = DVector::zeros(p);
            for env in &multi.environments {
                for j in 0..p {
                    d[j] += env.x.column(j).norm_squared() / env.n() as f64;
                }
            }
            d /= multi.len() as f64;
            Ok(d.map(|v| if v > 0.0 { 1.0 / v } else { 1.0 }))
        }
    }
}

struct RunOutcome {
    params: ModelParams,
    trace: Vec<(usize, f64)>,
    final_objective: f64,
    initial_objective: f64,
    gradient_norm: f64,
    iterations: usize,
    lambda_r: f64,
    diverged: bool,
    diagnostic: Option<String>,
}

fn run_once(
    problem: &Problem<'_>,
    obj: &ObjectiveSpec,
    cfg: &OptimConfig,
    mut params: ModelParams,
    precond: &DVector<f64>,
) -> Result<RunOutcome> {
    let dim = params.len();
    let trace_every = if cfg.trace_every == 0 {
        (cfg.max_iters / 1000).max(1)
    } else {
        cfg.trace_every
    };
    let escape = cfg.anneal.escape_norm.unwrap_or(0.1 * (dim as f64).sqrt());
    let mut lambda_r = if problem.anneals { obj.lambda_r } else { 0.0 };
    let trigger = (cfg.anneal.trigger_fraction * cfg.max_iters as f64) as usize;

    let mut cur = problem.eval(&params)?;
    let initial = cur.value(lambda_r);
    if !initial.is_finite() {
        return Ok(RunOutcome {
            final_objective: initial,
            initial_objective: initial,
            gradient_norm: f64::NAN,
            trace: vec![(0, initial)],
            params,
            iterations: 0,
            lambda_r,
            diverged: true,
            diagnostic: Some("objective is not finite at the initial point".into()),
        });
    }
    let mut best = (params.clone(), cur.clone());
    let mut trace = vec![(0, initial)];
    let mut eta = cfg.step_size;
    let mut successes = 0;
    let mut halvings = 0;
    let mut diagnostic = None;
    let mut iter = 0;

    while iter < cfg.max_iters {
        iter += 1;
        if problem.anneals
            && cfg.anneal.enabled
            && lambda_r > 0.0
            && iter > trigger
            && params.theta.norm() > escape
        {
            lambda_r *= cfg.anneal.decay_factor;
            if lambda_r < 1e-12 {
                lambda_r = 0.0;
            }
        }
        let f = cur.value(lambda_r);
        let grad = cur.gradient(lambda_r);
        if grad.norm() < cfg.tol {
            break;
        }
        let candidate = params.with_theta(&params.theta - grad.component_mul(precond) * eta);
        let next = problem.eval(&candidate)?;
        let fn_ = next.value(lambda_r);
        if fn_.is_finite() && fn_ <= f {
            params = candidate;
            cur = next;
            halvings = 0;
            successes += 1;
            if successes >= RESTORE_AFTER {
                successes = 0;
                eta = cfg.step_size;
            }
        } else {
            eta *= 0.5;
            successes = 0;
            halvings += 1;
            if halvings >= MAX_HALVINGS {
                diagnostic = Some(format!("step size underflow after {iter} iterations"));
                break;
            }
        }
        if cur.value(lambda_r) <= best.1.value(lambda_r) {
            best = (params.clone(), cur.clone());
        }
        if iter % trace_every == 0 {
            trace.push((iter, cur.value(lambda_r)));
        }
    }
    let final_objective = best.1.value(lambda_r);
    let gradient_norm = best.1.gradient(lambda_r).norm();
    if trace.last().map(|t| t.0) != Some(iter) {
        trace.push((iter, cur.value(lambda_r)));
    }
    let diverged = !final_objective.is_finite() || final_objective.abs() > DIVERGENCE_LIMIT;
    if diverged {
        diagnostic = Some(format!("objective diverged to {final_objective:e}"));
    }
    Ok(RunOutcome {
        params: best.0,
        trace,
        final_objective,
        initial_objective: initial,
        gradient_norm,
        iterations: iter,
        lambda_r,
        diverged,
        diagnostic,
    })
}

/// Fixed-step stochastic gradient descent on fresh per-environment batches.
/// The batch penalty is the squared batch-mean gradient; the returned
/// objective is recomputed on the full sample at the last iterate.
fn run_stochastic(
    problem: &Problem<'_>,
    obj: &ObjectiveSpec,
    cfg: &OptimConfig,
    mut params: ModelParams,
    precond: &DVector<f64>,
    start: usize,
) -> Result<RunOutcome> {
    let dim = params.len();
    let trace_every = if cfg.trace_every == 0 {
        (cfg.max_iters / 1000).max(1)
    } else {
        cfg.trace_every
    };
    let escape = cfg.anneal.escape_norm.unwrap_or(0.1 * (dim as f64).sqrt());
    let mut lambda_r = if problem.anneals { obj.lambda_r } else { 0.0 };
    let trigger = (cfg.anneal.trigger_fraction * cfg.max_iters as f64) as usize;
    let initial = problem.eval(&params)?.value(lambda_r);
    let mut stream = rng::child_stream(cfg.seed, &[start as u64, BATCH_STREAM]);
    let mut trace = vec![(0, initial)];
    let mut diagnostic = None;
    let mut iter = 0;
    while iter < cfg.max_iters {
        iter += 1;
        if problem.anneals
            && cfg.anneal.enabled
            && lambda_r > 0.0
            && iter > trigger
            && params.theta.norm() > escape
        {
            lambda_r *= cfg.anneal.decay_factor;
            if lambda_r < 1e-12 {
                lambda_r = 0.0;
            }
        }
        let batches: Vec<EnvironmentDataset> = problem
            .multi
            .environments
            .iter()
            .map(|env| {
                let rows: Vec<usize> = (0..cfg.batch_size).map(|_| stream.random_range(0..env.n())).collect();
                env.select_rows(&rows)
            })
            .collect::<Result<_>>()?;
        let oracles: Vec<objectives::SampleOracle<'_>> = batches
            .iter()
            .map(|data| objectives::SampleOracle {
                data,
                risk: problem.risk,
            })
            .collect();
        let split = problem.eval_with(&oracles, &params)?;
        let value = split.value(lambda_r);
        if !value.is_finite() || value.abs() > DIVERGENCE_LIMIT {
            diagnostic = Some(format!("batch objective diverged to {value:e} at iteration {iter}"));
            break;
        }
        if iter % trace_every == 0 {
            trace.push((iter, value));
        }
        let grad = split.gradient(lambda_r);
        params = params.with_theta(&params.theta - grad.component_mul(precond) * cfg.step_size);
    }
    let last = problem.eval(&params)?;
    let final_objective = last.value(lambda_r);
    let diverged = diagnostic.is_some() || !final_objective.is_finite() || final_objective.abs() > DIVERGENCE_LIMIT;
    if diverged && diagnostic.is_none() {
        diagnostic = Some(format!("objective diverged to {final_objective:e}"));
    }
    Ok(RunOutcome {
        gradient_norm: last.gradient(lambda_r).norm(),
        params,
        trace,
        final_objective,
        initial_objective: initial,
        iterations: iter,
        lambda_r,
        diverged,
        diagnostic,
    })
}

fn build_problem<'a>(
    multi: &'a MultiEnvData,
    risk: RiskSpec,
    obj: &ObjectiveSpec,
    cfg: &OptimConfig,
    shape: &ModelShape,
) -> Result<Problem<'a>> {
    risk.validate(shape)?;
    obj.validate(shape.input)?;
    objectives::check_layout(shape, multi)?;
    let quadratic = objectives::is_quadratic(shape, risk);
    if cfg.outer_grad == OuterGradient::Analytic && !quadratic {
        return Err(CocoError::Unsupported(
            "analytic outer gradients require a linear model with squared loss".into(),
        ));
    }
    let anneals = obj.method == Method::CocoErm;
    let mut base_spec = obj.clone();
    if anneals {
        base_spec.lambda_r = 0.0;
    }
    let oracles = if cfg.outer_grad == OuterGradient::Analytic
        || (quadratic && obj.estimator != objectives::Estimator::UnbiasedApprox1)
    {
        Oracles::Quadratic(quadratic_oracles(multi))
    } else {
        Oracles::Sample(sample_oracles(multi, risk))
    };
    Ok(Problem {
        multi,
        risk,
        oracles,
        base_spec,
        anneals,
        mode: cfg.outer_grad,
        fd_step: cfg.fd_step,
    })
}

/// Minimizes the objective from every configured start and returns the best
/// run's lowest-objective iterate.
pub fn fit(
    multi: &MultiEnvData,
    risk: RiskSpec,
    obj: &ObjectiveSpec,
    cfg: &OptimConfig,
    shape: &ModelShape,
) -> Result<FitResult> {
    cfg.validate()?;
    let problem = build_problem(multi, risk, obj, cfg, shape)?;
    let mut best: Option<(RunOutcome, Preconditioner)> = None;
    for (s, &kind) in cfg.starts.iter().enumerate() {
        let init = initial_params(shape, cfg, s)?;
        let precond = preconditioner(multi, shape, kind)?;
        let run = if cfg.batch_size == 0 {
            run_once(&problem, obj, cfg, init, &precond)?
        } else {
            run_stochastic(&problem, obj, cfg, init, &precond, s)?
        };
        let better = match &best {
            None => true,
            Some((b, _)) => {
                (b.diverged && !run.diverged)
                    || (!run.diverged && run.final_objective < b.final_objective)
            }
        };
        if better {
            best = Some((run, kind));
        }
    }
    let (run, start) = best.expect("at least one start");
    let converged = !run.diverged && run.gradient_norm < cfg.tol && run.final_objective <= run.initial_objective;
    Ok(FitResult {
        params: run.params,
        objective_trace: run.trace,
        converged,
        final_gradient_norm: run.gradient_norm,
        final_objective: run.final_objective,
        initial_objective: run.initial_objective,
        iterations: run.iterations,
        final_lambda_r: run.lambda_r,
        diverged: run.diverged,
        diagnostic: run.diagnostic,
        start,
    })
}

/// Gradient of the objective (risk weight as given) in the requested mode.
pub fn outer_gradient(
    params: &ModelParams,
    multi: &MultiEnvData,
    risk: RiskSpec,
    obj: &ObjectiveSpec,
    cfg: &OptimConfig,
) -> Result<DVector<f64>> {
    if obj.method == Method::Erm {
        return Err(CocoError::InvalidObjective(
            "outer gradients are defined for penalized objectives".into(),
        ));
    }
    let problem = build_problem(multi, risk, obj, cfg, &params.shape)?;
    let lambda_r = if problem.anneals { obj.lambda_r } else { 0.0 };
    Ok(problem.eval(params)?.gradient(lambda_r))
}

/// Ordinary least squares from the normal equations.
pub fn fit_ols_closed_form(data: &EnvironmentDataset) -> Result<ModelParams> {
    let stats = GramStats::from_dataset(data);
    let alpha = linalg::solve_spd(&stats.w, &stats.b)?;
    ModelParams::new(ModelShape::linear(data.p()), alpha)
}

/// Ordinary least squares on all environments pooled.
pub fn fit_ols_pooled(multi: &MultiEnvData) -> Result<ModelParams> {
    fit_ols_closed_form(&multi.pooled()?)
}

/// Standard normal jitter helper exposed for tests of the initialization law.
pub fn jitter_draw(seed: u64, n: usize, scale: f64) -> Vec<f64> {
    let mut s = rng::stream(seed);
    let d = Normal::new(0.0, scale).expect("finite scale");
    (0..n).map(|_| d.sample(&mut s)).collect()
}
