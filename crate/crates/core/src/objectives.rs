//! Training objectives: the CoCo penalty and its mini-batch estimators, the
//! masked variant for known non-descendants, grouped (partition) penalties,
//! the IRMv1 penalty, V-REx and plain risk minimization.
//!
//! All penalties are squared norms of Hadamard-type products between the risk
//! gradient and a weight vector derived from the parameters.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::env_data::{EnvironmentDataset, MultiEnvData};
use crate::error::{CocoError, Result};
use crate::linalg::GramStats;
use crate::predictors::{self, ModelKind, ModelParams, ModelShape, RiskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Erm,
    Coco,
    CocoModified,
    CocoErm,
    Irmv1,
    Vrex,
    /// The masked objective with the weak (inner-product) penalty in place of
    /// the coordinate-wise one.
    NaiveCoco,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Erm => "erm",
            Self::Coco => "coco",
            Self::CocoModified => "coco-modified",
            Self::CocoErm => "coco-erm",
            Self::Irmv1 => "irmv1",
            Self::Vrex => "vrex",
            Self::NaiveCoco => "naive-coco",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = CocoError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "erm" => Self::Erm,
            "coco" => Self::Coco,
            "coco-modified" | "cocomodified" | "modified" => Self::CocoModified,
            "coco-erm" | "cocoerm" => Self::CocoErm,
            "irmv1" | "irm" => Self::Irmv1,
            "vrex" | "v-rex" => Self::Vrex,
            "naive-coco" | "naivecoco" => Self::NaiveCoco,
            other => return Err(CocoError::InvalidObjective(format!("unknown method `{other}`"))),
        })
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Estimator {
    /// Squared full-sample gradient.
    PopulationStyle,
    /// Squared mean minus the variance correction; unbiased for the
    /// population penalty.
    UnbiasedApprox1,
    /// Squared sample mean; an upper bound in expectation.
    BiasedApprox2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub method: Method,
    pub lambda_r: f64,
    pub lambda: f64,
    pub lambda_w: f64,
    pub lambda_vrex: f64,
    pub estimator: Estimator,
    /// Covariate indices known not to descend from the outcome.
    pub nondescendant_mask: Option<Vec<usize>>,
}

impl ObjectiveSpec {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            lambda_r: 0.0,
            lambda: 0.0,
            lambda_w: 0.0,
            lambda_vrex: 0.0,
            estimator: Estimator::PopulationStyle,
            nondescendant_mask: None,
        }
    }

    pub fn erm() -> Self {
        Self::new(Method::Erm)
    }

    pub fn coco() -> Self {
        Self::new(Method::Coco)
    }

    pub fn coco_modified(mask: Vec<usize>) -> Self {
        Self {
            nondescendant_mask: Some(mask),
            ..Self::new(Method::CocoModified)
        }
    }

    pub fn naive_coco(mask: Vec<usize>) -> Self {
        Self {
            nondescendant_mask: Some(mask),
            ..Self::new(Method::NaiveCoco)
        }
    }

    pub fn coco_erm(lambda_r: f64) -> Self {
        Self {
            lambda_r,
            ..Self::new(Method::CocoErm)
        }
    }

    pub fn irmv1(lambda: f64) -> Self {
        Self {
            lambda,
            ..Self::new(Method::Irmv1)
        }
    }

    pub fn vrex(lambda_vrex: f64) -> Self {
        Self {
            lambda_vrex,
            ..Self::new(Method::Vrex)
        }
    }

    /// Checks weights and the mask against a covariate count `p`.
    pub fn validate(&self, p: usize) -> Result<()> {
        for (name, v) in [
            ("lambda_r", self.lambda_r),
            ("lambda", self.lambda),
            ("lambda_w", self.lambda_w),
            ("lambda_vrex", self.lambda_vrex),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(CocoError::InvalidObjective(format!(
                    "{name} must be a nonnegative finite number, got {v}"
                )));
            }
        }
        let needs_mask = matches!(self.method, Method::CocoModified | Method::NaiveCoco);
        match &self.nondescendant_mask {
            None | Some(_) if !needs_mask => {}
            Some(m) if !m.is_empty() => {}
            _ => {
                return Err(CocoError::InvalidObjective(format!(
                    "{} requires a nonempty non-descendant set",
                    self.method
                )))
            }
        }
        if let Some(m) = &self.nondescendant_mask {
            if let Some(&j) = m.iter().find(|&&j| j >= p) {
                return Err(CocoError::InvalidIndexSet(format!(
                    "non-descendant index {j} out of range for p = {p}"
                )));
            }
        }
        Ok(())
    }

    /// Mask used by the penalty, if the method applies one.
    pub fn active_mask(&self) -> Option<&[usize]> {
        match self.method {
            Method::CocoModified | Method::NaiveCoco => self.nondescendant_mask.as_deref(),
            _ => None,
        }
    }
}

/// Weight vector and flags describing a masked Hadamard penalty over the flat
/// parameter vector: `weights[j]` is 1 where the mask pins the coordinate and
/// `theta[j]` otherwise; `free[j]` records which case applies.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyWeights {
    pub weights: DVector<f64>,
    pub free: Vec<bool>,
}

impl PenaltyWeights {
    /// Unmasked weights (`weights = theta`).
    pub fn plain(params: &ModelParams) -> Self {
        Self {
            weights: params.theta.clone(),
            free: vec![true; params.len()],
        }
    }

    /// Weights with the parameters attached to covariates `mask` pinned to 1.
    pub fn masked(params: &ModelParams, mask: &[usize]) -> Result<Self> {
        if mask.is_empty() {
            return Err(CocoError::InvalidIndexSet("non-descendant set is empty".into()));
        }
        let mut out = Self::plain(params);
        for &c in mask {
            if c >= params.shape.input {
                return Err(CocoError::InvalidIndexSet(format!(
                    "covariate index {c} out of range for p = {}",
                    params.shape.input
                )));
            }
            for j in params.shape.input_column_indices(c) {
                out.weights[j] = 1.0;
                out.free[j] = false;
            }
        }
        Ok(out)
    }

    pub fn for_spec(params: &ModelParams, obj: &ObjectiveSpec) -> Result<Self> {
        match obj.active_mask() {
            Some(mask) => Self::masked(params, mask),
            None => Ok(Self::plain(params)),
        }
    }
}

/// Group structure of a penalty: every coordinate alone (strong form), all
/// coordinates together (weak form), or an explicit partition.
#[derive(Debug, Clone, PartialEq)]
pub enum Grouping {
    Singletons,
    Whole,
    Partition(Vec<Vec<usize>>),
}

impl Grouping {
    /// Group id of every coordinate.
    fn labels(&self, dim: usize) -> Vec<usize> {
        match self {
            Self::Singletons => (0..dim).collect(),
            Self::Whole => vec![0; dim],
            Self::Partition(parts) => {
                let mut labels = vec![0; dim];
                for (g, part) in parts.iter().enumerate() {
                    for &j in part {
                        labels[j] = g;
                    }
                }
                labels
            }
        }
    }

    fn count(&self, dim: usize) -> usize {
        match self {
            Self::Singletons => dim,
            Self::Whole => 1,
            Self::Partition(parts) => parts.len(),
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if let Self::Partition(parts) = self {
            let mut seen = vec![false; dim];
            for part in parts {
                if part.is_empty() {
                    return Err(CocoError::InvalidIndexSet("partition contains an empty block".into()));
                }
                for &j in part {
                    if j >= dim {
                        return Err(CocoError::InvalidIndexSet(format!(
                            "partition index {j} out of range for {dim} parameters"
                        )));
                    }
                    if seen[j] {
                        return Err(CocoError::InvalidIndexSet(format!(
                            "index {j} appears in more than one block"
                        )));
                    }
                    seen[j] = true;
                }
            }
            if let Some(j) = seen.iter().position(|s| !s) {
                return Err(CocoError::InvalidIndexSet(format!(
                    "partition does not cover index {j}"
                )));
            }
        }
        Ok(())
    }
}

/// Group sums `s_A = Σ_{j∈A} g_j w_j`.
fn group_sums(g: &DVector<f64>, w: &DVector<f64>, labels: &[usize], groups: usize) -> Vec<f64> {
    let mut s = vec![0.0; groups];
    for j in 0..g.len() {
        s[labels[j]] += g[j] * w[j];
    }
    s
}

/// `Σ_A (Σ_{j∈A} g_j w_j)²` for a fixed gradient.
pub fn grouped_penalty_value(g: &DVector<f64>, w: &PenaltyWeights, grouping: &Grouping) -> Result<f64> {
    grouping.validate(g.len())?;
    let labels = grouping.labels(g.len());
    let s = group_sums(g, &w.weights, &labels, grouping.count(g.len()));
    Ok(s.iter().map(|v| v * v).sum())
}

/// Unbiased mini-batch estimate of the grouped penalty from per-sample
/// gradients: for each group, the squared mean of the per-sample group sums
/// minus their sample variance divided by the batch size.
pub fn grouped_penalty_unbiased(
    per_sample: &DMatrix<f64>,
    w: &PenaltyWeights,
    grouping: &Grouping,
) -> Result<f64> {
    let k = per_sample.nrows();
    if k < 2 {
        return Err(CocoError::InvalidData(format!(
            "unbiased estimator needs a batch of at least 2 samples, got {k}"
        )));
    }
    let dim = per_sample.ncols();
    grouping.validate(dim)?;
    let labels = grouping.labels(dim);
    let groups = grouping.count(dim);
    let mut sums: DMatrix<f64> = DMatrix::zeros(k, groups);
    for i in 0..k {
        for j in 0..dim {
            sums[(i, labels[j])] += per_sample[(i, j)] * w.weights[j];
        }
    }
    let kf = k as f64;
    let mut total = 0.0;
    for col in sums.column_iter() {
        let mean = col.mean();
        let mean_sq = col.iter().map(|v| v * v).sum::<f64>() / kf;
        let var = col.iter().map(|v: &f64| (v - mean).powi(2)).sum::<f64>() / (kf - 1.0);
        total += mean_sq - var;
    }
    Ok(total)
}

/// Gradient in `theta` of the grouped penalty, given the risk gradient `g`
/// and a Hessian-vector product oracle.
///
/// With `s_A` the group sums and `u_j = s_{A(j)} w_j`, the gradient is
/// `2 H u + 2 (s_{A(j)} g_j [j free])_j`.
pub fn grouped_penalty_gradient(
    g: &DVector<f64>,
    w: &PenaltyWeights,
    grouping: &Grouping,
    hvp: impl FnOnce(&DVector<f64>) -> Result<DVector<f64>>,
) -> Result<(f64, DVector<f64>)> {
    let parts = grouped_penalty_parts(g, w, grouping);
    let grad = hvp(&parts.curvature_dir)? * 2.0 + parts.direct;
    Ok((parts.value, grad))
}

/// Penalty value with its gradient split as `2 H u + direct`, where `H` is
/// the risk Hessian. Splitting lets several penalties share one
/// Hessian-vector product.
pub struct PenaltyParts {
    pub value: f64,
    pub curvature_dir: DVector<f64>,
    pub direct: DVector<f64>,
}

pub fn grouped_penalty_parts(g: &DVector<f64>, w: &PenaltyWeights, grouping: &Grouping) -> PenaltyParts {
    let dim = g.len();
    let labels = grouping.labels(dim);
    let s = group_sums(g, &w.weights, &labels, grouping.count(dim));
    let value = s.iter().map(|v| v * v).sum();
    let curvature_dir = DVector::from_fn(dim, |j, _| s[labels[j]] * w.weights[j]);
    let direct = DVector::from_fn(dim, |j, _| if w.free[j] { 2.0 * s[labels[j]] * g[j] } else { 0.0 });
    PenaltyParts {
        value,
        curvature_dir,
        direct,
    }
}

/// `‖∇R(α) ∘ α‖²` from the full-sample gradient.
pub fn coco_penalty(params: &ModelParams, data: &EnvironmentDataset, spec: RiskSpec) -> Result<f64> {
    let g = predictors::risk_gradient(params, data, spec)?;
    grouped_penalty_value(&g, &PenaltyWeights::plain(params), &Grouping::Singletons)
}

/// Unbiased estimate of the CoCo penalty from one batch.
pub fn coco_penalty_unbiased(params: &ModelParams, batch: &EnvironmentDataset, spec: RiskSpec) -> Result<f64> {
    let ps = predictors::per_sample_gradients(params, batch, spec)?;
    grouped_penalty_unbiased(&ps, &PenaltyWeights::plain(params), &Grouping::Singletons)
}

/// Squared batch-mean estimate of the CoCo penalty.
pub fn coco_penalty_biased(params: &ModelParams, batch: &EnvironmentDataset, spec: RiskSpec) -> Result<f64> {
    coco_penalty(params, batch, spec)
}

/// `‖∇R(α) ∘ α̃‖²` with `α̃` pinned to 1 on the covariates in `mask`.
pub fn modified_penalty(
    params: &ModelParams,
    data: &EnvironmentDataset,
    spec: RiskSpec,
    mask: &[usize],
) -> Result<f64> {
    let g = predictors::risk_gradient(params, data, spec)?;
    grouped_penalty_value(&g, &PenaltyWeights::masked(params, mask)?, &Grouping::Singletons)
}

/// `⟨∇R(α), α⟩²`.
pub fn weak_penalty(params: &ModelParams, data: &EnvironmentDataset, spec: RiskSpec) -> Result<f64> {
    let g = predictors::risk_gradient(params, data, spec)?;
    grouped_penalty_value(&g, &PenaltyWeights::plain(params), &Grouping::Whole)
}

/// `Σ_A ⟨∇R(α)_A, α_A⟩²` over a partition of the parameter indices.
pub fn partition_penalty(
    params: &ModelParams,
    data: &EnvironmentDataset,
    spec: RiskSpec,
    partition: &[Vec<usize>],
) -> Result<f64> {
    let g = predictors::risk_gradient(params, data, spec)?;
    grouped_penalty_value(
        &g,
        &PenaltyWeights::plain(params),
        &Grouping::Partition(partition.to_vec()),
    )
}

/// Squared derivative of the risk in a multiplicative output scale at 1.
pub fn irmv1_penalty(params: &ModelParams, data: &EnvironmentDataset, spec: RiskSpec) -> Result<f64> {
    let (d, _) = predictors::output_scale_derivative(params, data, spec)?;
    Ok(d * d)
}

/// Unbiased sample variance (denominator `E - 1`); zero for one value.
pub fn sample_variance(values: &[f64]) -> f64 {
    let e = values.len();
    if e < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / e as f64;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (e as f64 - 1.0)
}

/// Per-environment access to risk, gradient and curvature.
pub trait EnvironmentOracle: Sync {
    fn risk_and_gradient(&self, params: &ModelParams) -> Result<(f64, DVector<f64>)>;
    fn hvp(&self, params: &ModelParams, v: &DVector<f64>) -> Result<DVector<f64>>;
    /// Risk, gradient `g` and `H dir(g)` where the direction depends on the
    /// gradient. Sample oracles share one forward pass across all three.
    fn risk_gradient_hvp(
        &self,
        params: &ModelParams,
        dir: &mut dyn FnMut(&DVector<f64>) -> DVector<f64>,
    ) -> Result<(f64, DVector<f64>, DVector<f64>)> {
        let (r, g) = self.risk_and_gradient(params)?;
        let u = dir(&g);
        let hv = self.hvp(params, &u)?;
        Ok((r, g, hv))
    }
    /// Output-scale derivative and its parameter gradient.
    fn scale_derivative(&self, params: &ModelParams) -> Result<(f64, DVector<f64>)>;
    /// Per-sample loss gradients; `None` when only summary statistics exist.
    fn per_sample_gradients(&self, params: &ModelParams) -> Result<Option<DMatrix<f64>>>;
}

/// Oracle for the linear model with squared loss built from Gram statistics.
/// Every quantity is exact and costs `O(p²)`.
#[derive(Debug, Clone)]
pub struct QuadraticOracle {
    pub stats: GramStats,
}

impl EnvironmentOracle for QuadraticOracle {
    fn risk_and_gradient(&self, params: &ModelParams) -> Result<(f64, DVector<f64>)> {
        Ok((self.stats.risk(&params.theta), self.stats.gradient(&params.theta)))
    }

    fn hvp(&self, _params: &ModelParams, v: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.stats.w * v)
    }

    fn scale_derivative(&self, params: &ModelParams) -> Result<(f64, DVector<f64>)> {
        // D = mean (f - y) f = αᵀWα - bᵀα
        let wa = &self.stats.w * &params.theta;
        let d = params.theta.dot(&wa) - self.stats.b.dot(&params.theta);
        Ok((d, wa * 2.0 - &self.stats.b))
    }

    fn per_sample_gradients(&self, _params: &ModelParams) -> Result<Option<DMatrix<f64>>> {
        Ok(None)
    }
}

/// Oracle that evaluates the predictor on raw samples with exact
/// Hessian-vector products.
#[derive(Debug, Clone)]
pub struct SampleOracle<'a> {
    pub data: &'a EnvironmentDataset,
    pub risk: RiskSpec,
}

impl EnvironmentOracle for SampleOracle<'_> {
    fn risk_and_gradient(&self, params: &ModelParams) -> Result<(f64, DVector<f64>)> {
        predictors::risk_and_gradient(params, self.data, self.risk)
    }

    fn hvp(&self, params: &ModelParams, v: &DVector<f64>) -> Result<DVector<f64>> {
        predictors::hessian_vector_product(params, self.data, self.risk, v)
    }

    fn risk_gradient_hvp(
        &self,
        params: &ModelParams,
        dir: &mut dyn FnMut(&DVector<f64>) -> DVector<f64>,
    ) -> Result<(f64, DVector<f64>, DVector<f64>)> {
        let lin = predictors::Linearization::new(params, self.data, self.risk)?;
        let u = dir(lin.gradient());
        let hv = lin.hvp(&u)?;
        Ok((lin.risk(), lin.gradient().clone(), hv))
    }

    fn scale_derivative(&self, params: &ModelParams) -> Result<(f64, DVector<f64>)> {
        predictors::output_scale_derivative(params, self.data, self.risk)
    }

    fn per_sample_gradients(&self, params: &ModelParams) -> Result<Option<DMatrix<f64>>> {
        predictors::per_sample_gradients(params, self.data, self.risk).map(Some)
    }
}

/// Builds one sample oracle per environment.
pub fn sample_oracles(multi: &MultiEnvData, risk: RiskSpec) -> Vec<SampleOracle<'_>> {
    multi
        .environments
        .iter()
        .map(|data| SampleOracle { data, risk })
        .collect()
}

/// Builds exact Gram-statistic oracles (linear model, squared loss).
pub fn quadratic_oracles(multi: &MultiEnvData) -> Vec<QuadraticOracle> {
    multi
        .environments
        .iter()
        .map(|e| QuadraticOracle {
            stats: GramStats::from_dataset(e),
        })
        .collect()
}

/// Evaluated objective with its per-environment parts.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveValue {
    pub value: f64,
    pub risks: Vec<f64>,
    pub gradient: Option<DVector<f64>>,
    /// Mean of the per-environment risk gradients, when gradients were requested.
    pub mean_risk_gradient: Option<DVector<f64>>,
}

fn penalty_grouping(method: Method) -> Grouping {
    match method {
        Method::NaiveCoco => Grouping::Whole,
        _ => Grouping::Singletons,
    }
}

/// Value (and, with `with_gradient`, the exact parameter gradient) of the
/// objective over the environments served by `oracles`.
pub fn evaluate<O: EnvironmentOracle>(
    params: &ModelParams,
    oracles: &[O],
    obj: &ObjectiveSpec,
    with_gradient: bool,
) -> Result<ObjectiveValue> {
    obj.validate(params.shape.input)?;
    if oracles.is_empty() {
        return Err(CocoError::InvalidData("no environments".into()));
    }
    if with_gradient && obj.estimator == Estimator::UnbiasedApprox1 && penalized(obj.method) {
        return Err(CocoError::Unsupported(
            "analytic gradients of the unbiased estimator are not available; use finite differences"
                .into(),
        ));
    }
    let e = oracles.len() as f64;
    let dim = params.len();
    let weights = PenaltyWeights::for_spec(params, obj)?;
    let plain = PenaltyWeights::plain(params);
    let grouping = penalty_grouping(obj.method);

    let mut value = 0.0;
    let mut risks = Vec::with_capacity(oracles.len());
    let mut grads = Vec::with_capacity(oracles.len());
    let mut total_grad = DVector::zeros(if with_gradient { dim } else { 0 });

    for oracle in oracles {
        let mut term = 0.0;
        let mut term_grad = DVector::zeros(if with_gradient { dim } else { 0 });
        let w = if obj.method == Method::CocoErm { &plain } else { &weights };
        let extra_weak = obj.lambda_w > 0.0 && obj.method != Method::Coco;
        let (r, g) = if with_gradient && penalized(obj.method) {
            let mut direct = DVector::zeros(dim);
            let (r, g, hv) = oracle.risk_gradient_hvp(params, &mut |g| {
                let main = grouped_penalty_parts(g, w, &grouping);
                term += main.value;
                direct += &main.direct;
                let mut u = main.curvature_dir * 2.0;
                if extra_weak {
                    let weak = grouped_penalty_parts(g, &plain, &Grouping::Whole);
                    term += obj.lambda_w * weak.value;
                    direct += weak.direct * obj.lambda_w;
                    u += weak.curvature_dir * (2.0 * obj.lambda_w);
                }
                u
            })?;
            term_grad += hv + direct;
            (r, g)
        } else {
            oracle.risk_and_gradient(params)?
        };
        risks.push(r);
        match obj.method {
            Method::Erm | Method::Vrex => {}
            Method::Irmv1 => {
                let (d, dd) = oracle.scale_derivative(params)?;
                term += r + obj.lambda * d * d;
                if with_gradient {
                    term_grad += &g + dd * (2.0 * obj.lambda * d);
                }
            }
            Method::Coco | Method::CocoModified | Method::CocoErm | Method::NaiveCoco => {
                if !with_gradient {
                    term += match obj.estimator {
                        Estimator::UnbiasedApprox1 => match oracle.per_sample_gradients(params)? {
                            Some(ps) => grouped_penalty_unbiased(&ps, w, &grouping)?,
                            None => {
                                return Err(CocoError::Unsupported(
                                    "the unbiased estimator needs per-sample gradients".into(),
                                ))
                            }
                        },
                        _ => grouped_penalty_value(&g, w, &grouping)?,
                    };
                    if extra_weak {
                        term += obj.lambda_w * grouped_penalty_value(&g, &plain, &Grouping::Whole)?;
                    }
                }
                if obj.method == Method::CocoErm && obj.lambda_r > 0.0 {
                    term += obj.lambda_r * r;
                    if with_gradient {
                        term_grad += &g * obj.lambda_r;
                    }
                }
            }
        }
        if with_gradient {
            grads.push(g);
        }
        value += term;
        if with_gradient {
            total_grad += term_grad;
        }
    }

    match obj.method {
        Method::Erm => {
            value = risks.iter().sum::<f64>() / e;
            if with_gradient {
                total_grad = grads.iter().fold(DVector::zeros(dim), |acc, g| acc + g) / e;
            }
        }
        Method::Vrex => {
            let mean = risks.iter().sum::<f64>() / e;
            value = mean + obj.lambda_vrex * sample_variance(&risks);
            if with_gradient {
                let mut grad = DVector::zeros(dim);
                for (r, g) in risks.iter().zip(&grads) {
                    let mut c = 1.0 / e;
                    if risks.len() > 1 {
                        c += obj.lambda_vrex * 2.0 * (r - mean) / (e - 1.0);
                    }
                    grad += g * c;
                }
                total_grad = grad;
            }
        }
        // IRMv1 sums over environments
        Method::Irmv1 => {}
        _ => {
            value /= e;
            if with_gradient {
                total_grad /= e;
            }
        }
    }
    let mean_risk_gradient = with_gradient.then(|| grads.iter().fold(DVector::zeros(dim), |acc, g| acc + g) / e);
    Ok(ObjectiveValue {
        value,
        risks,
        gradient: with_gradient.then_some(total_grad),
        mean_risk_gradient,
    })
}

fn penalized(method: Method) -> bool {
    !matches!(method, Method::Erm | Method::Vrex | Method::Irmv1)
}

/// Objective value on raw data.
pub fn total_objective(
    params: &ModelParams,
    multi: &MultiEnvData,
    risk: RiskSpec,
    obj: &ObjectiveSpec,
) -> Result<f64> {
    risk.validate(&params.shape)?;
    check_layout(&params.shape, multi)?;
    Ok(evaluate(params, &sample_oracles(multi, risk), obj, false)?.value)
}

pub(crate) fn check_layout(shape: &ModelShape, multi: &MultiEnvData) -> Result<()> {
    if shape.input != multi.p() {
        return Err(CocoError::ShapeMismatch(format!(
            "model expects {} covariates, data has {}",
            shape.input,
            multi.p()
        )));
    }
    Ok(())
}

/// True for the linear model with squared loss, where Gram statistics give
/// exact values and curvature.
pub fn is_quadratic(shape: &ModelShape, risk: RiskSpec) -> bool {
    shape.kind == ModelKind::Linear && risk.loss == crate::predictors::Loss::Squared
}
