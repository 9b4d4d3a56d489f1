//! Multi-environment datasets: the synthetic structural equation models used
//! throughout the crate, do-interventions on them, and CSV input/output.
//!
//! Normal laws are parameterized by variance. Covariates are ordered with the
//! known pre-outcome covariate first, then the remaining covariates in SEM
//! order, and the descendant(s) of the outcome last.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CocoError, Result};
use crate::rng;

/// One environment's observations.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentDataset {
    pub env_id: String,
    /// Units in rows, covariates in columns.
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub covariate_names: Vec<String>,
    /// Per-environment constants of the generating process (gamma, m1, ...).
    pub params: BTreeMap<String, f64>,
}

impl EnvironmentDataset {
    pub fn new(
        env_id: impl Into<String>,
        x: DMatrix<f64>,
        y: DVector<f64>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let env_id = env_id.into();
        let (n, p) = x.shape();
        if n == 0 || p == 0 {
            return Err(CocoError::InvalidData(format!(
                "environment `{env_id}` must have n >= 1 and p >= 1 (got {n}x{p})"
            )));
        }
        if y.len() != n {
            return Err(CocoError::InvalidData(format!(
                "environment `{env_id}`: y has {} entries for {n} rows",
                y.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
            return Err(CocoError::InvalidData(format!(
                "environment `{env_id}` contains non-finite values"
            )));
        }
        if covariate_names.len() != p {
            return Err(CocoError::InvalidData(format!(
                "environment `{env_id}`: {} covariate names for {p} columns",
                covariate_names.len()
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = covariate_names.iter().find(|c| !seen.insert(c.as_str())) {
            return Err(CocoError::InvalidData(format!(
                "duplicate covariate name `{dup}`"
            )));
        }
        Ok(Self {
            env_id,
            x,
            y,
            covariate_names,
            params: BTreeMap::new(),
        })
    }

    pub fn with_params(mut self, params: BTreeMap<String, f64>) -> Self {
        self.params = params;
        self
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Rows `idx` of this environment, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let x = self.x.select_rows(idx.iter());
        let y = DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.y[i]));
        Ok(Self::new(self.env_id.clone(), x, y, self.covariate_names.clone())?
            .with_params(self.params.clone()))
    }

    /// Columns `cols` of this environment.
    pub fn select_columns(&self, cols: &[usize]) -> Result<Self> {
        if let Some(&c) = cols.iter().find(|&&c| c >= self.p()) {
            return Err(CocoError::InvalidIndexSet(format!(
                "column {c} out of range for p = {}",
                self.p()
            )));
        }
        let x = self.x.select_columns(cols.iter());
        let names = cols.iter().map(|&c| self.covariate_names[c].clone()).collect();
        Ok(Self::new(self.env_id.clone(), x, self.y.clone(), names)?
            .with_params(self.params.clone()))
    }
}

/// Environments sharing one covariate layout, plus the covariates known not
/// to descend from the outcome (0-based column indices).
#[derive(Debug, Clone, PartialEq)]
pub struct MultiEnvData {
    pub environments: Vec<EnvironmentDataset>,
    pub known_nondescendants: Vec<usize>,
}

impl MultiEnvData {
    pub fn new(
        environments: Vec<EnvironmentDataset>,
        known_nondescendants: Vec<usize>,
    ) -> Result<Self> {
        let first = environments
            .first()
            .ok_or_else(|| CocoError::InvalidData("at least one environment is required".into()))?;
        let names = &first.covariate_names;
        for env in &environments[1..] {
            if &env.covariate_names != names {
                return Err(CocoError::InvalidData(format!(
                    "environment `{}` has covariates {:?}, expected {:?}",
                    env.env_id, env.covariate_names, names
                )));
            }
        }
        let p = names.len();
        if let Some(&c) = known_nondescendants.iter().find(|&&c| c >= p) {
            return Err(CocoError::InvalidIndexSet(format!(
                "non-descendant index {c} out of range for p = {p}"
            )));
        }
        let mut known_nondescendants = known_nondescendants;
        known_nondescendants.sort_unstable();
        known_nondescendants.dedup();
        Ok(Self {
            environments,
            known_nondescendants,
        })
    }

    pub fn p(&self) -> usize {
        self.environments[0].p()
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.environments[0].covariate_names
    }

    pub fn len(&self) -> usize {
        self.environments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.environments.is_empty()
    }

    /// All environments stacked into one dataset.
    pub fn pooled(&self) -> Result<EnvironmentDataset> {
        let n: usize = self.environments.iter().map(|e| e.n()).sum();
        let p = self.p();
        let mut x = DMatrix::zeros(n, p);
        let mut y = DVector::zeros(n);
        let mut row = 0;
        for env in &self.environments {
            x.rows_mut(row, env.n()).copy_from(&env.x);
            y.rows_mut(row, env.n()).copy_from(&env.y);
            row += env.n();
        }
        EnvironmentDataset::new("pooled", x, y, self.covariate_names().to_vec())
    }

    /// Keep only the listed columns; non-descendant indices are remapped.
    pub fn select_columns(&self, cols: &[usize]) -> Result<Self> {
        let environments = self
            .environments
            .iter()
            .map(|e| e.select_columns(cols))
            .collect::<Result<Vec<_>>>()?;
        let known = self
            .known_nondescendants
            .iter()
            .filter_map(|c| cols.iter().position(|k| k == c))
            .collect();
        Self::new(environments, known)
    }
}

/// True causal coefficients of a regression scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueCausalModel {
    pub beta: Vec<f64>,
    /// Indices of the causal covariates. For regression scenarios these are
    /// exactly the nonzero entries of `beta`; for the mixture scenario `beta`
    /// is empty and `support` lists the causal block.
    pub support: Vec<usize>,
}

impl TrueCausalModel {
    pub fn from_beta(beta: Vec<f64>) -> Self {
        let support = beta
            .iter()
            .enumerate()
            .filter(|(_, b)| **b != 0.0)
            .map(|(j, _)| j)
            .collect();
        Self { beta, support }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScenarioKind {
    Case1,
    Case2,
    Case3,
    Case4,
    Case5,
    AppendixB1,
    NonIdentifiable,
    /// Gaussian mixture classification with `classes` components.
    Gmm { classes: usize },
}

impl ScenarioKind {
    pub fn linear_case(i: usize) -> Option<Self> {
        match i {
            1 => Some(Self::Case1),
            2 => Some(Self::Case2),
            3 => Some(Self::Case3),
            4 => Some(Self::Case4),
            5 => Some(Self::Case5),
            _ => None,
        }
    }

    pub fn is_linear_case(&self) -> bool {
        matches!(
            self,
            Self::Case1 | Self::Case2 | Self::Case3 | Self::Case4 | Self::Case5
        )
    }

    pub fn covariate_names(&self) -> Vec<String> {
        let names: &[&str] = match self {
            Self::Case1 | Self::Case4 => &["x1", "x2", "z"],
            Self::Case2 | Self::Case3 => &["x1", "x2", "x3", "z"],
            Self::Case5 => &["x1", "z"],
            Self::AppendixB1 => &["x1", "x2", "z1", "z2"],
            Self::NonIdentifiable => &["x1", "x2", "x3"],
            Self::Gmm { classes } => {
                let dz = gmm_z_dim(*classes);
                return (1..=*classes)
                    .map(|k| format!("x{k}"))
                    .chain((1..=dz).map(|k| format!("z{k}")))
                    .collect();
            }
        };
        names.iter().map(|s| s.to_string()).collect()
    }

    /// Causal coefficients over `covariate_names`.
    pub fn true_model(&self) -> TrueCausalModel {
        match self {
            Self::Case1 => TrueCausalModel::from_beta(vec![3.0, 2.0, 0.0]),
            Self::Case2 => TrueCausalModel::from_beta(vec![2.0, 0.0, 1.5, 0.0]),
            Self::Case3 => TrueCausalModel::from_beta(vec![2.0, 1.0, 1.5, 0.0]),
            // x3 is an unobserved mediator: y = x2 + 2 (x1 + x2 + e3) + e.
            Self::Case4 => TrueCausalModel::from_beta(vec![2.0, 3.0, 0.0]),
            Self::Case5 => TrueCausalModel::from_beta(vec![2.0, 0.0]),
            Self::AppendixB1 => TrueCausalModel::from_beta(vec![1.0, 1.0, 0.0, 0.0]),
            Self::NonIdentifiable => TrueCausalModel::from_beta(vec![2.0, 1.5, 0.0]),
            Self::Gmm { classes } => TrueCausalModel {
                beta: Vec::new(),
                support: (0..*classes).collect(),
            },
        }
    }

    /// Covariates known not to descend from the outcome.
    pub fn default_nondescendants(&self) -> Vec<usize> {
        match self {
            Self::AppendixB1 | Self::NonIdentifiable => vec![0, 1],
            Self::Gmm { classes } => (0..*classes).collect(),
            _ => vec![0],
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Case1 => write!(f, "case1"),
            Self::Case2 => write!(f, "case2"),
            Self::Case3 => write!(f, "case3"),
            Self::Case4 => write!(f, "case4"),
            Self::Case5 => write!(f, "case5"),
            Self::AppendixB1 => write!(f, "appendix-b1"),
            Self::NonIdentifiable => write!(f, "nonidentifiable"),
            Self::Gmm { .. } => write!(f, "gmm"),
        }
    }
}

impl FromStr for ScenarioKind {
    type Err = CocoError;

    /// Parses `case1`..`case5`, `appendix-b1`, `nonidentifiable` and `gmm`
    /// (five classes; use `gmm:K` for other class counts).
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase().replace('_', "-");
        let kind = match lower.as_str() {
            "case1" | "1" => Self::Case1,
            "case2" | "2" => Self::Case2,
            "case3" | "3" => Self::Case3,
            "case4" | "4" => Self::Case4,
            "case5" | "5" => Self::Case5,
            "appendix-b1" | "appendixb1" | "b1" => Self::AppendixB1,
            "nonidentifiable" | "non-identifiable" | "b2" => Self::NonIdentifiable,
            "gmm" => Self::Gmm { classes: 5 },
            other => match other.strip_prefix("gmm:") {
                Some(k) => Self::Gmm {
                    classes: k
                        .parse()
                        .map_err(|_| CocoError::UnknownScenario(s.to_string()))?,
                },
                None => return Err(CocoError::UnknownScenario(s.to_string())),
            },
        };
        Ok(kind)
    }
}

/// Dimension of the spurious block of the mixture scenario.
pub fn gmm_z_dim(classes: usize) -> usize {
    classes.div_ceil(2)
}

/// Per-environment parameter record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EnvParams {
    /// Intervention strength of Cases 1-5 and the non-identifiable example.
    Gamma(f64),
    /// Standard deviation of the analytical example.
    Sigma(f64),
    /// Mixture environment: probability that the spurious vector is drawn at
    /// random instead of from the label, and optionally explicit vectors
    /// `u_1..u_K` (drawn from the environment seed when absent).
    Mixture {
        flip_prob: f64,
        u_vectors: Option<Vec<Vec<f64>>>,
    },
}

impl EnvParams {
    fn value(&self) -> f64 {
        match self {
            Self::Gamma(v) | Self::Sigma(v) => *v,
            Self::Mixture { flip_prob, .. } => *flip_prob,
        }
    }
}

/// Declarative description of a data-generating process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemScenario {
    pub kind: ScenarioKind,
    pub env_params: Vec<EnvParams>,
    pub n_per_env: usize,
    pub seed: u64,
}

impl SemScenario {
    pub fn new(kind: ScenarioKind, env_params: Vec<EnvParams>, n_per_env: usize, seed: u64) -> Self {
        Self {
            kind,
            env_params,
            n_per_env,
            seed,
        }
    }

    /// Scenario whose environments are indexed by the given scalar values
    /// (gamma, sigma or flip probability depending on the kind).
    pub fn from_values(kind: ScenarioKind, values: &[f64], n_per_env: usize, seed: u64) -> Self {
        let env_params = values
            .iter()
            .map(|&v| match kind {
                ScenarioKind::AppendixB1 => EnvParams::Sigma(v),
                ScenarioKind::Gmm { .. } => EnvParams::Mixture {
                    flip_prob: v,
                    u_vectors: None,
                },
                _ => EnvParams::Gamma(v),
            })
            .collect();
        Self::new(kind, env_params, n_per_env, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.env_params.is_empty() {
            return Err(CocoError::InvalidScenario("env_params is empty".into()));
        }
        if self.n_per_env == 0 {
            return Err(CocoError::InvalidScenario("n_per_env must be >= 1".into()));
        }
        if let ScenarioKind::Gmm { classes } = self.kind {
            if classes < 2 {
                return Err(CocoError::InvalidScenario(format!(
                    "mixture scenario needs at least 2 classes, got {classes}"
                )));
            }
        }
        for (e, params) in self.env_params.iter().enumerate() {
            self.validate_params(e, params)?;
        }
        Ok(())
    }

    fn validate_params(&self, e: usize, params: &EnvParams) -> Result<()> {
        let bad = |msg: String| Err(CocoError::InvalidScenario(format!("environment {e}: {msg}")));
        match (self.kind, params) {
            (ScenarioKind::Gmm { classes }, EnvParams::Mixture { flip_prob, u_vectors }) => {
                if !(0.0..=1.0).contains(flip_prob) {
                    return bad(format!("flip probability {flip_prob} outside [0, 1]"));
                }
                if let Some(us) = u_vectors {
                    let dz = gmm_z_dim(classes);
                    if us.len() != classes || us.iter().any(|u| u.len() != dz) {
                        return bad(format!("expected {classes} u-vectors of length {dz}"));
                    }
                }
                Ok(())
            }
            (ScenarioKind::Gmm { .. }, _) => bad("mixture scenario needs Mixture params".into()),
            (ScenarioKind::AppendixB1, EnvParams::Sigma(s)) if *s > 0.0 && s.is_finite() => Ok(()),
            (ScenarioKind::AppendixB1, p) => bad(format!("sigma must be positive, got {p:?}")),
            (_, EnvParams::Gamma(g)) if *g > 0.0 && g.is_finite() => Ok(()),
            (_, p) => bad(format!("gamma must be positive and finite, got {p:?}")),
        }
    }
}

/// `do(target = value)` on one structural variable (by name, e.g. `x1`).
#[derive(Debug, Clone, PartialEq)]
pub struct DoIntervention {
    pub target: String,
    pub value: f64,
}

/// Sample every environment of `scenario`.
pub fn generate(scenario: &SemScenario) -> Result<(MultiEnvData, TrueCausalModel)> {
    scenario.validate()?;
    let environments = (0..scenario.env_params.len())
        .into_par_iter()
        .map(|e| sample_environment(scenario, e, None))
        .collect::<Result<Vec<_>>>()?;
    let multi = MultiEnvData::new(environments, scenario.kind.default_nondescendants())?;
    Ok((multi, scenario.kind.true_model()))
}

/// Sample the first environment of `scenario` under `do(target = value)`.
pub fn apply_do_intervention(
    scenario: &SemScenario,
    target: &str,
    value: f64,
) -> Result<EnvironmentDataset> {
    sample_environment(
        scenario,
        0,
        Some(&DoIntervention {
            target: target.to_string(),
            value,
        }),
    )
}

/// Sample environment `env_index` of `scenario`, optionally under a
/// do-intervention. The environment's random stream depends only on the
/// scenario seed and the index.
pub fn sample_environment(
    scenario: &SemScenario,
    env_index: usize,
    intervention: Option<&DoIntervention>,
) -> Result<EnvironmentDataset> {
    scenario.validate()?;
    let params = scenario.env_params.get(env_index).ok_or_else(|| {
        CocoError::InvalidScenario(format!("no environment with index {env_index}"))
    })?;
    if let Some(iv) = intervention {
        if iv.target == "y" {
            return Err(CocoError::InvalidScenario(
                "cannot intervene on the outcome".into(),
            ));
        }
        if !scenario.kind.is_linear_case() {
            return Err(CocoError::Unsupported(format!(
                "do-interventions are available for case1..case5, not {}",
                scenario.kind
            )));
        }
        if !iv.value.is_finite() {
            return Err(CocoError::InvalidScenario("intervention value must be finite".into()));
        }
    }
    let mut rng = rng::child_stream(scenario.seed, &[env_index as u64]);
    let n = scenario.n_per_env;
    let sampled = match scenario.kind {
        ScenarioKind::Gmm { classes } => sample_gmm(&mut rng, n, classes, params)?,
        ScenarioKind::AppendixB1 => sample_appendix_b1(&mut rng, n, params.value()),
        ScenarioKind::NonIdentifiable => sample_nonidentifiable(&mut rng, n, params.value()),
        kind => sample_linear_case(&mut rng, n, kind, params.value(), intervention)?,
    };
    let Sampled { columns, y, params: mut record } = sampled;
    record.insert(
        match params {
            EnvParams::Gamma(_) => "gamma".into(),
            EnvParams::Sigma(_) => "sigma".into(),
            EnvParams::Mixture { .. } => "flip_prob".into(),
        },
        params.value(),
    );
    if let Some(iv) = intervention {
        record.insert(format!("do_{}", iv.target), iv.value);
    }
    let p = columns.len();
    let x = DMatrix::from_fn(n, p, |i, j| columns[j][i]);
    let env_id = format!("env{env_index}");
    Ok(
        EnvironmentDataset::new(env_id, x, DVector::from_vec(y), scenario.kind.covariate_names())?
            .with_params(record),
    )
}

struct Sampled {
    columns: Vec<Vec<f64>>,
    y: Vec<f64>,
    params: BTreeMap<String, f64>,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, mean: f64, variance: f64) -> Vec<f64> {
    if variance == 0.0 {
        return vec![mean; n];
    }
    let d = Normal::new(mean, variance.sqrt()).expect("finite normal parameters");
    (0..n).map(|_| d.sample(rng)).collect()
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let d = Uniform::new(lo, hi).expect("lo < hi");
    (0..n).map(|_| d.sample(rng)).collect()
}

fn zip_with(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&u, &v)| f(u, v)).collect()
}

/// Applies a possible do-intervention to a freshly sampled variable. The
/// natural draw is always taken so the stream position stays the same.
fn assign(name: &str, natural: Vec<f64>, iv: Option<&DoIntervention>) -> Vec<f64> {
    match iv {
        Some(d) if d.target == name => vec![d.value; natural.len()],
        _ => natural,
    }
}

fn sample_linear_case(
    rng: &mut ChaCha8Rng,
    n: usize,
    kind: ScenarioKind,
    gamma: f64,
    iv: Option<&DoIntervention>,
) -> Result<Sampled> {
    let mut params = BTreeMap::new();
    if let Some(d) = iv {
        let known: &[&str] = match kind {
            ScenarioKind::Case1 | ScenarioKind::Case5 => &["x1", "x2", "z"],
            _ => &["x1", "x2", "x3", "z"],
        };
        if !known.contains(&d.target.as_str()) || (kind == ScenarioKind::Case5 && d.target == "x2") {
            return Err(CocoError::InvalidScenario(format!(
                "{kind} has no variable `{}`",
                d.target
            )));
        }
    }
    let out = match kind {
        ScenarioKind::Case1 => {
            let m1: f64 = rng.random_range(0.0..1.0);
            let m2: f64 = rng.random_range(0.0..1.0);
            params.insert("m1".into(), m1);
            params.insert("m2".into(), m2);
            let x2 = assign("x2", normal_vec(rng, n, m2, gamma * gamma), iv);
            let x1 = assign("x1", normal_vec(rng, n, m1, gamma * gamma), iv);
            let e = normal_vec(rng, n, 0.0, 1.0);
            let y: Vec<f64> = (0..n).map(|i| 3.0 * x1[i] + 2.0 * x2[i] + e[i]).collect();
            let ez = normal_vec(rng, n, 0.0, gamma);
            let z = assign("z", zip_with(&y, &ez, |y, e| gamma * y + e), iv);
            (vec![x1, x2, z], y)
        }
        ScenarioKind::Case2 | ScenarioKind::Case3 => {
            let x2 = assign("x2", normal_vec(rng, n, 1.0, 0.25), iv);
            let u = uniform_vec(rng, n, -1.0, 1.0);
            let x1 = assign("x1", zip_with(&x2, &u, |a, b| a + b), iv);
            let e3 = normal_vec(rng, n, 0.0, 0.25);
            let x3 = assign("x3", zip_with(&x1, &e3, |a, b| a.sin() + b), iv);
            let y: Vec<f64> = if kind == ScenarioKind::Case2 {
                let e = normal_vec(rng, n, 0.0, 1.0);
                (0..n).map(|i| 2.0 * x1[i] + 1.5 * x3[i] + e[i]).collect()
            } else {
                let e = normal_vec(rng, n, 0.0, gamma * gamma);
                (0..n)
                    .map(|i| 2.0 * x1[i] + x2[i] + 1.5 * x3[i] + e[i])
                    .collect()
            };
            let ez = normal_vec(rng, n, 0.0, 1.0);
            let z = assign("z", zip_with(&y, &ez, |y, e| gamma * y + e), iv);
            (vec![x1, x2, x3, z], y)
        }
        ScenarioKind::Case4 => {
            let m: f64 = rng.random_range(1.0..2.0);
            params.insert("m".into(), m);
            let x2 = assign("x2", normal_vec(rng, n, 1.0, 0.25), iv);
            let u = uniform_vec(rng, n, 0.0, m);
            let x1 = assign("x1", zip_with(&x2, &u, |a, b| a + b), iv);
            let e3 = normal_vec(rng, n, 0.0, 0.25);
            let x3: Vec<f64> = assign(
                "x3",
                (0..n).map(|i| x1[i] + x2[i] + e3[i]).collect(),
                iv,
            );
            let e = normal_vec(rng, n, 0.0, 1.0);
            let y: Vec<f64> = (0..n).map(|i| x2[i] + 2.0 * x3[i] + e[i]).collect();
            let ez = normal_vec(rng, n, 0.0, 1.0);
            let z = assign("z", zip_with(&y, &ez, |y, e| gamma * y + e), iv);
            (vec![x1, x2, z], y)
        }
        ScenarioKind::Case5 => {
            let x1 = assign("x1", normal_vec(rng, n, 1.0, 0.5), iv);
            let e = normal_vec(rng, n, 0.0, 1.0);
            let y = zip_with(&x1, &e, |x, e| 2.0 * x + e);
            let ez = normal_vec(rng, n, 0.0, 1.0);
            let z = assign(
                "z",
                (0..n)
                    .map(|i| 0.5 * gamma * y[i] + 0.5 * x1[i] + ez[i])
                    .collect(),
                iv,
            );
            (vec![x1, z], y)
        }
        other => {
            return Err(CocoError::Unsupported(format!(
                "{other} is not a linear case"
            )))
        }
    };
    Ok(Sampled {
        columns: out.0,
        y: out.1,
        params,
    })
}

fn sample_appendix_b1(rng: &mut ChaCha8Rng, n: usize, sigma: f64) -> Sampled {
    let v = sigma * sigma;
    let x1 = normal_vec(rng, n, 0.0, v);
    let x2 = normal_vec(rng, n, 0.0, v);
    let e1 = normal_vec(rng, n, 0.0, v);
    let e2 = normal_vec(rng, n, 0.0, v);
    let y: Vec<f64> = (0..n).map(|i| x1[i] + x2[i] + e1[i] + e2[i]).collect();
    let n1 = normal_vec(rng, n, 0.0, 1.0);
    let n2 = normal_vec(rng, n, 0.0, 1.0);
    let z1: Vec<f64> = (0..n).map(|i| x1[i] + e1[i] + n1[i]).collect();
    let z2: Vec<f64> = (0..n).map(|i| x2[i] + e2[i] + n2[i]).collect();
    Sampled {
        columns: vec![x1, x2, z1, z2],
        y,
        params: BTreeMap::new(),
    }
}

fn sample_nonidentifiable(rng: &mut ChaCha8Rng, n: usize, gamma: f64) -> Sampled {
    let x2 = normal_vec(rng, n, 0.0, (gamma / 2.0).powi(2));
    let u = uniform_vec(rng, n, -gamma, gamma);
    let x1: Vec<f64> = (0..n).map(|i| x2[i] + u[i] + 1.0).collect();
    let e = normal_vec(rng, n, 0.0, 1.0);
    let y: Vec<f64> = (0..n).map(|i| 2.0 * x1[i] + 1.5 * x2[i] + e[i]).collect();
    let e3 = normal_vec(rng, n, 0.0, 1.0);
    let x3 = zip_with(&y, &e3, |y, e| 0.5 * y + e);
    Sampled {
        columns: vec![x1, x2, x3],
        y,
        params: BTreeMap::new(),
    }
}

/// Mixture centers `sqrt(1.5 K) e_k`.
pub fn gmm_center_scale(classes: usize) -> f64 {
    (1.5 * classes as f64).sqrt()
}

fn sample_gmm(rng: &mut ChaCha8Rng, n: usize, classes: usize, params: &EnvParams) -> Result<Sampled> {
    let EnvParams::Mixture { flip_prob, u_vectors } = params else {
        return Err(CocoError::InvalidScenario("mixture scenario needs Mixture params".into()));
    };
    let dz = gmm_z_dim(classes);
    let drawn: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dz).map(|_| rng.random_range(0.0..1.0)).collect())
        .collect();
    let us = u_vectors.clone().unwrap_or(drawn);
    let scale = gmm_center_scale(classes);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut columns = vec![Vec::with_capacity(n); classes + dz];
    let mut y = Vec::with_capacity(n);
    let mut logits = vec![0.0; classes];
    for _ in 0..n {
        let component = rng.random_range(0..classes);
        let x: Vec<f64> = (0..classes)
            .map(|k| {
                let center = if k == component { scale } else { 0.0 };
                center + std_normal.sample(rng)
            })
            .collect();
        // label ~ posterior over components given x (unit covariance)
        for (k, l) in logits.iter_mut().enumerate() {
            *l = scale * x[k];
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut draw = rng.random_range(0.0..total);
        let mut label = classes - 1;
        for (k, w) in weights.iter().enumerate() {
            if draw < *w {
                label = k;
                break;
            }
            draw -= w;
        }
        let source = if rng.random_range(0.0..1.0) < *flip_prob {
            rng.random_range(0..classes)
        } else {
            label
        };
        for (k, v) in x.into_iter().enumerate() {
            columns[k].push(v);
        }
        for (d, v) in us[source].iter().enumerate() {
            columns[classes + d].push(*v);
        }
        y.push(label as f64);
    }
    let mut record = BTreeMap::new();
    for (k, u) in us.iter().enumerate() {
        for (d, v) in u.iter().enumerate() {
            record.insert(format!("u{}_{}", k + 1, d + 1), *v);
        }
    }
    Ok(Sampled {
        columns,
        y,
        params: record,
    })
}

/// Load one environment per CSV file. Each file has a header row whose first
/// column is `y`; all files must share the same header.
pub fn load_csv<P: AsRef<Path>>(paths: &[P], nondescendants: &[usize]) -> Result<MultiEnvData> {
    if paths.is_empty() {
        return Err(CocoError::InvalidData("no input files".into()));
    }
    let mut header: Option<Vec<String>> = None;
    let mut environments = Vec::with_capacity(paths.len());
    for path in paths {
        let path = path.as_ref();
        let display = path.display().to_string();
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
        let found: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
        if found.is_empty() || (found.len() == 1 && found[0].is_empty()) {
            return Err(CocoError::EmptyFile(display));
        }
        if found[0] != "y" || found.len() < 2 {
            return Err(CocoError::InvalidData(format!(
                "{display}: header must start with `y` followed by covariates, got {found:?}"
            )));
        }
        match &header {
            Some(expected) if *expected != found => {
                return Err(CocoError::HeaderMismatch {
                    path: display,
                    expected: expected.clone(),
                    found,
                })
            }
            None => header = Some(found.clone()),
            _ => {}
        }
        let p = found.len() - 1;
        let mut ys = Vec::new();
        let mut xs = Vec::new();
        for (row, record) in reader.records().enumerate() {
            let record = record?;
            for (column, cell) in record.iter().enumerate() {
                let value: f64 = cell.trim().parse().map_err(|_| CocoError::NonNumeric {
                    path: display.clone(),
                    row: row + 1,
                    column: column + 1,
                    value: cell.to_string(),
                })?;
                if !value.is_finite() {
                    return Err(CocoError::NonNumeric {
                        path: display.clone(),
                        row: row + 1,
                        column: column + 1,
                        value: cell.to_string(),
                    });
                }
                if column == 0 {
                    ys.push(value);
                } else {
                    xs.push(value);
                }
            }
        }
        if ys.is_empty() {
            return Err(CocoError::EmptyFile(display));
        }
        let n = ys.len();
        let x = DMatrix::from_row_slice(n, p, &xs);
        let env_id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| display.clone());
        environments.push(EnvironmentDataset::new(
            env_id,
            x,
            DVector::from_vec(ys),
            found[1..].to_vec(),
        )?);
    }
    MultiEnvData::new(environments, nondescendants.to_vec())
}

/// Write one environment as CSV (`y` first, then covariates).
pub fn write_csv<P: AsRef<Path>>(env: &EnvironmentDataset, path: P) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec!["y".to_string()];
    header.extend(env.covariate_names.iter().cloned());
    writer.write_record(&header)?;
    let mut row = Vec::with_capacity(env.p() + 1);
    for i in 0..env.n() {
        row.clear();
        row.push(env.y[i].to_string());
        row.extend((0..env.p()).map(|j| env.x[(i, j)].to_string()));
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}
