//! Identification checks for linear multi-environment regression: plausible
//! sets, invariant sets, the effectiveness condition and the stacked-Gram rank
//! check that decides when enough environments have been collected.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env_data::{sample_environment, EnvironmentDataset, MultiEnvData, ScenarioKind, SemScenario};
use crate::error::{CocoError, Result};
use crate::linalg::{self, GramStats};
use crate::rng;

/// Largest covariate count for exhaustive subset scans.
pub const MAX_SUBSET_P: usize = 16;
/// Default tolerance for comparing coefficient vectors across environments.
pub const INVARIANCE_TOL: f64 = 0.05;
/// Default noise multiple below which a stacked-Gram direction counts as null.
pub const RANK_NOISE_KAPPA: f64 = 2.0;
/// Relative singular-value floor applied on top of the machine floor.
pub const RANK_RELATIVE_FLOOR: f64 = 1e-6;

/// Per-environment Gram matrices `W^e = XᵀX/n` and cross moments `b^e = Xᵀy/n`.
#[derive(Debug, Clone, PartialEq)]
pub struct GramStack {
    pub per_env_gram: Vec<DMatrix<f64>>,
    pub per_env_cross: Vec<DVector<f64>>,
}

impl GramStack {
    pub fn from_multi(multi: &MultiEnvData) -> Result<Self> {
        let stats: Vec<GramStats> = multi.environments.iter().map(GramStats::from_dataset).collect();
        let stack = Self {
            per_env_gram: stats.iter().map(|s| s.w.clone()).collect(),
            per_env_cross: stats.into_iter().map(|s| s.b).collect(),
        };
        stack.validate()?;
        Ok(stack)
    }

    pub fn validate(&self) -> Result<()> {
        for (e, w) in self.per_env_gram.iter().enumerate() {
            let asym = (w - w.transpose()).amax();
            if asym > 1e-10 * w.amax().max(1.0) {
                return Err(CocoError::InvalidData(format!(
                    "Gram matrix of environment {e} is not symmetric ({asym:.2e})"
                )));
            }
            let min_eig = w.clone().symmetric_eigenvalues().min();
            if min_eig < -1e-10 * w.amax().max(1.0) {
                return Err(CocoError::InvalidData(format!(
                    "Gram matrix of environment {e} has eigenvalue {min_eig:.2e}"
                )));
            }
        }
        Ok(())
    }

    pub fn p(&self) -> usize {
        self.per_env_cross.first().map_or(0, |b| b.len())
    }

    /// Rows of every `W^e` indexed by `c`, stacked environment by environment.
    pub fn stacked(&self, c: &[usize]) -> Result<DMatrix<f64>> {
        let p = self.p();
        check_index_set(c, p)?;
        let rows = self.per_env_gram.len() * c.len();
        let mut out = DMatrix::zeros(rows, p);
        for (e, w) in self.per_env_gram.iter().enumerate() {
            for (k, &j) in c.iter().enumerate() {
                out.row_mut(e * c.len() + k).copy_from(&w.row(j));
            }
        }
        Ok(out)
    }
}

fn check_index_set(c: &[usize], p: usize) -> Result<()> {
    for (k, &j) in c.iter().enumerate() {
        if j >= p {
            return Err(CocoError::InvalidIndexSet(format!("index {j} out of range for {p} covariates")));
        }
        if c[..k].contains(&j) {
            return Err(CocoError::InvalidIndexSet(format!("index {j} repeated")));
        }
    }
    Ok(())
}

/// Every subset of `0..p` ordered by size, then lexicographically.
pub fn subsets_in_scan_order(p: usize) -> Vec<Vec<usize>> {
    let mut all: Vec<Vec<usize>> = (0u32..1 << p)
        .map(|mask| (0..p).filter(|j| mask & (1 << j) != 0).collect())
        .collect();
    all.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    all
}

/// One stationary point of the CoCo penalty: least squares on `support`,
/// zero elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlausiblePoint {
    pub support: Vec<usize>,
    pub coefficients: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlausibleSet {
    pub points: Vec<PlausiblePoint>,
    /// Subsets whose restricted Gram matrix could not be inverted.
    pub skipped: Vec<(Vec<usize>, String)>,
}

fn restricted_solution(stats: &GramStats, support: &[usize]) -> Result<Vec<f64>> {
    let mut full = vec![0.0; stats.p()];
    if support.is_empty() {
        return Ok(full);
    }
    let sub = stats.restrict(support);
    let a = linalg::solve_spd(&sub.w, &sub.b)?;
    for (k, &j) in support.iter().enumerate() {
        full[j] = a[k];
    }
    Ok(full)
}

fn check_subset_p(p: usize) -> Result<()> {
    if p > MAX_SUBSET_P {
        return Err(CocoError::InvalidData(format!(
            "subset scans are limited to {MAX_SUBSET_P} covariates, got {p}"
        )));
    }
    Ok(())
}

/// All per-subset least-squares points of one environment. Each one makes
/// the CoCo penalty vanish on that environment.
pub fn plausible_set_enumerate(data: &EnvironmentDataset) -> Result<PlausibleSet> {
    check_subset_p(data.p())?;
    let stats = GramStats::from_dataset(data);
    let results: Vec<(Vec<usize>, Result<Vec<f64>>)> = subsets_in_scan_order(data.p())
        .into_par_iter()
        .map(|s| {
            let r = restricted_solution(&stats, &s);
            (s, r)
        })
        .collect();
    let mut points = Vec::new();
    let mut skipped = Vec::new();
    for (support, r) in results {
        match r {
            Ok(coefficients) => points.push(PlausiblePoint { support, coefficients }),
            Err(e) => skipped.push((support, e.to_string())),
        }
    }
    Ok(PlausibleSet { points, skipped })
}

fn max_abs_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
}

/// Points of the first environment's plausible set that every other
/// environment reproduces within `tol` (max-coordinate distance). Matching is
/// greedy nearest-neighbour and each point is used at most once per
/// environment. Returns the centroids of the matched groups.
pub fn intersect_plausible_sets(multi: &MultiEnvData, tol: f64) -> Result<Vec<Vec<f64>>> {
    let sets: Vec<PlausibleSet> = multi
        .environments
        .par_iter()
        .map(plausible_set_enumerate)
        .collect::<Result<_>>()?;
    let Some((first, rest)) = sets.split_first() else {
        return Ok(Vec::new());
    };
    let mut used: Vec<Vec<bool>> = rest.iter().map(|s| vec![false; s.points.len()]).collect();
    let mut out = Vec::new();
    for cand in &first.points {
        let mut picks = Vec::with_capacity(rest.len());
        for (set, taken) in rest.iter().zip(&used) {
            let best = set
                .points
                .iter()
                .enumerate()
                .filter(|(k, _)| !taken[*k])
                .map(|(k, pt)| (k, max_abs_distance(&cand.coefficients, &pt.coefficients)))
                .filter(|(_, d)| *d < tol)
                .min_by(|a, b| a.1.total_cmp(&b.1));
            match best {
                Some((k, _)) => picks.push(k),
                None => break,
            }
        }
        if picks.len() != rest.len() {
            continue;
        }
        let mut centroid = cand.coefficients.clone();
        for ((set, taken), &k) in rest.iter().zip(used.iter_mut()).zip(&picks) {
            taken[k] = true;
            for (c, v) in centroid.iter_mut().zip(&set.points[k].coefficients) {
                *c += v;
            }
        }
        let m = sets.len() as f64;
        centroid.iter_mut().for_each(|c| *c /= m);
        out.push(centroid);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvariantSet {
    pub indices: Vec<usize>,
    pub vector: Vec<f64>,
}

/// Scans every `H ⊇ C` and keeps those whose per-environment restricted
/// least-squares estimates agree within `tol` in every coordinate. The vector
/// is the mean estimate padded with zeros off `H`.
pub fn invariant_sets(multi: &MultiEnvData, c: &[usize], tol: f64) -> Result<Vec<InvariantSet>> {
    let p = multi.p();
    check_subset_p(p)?;
    check_index_set(c, p)?;
    let stats: Vec<GramStats> = multi.environments.iter().map(GramStats::from_dataset).collect();
    let candidates: Vec<Vec<usize>> = subsets_in_scan_order(p)
        .into_iter()
        .filter(|h| c.iter().all(|j| h.contains(j)))
        .collect();
    let found: Vec<Option<InvariantSet>> = candidates
        .into_par_iter()
        .map(|h| -> Result<Option<InvariantSet>> {
            let est: Vec<Vec<f64>> = stats
                .iter()
                .map(|s| restricted_solution(s, &h))
                .collect::<Result<_>>()?;
            let spread = est
                .iter()
                .enumerate()
                .flat_map(|(i, a)| est[i + 1..].iter().map(move |b| max_abs_distance(a, b)))
                .fold(0.0_f64, f64::max);
            if spread >= tol {
                return Ok(None);
            }
            let e = est.len() as f64;
            let vector = (0..p).map(|j| est.iter().map(|v| v[j]).sum::<f64>() / e).collect();
            Ok(Some(InvariantSet { indices: h, vector }))
        })
        .collect::<Result<_>>()?;
    Ok(found.into_iter().flatten().collect())
}

fn has_distinct_vectors(sets: &[InvariantSet], tol: f64) -> bool {
    sets.iter()
        .enumerate()
        .any(|(i, a)| sets[i + 1..].iter().any(|b| max_abs_distance(&a.vector, &b.vector) >= tol))
}

/// Effectiveness: all invariant vectors coincide within `tol`.
pub fn check_effectiveness_a2(multi: &MultiEnvData, c: &[usize], tol: f64) -> Result<bool> {
    Ok(!has_distinct_vectors(&invariant_sets(multi, c, tol)?, tol))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankCheck {
    pub matrix_rows: usize,
    pub rank: usize,
    pub passes: bool,
    /// Singular values of the stacked matrix, largest first.
    pub singular_values: Vec<f64>,
    /// Rank from the singular-value floors alone.
    pub floor_rank: usize,
    /// For each direction of the column-equilibrated stack (same order as
    /// its singular values), `‖A v‖` divided by its sampling standard error.
    pub noise_ratios: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub invariant_sets: Vec<InvariantSet>,
    pub distinct_invariant_vectors: bool,
    pub rank_check: RankCheck,
    pub environments_used: usize,
}

impl CheckReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankOptions {
    /// Directions whose noise ratio is at most this count as null.
    pub kappa: f64,
    /// Tolerance for the invariant-set scan in the report.
    pub tol: f64,
}

impl Default for RankOptions {
    fn default() -> Self {
        Self {
            kappa: RANK_NOISE_KAPPA,
            tol: INVARIANCE_TOL,
        }
    }
}

/// Numerical rank with the floor `max(σ_max·max(m, p)·2⁻⁴⁰, 1e-6·σ_max)`.
pub fn numerical_rank(a: &DMatrix<f64>) -> (usize, Vec<f64>) {
    let s = full_svd(a).1;
    let max = s.first().copied().unwrap_or(0.0);
    let dims = a.nrows().max(a.ncols()) as f64;
    let floor = (max * dims * 2f64.powi(-40)).max(RANK_RELATIVE_FLOOR * max);
    let rank = s.iter().take(a.nrows().min(a.ncols())).filter(|&&v| v > floor && v > 0.0).count();
    (rank, s)
}

/// Singular values (descending, length `p`) and right singular vectors as
/// columns of a `p x p` matrix. Short matrices are padded with zero rows so
/// every direction of the null space is returned.
fn full_svd(a: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let (m, p) = a.shape();
    let padded = if m < p {
        let mut z = DMatrix::zeros(p, p);
        z.rows_mut(0, m).copy_from(a);
        z
    } else {
        a.clone()
    };
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("requested V");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let s = order.iter().map(|&i| svd.singular_values[i]).collect();
    let v = DMatrix::from_fn(p, p, |r, c| v_t[(order[c], r)]);
    (v, s)
}

/// Rank check of the stacked Gram rows `W^E_{CP}`.
///
/// Each right singular direction `v` of the column-equilibrated stack is
/// tested against sampling noise: `‖A v‖` is compared with the standard
/// error implied by the per-row variances of `x_c · xᵀv`. Trailing
/// directions whose ratio is at most `kappa` are treated as null, and the
/// singular-value floors of [`numerical_rank`] apply as well.
pub fn ico_rank_check_with(multi: &MultiEnvData, c: &[usize], opts: &RankOptions) -> Result<CheckReport> {
    if c.is_empty() {
        return Err(CocoError::InvalidIndexSet("the non-descendant set must not be empty".into()));
    }
    let p = multi.p();
    let stack = GramStack::from_multi(multi)?;
    let a = stack.stacked(c)?;
    let (floor_rank, singular_values) = numerical_rank(&a);

    let norms: Vec<f64> = (0..p)
        .map(|j| {
            let v = a.column(j).norm();
            if v > 0.0 {
                v
            } else {
                1.0
            }
        })
        .collect();
    let scaled = DMatrix::from_fn(a.nrows(), p, |r, j| a[(r, j)] / norms[j]);
    let (dirs, _) = full_svd(&scaled);
    let noise_ratios: Vec<f64> = (0..p)
        .map(|k| {
            let v = DVector::from_fn(p, |j, _| dirs[(j, k)] / norms[j]);
            let signal = (&a * &v).norm();
            let se = direction_standard_error(multi, c, &v);
            if se > 0.0 {
                signal / se
            } else if signal > 0.0 {
                f64::INFINITY
            } else {
                0.0
            }
        })
        .collect();
    let null_dirs = noise_ratios.iter().rev().take_while(|&&r| !(r > opts.kappa)).count();
    let rank = floor_rank.min(p - null_dirs);
    let rank_check = RankCheck {
        matrix_rows: a.nrows(),
        rank,
        passes: rank == p,
        singular_values,
        floor_rank,
        noise_ratios,
    };
    let sets = invariant_sets(multi, c, opts.tol)?;
    Ok(CheckReport {
        distinct_invariant_vectors: has_distinct_vectors(&sets, opts.tol),
        invariant_sets: sets,
        rank_check,
        environments_used: multi.len(),
    })
}

pub fn ico_rank_check(multi: &MultiEnvData, c: &[usize]) -> Result<CheckReport> {
    ico_rank_check_with(multi, c, &RankOptions::default())
}

/// `sqrt(Σ_e Σ_{c∈C} var_i(x_ic · x_iᵀv) / n_e)`, the standard error of
/// `‖W_CP v‖` when the true product is zero.
fn direction_standard_error(multi: &MultiEnvData, c: &[usize], v: &DVector<f64>) -> f64 {
    let mut total = 0.0;
    for env in &multi.environments {
        let n = env.n() as f64;
        let proj = &env.x * v;
        for &j in c {
            let col = env.x.column(j);
            let mean = col.iter().zip(proj.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
            let var = col
                .iter()
                .zip(proj.iter())
                .map(|(a, b)| (a * b - mean).powi(2))
                .sum::<f64>()
                / n;
            total += var / n;
        }
    }
    total.sqrt()
}

/// How the per-environment intervention strength is drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StrengthFamily {
    /// Independent `Unif(lo, hi)` draws.
    Uniform { lo: f64, hi: f64 },
    /// Values taken in turn, repeating from the start.
    Cycle(Vec<f64>),
}

/// An unbounded sequence of environments from one scenario family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentStream {
    pub kind: ScenarioKind,
    pub family: StrengthFamily,
    pub n_per_env: usize,
    pub seed: u64,
}

/// Stream tag for strength draws.
const STRENGTH_STREAM: u64 = 0x57E4;

impl EnvironmentStream {
    pub fn new(kind: ScenarioKind, family: StrengthFamily, n_per_env: usize, seed: u64) -> Result<Self> {
        if let StrengthFamily::Uniform { lo, hi } = family {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(CocoError::InvalidScenario(format!("bad strength range [{lo}, {hi})")));
            }
        }
        if let StrengthFamily::Cycle(v) = &family {
            if v.is_empty() {
                return Err(CocoError::InvalidScenario("empty strength cycle".into()));
            }
        }
        Ok(Self {
            kind,
            family,
            n_per_env,
            seed,
        })
    }

    pub fn strength(&self, e: usize) -> f64 {
        match &self.family {
            StrengthFamily::Uniform { lo, hi } => {
                let mut s = rng::child_stream(self.seed, &[STRENGTH_STREAM, e as u64]);
                s.random_range(*lo..*hi)
            }
            StrengthFamily::Cycle(v) => v[e % v.len()],
        }
    }

    /// Scenario holding the first `count` environments of the stream.
    pub fn scenario(&self, count: usize) -> Result<SemScenario> {
        let values: Vec<f64> = (0..count).map(|e| self.strength(e)).collect();
        let scenario = SemScenario::from_values(self.kind, &values, self.n_per_env, self.seed);
        scenario.validate()?;
        Ok(scenario)
    }

    /// Environment `e` of the stream; identical however many environments
    /// are drawn before or after it.
    pub fn environment(&self, e: usize) -> Result<EnvironmentDataset> {
        let scenario = self.scenario(e + 1)?;
        sample_environment(&scenario, e, None)
    }
}

/// Draws environments one at a time until the rank check passes or
/// `max_envs` environments have been used.
pub fn ico_workflow(
    stream: &EnvironmentStream,
    c: &[usize],
    max_envs: usize,
    opts: &RankOptions,
) -> Result<(MultiEnvData, CheckReport)> {
    if max_envs == 0 {
        return Err(CocoError::Config("max_envs must be >= 1".into()));
    }
    if c.is_empty() {
        return Err(CocoError::InvalidIndexSet("the non-descendant set must not be empty".into()));
    }
    let mut envs = Vec::with_capacity(max_envs);
    loop {
        envs.push(stream.environment(envs.len())?);
        let multi = MultiEnvData::new(envs.clone(), c.to_vec())?;
        let report = ico_rank_check_with(&multi, c, opts)?;
        if report.rank_check.passes || envs.len() >= max_envs {
            return Ok((multi, report));
        }
    }
}
