use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use coco_core::bench::{
    self, AppendixB1Config, BenchMethod, BenchReport, GmmSuiteConfig, LinearSuiteConfig, Suite,
};
use coco_core::env_data::{
    self, MultiEnvData, ScenarioKind, SemScenario, TrueCausalModel,
};
use coco_core::identify::{self, CheckReport, EnvironmentStream, RankOptions, StrengthFamily};
use coco_core::objectives::{self, Estimator, Method, ObjectiveSpec};
use coco_core::optimizer::{self, Init, OptimConfig, OuterGradient, Preconditioner};
use coco_core::predictors::{Activation, Loss, ModelKind, ModelShape, RiskSpec};

use crate::config::KeyValues;
use crate::error::{CliError, EXIT_NUMERICAL, EXIT_OK};
use crate::output::Staging;

pub const METADATA_FILE: &str = "metadata.json";

/// What a command produced.
#[derive(Debug)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub exit_code: i32,
    /// Human-readable summary printed to stdout.
    pub summary: String,
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn out_dir(kv: &KeyValues) -> Result<PathBuf, CliError> {
    Ok(PathBuf::from(kv.get_or::<String>("out", ".".into())?))
}

fn default_values(kind: ScenarioKind) -> Vec<f64> {
    match kind {
        ScenarioKind::AppendixB1 => vec![0.2, 0.5, 1.0],
        ScenarioKind::Gmm { .. } => vec![0.01, 0.02, 0.03, 0.04, 0.05],
        ScenarioKind::NonIdentifiable => vec![1.0, 2.0, 3.0],
        _ => vec![0.5, 2.0],
    }
}

fn default_n(kind: ScenarioKind) -> usize {
    match kind {
        ScenarioKind::Gmm { .. } => 2000,
        _ => 10_000,
    }
}

fn scenario_kind(kv: &KeyValues) -> Result<Option<ScenarioKind>, CliError> {
    kv.get::<ScenarioKind>("case")
}

fn scenario_from(kv: &KeyValues, kind: ScenarioKind) -> Result<SemScenario, CliError> {
    let values = kv.list::<f64>("envs")?.unwrap_or_else(|| default_values(kind));
    let n = kv.get_or("n", default_n(kind))?;
    let seed = kv.get_or("seed", 0u64)?;
    let scenario = SemScenario::from_values(kind, &values, n, seed);
    scenario.validate()?;
    Ok(scenario)
}

/// Per-environment record in the metadata file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentRecord {
    pub env_id: String,
    pub file: String,
    pub n: usize,
    pub params: BTreeMap<String, f64>,
}

/// Contents of `metadata.json` written by `gen`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub scenario: SemScenario,
    pub covariates: Vec<String>,
    pub beta: Vec<f64>,
    /// Causal covariates, 1-based.
    pub support: Vec<usize>,
    /// Known non-descendants, 1-based.
    pub nondescendants: Vec<usize>,
    pub environments: Vec<EnvironmentRecord>,
}

fn one_based(idx: &[usize]) -> Vec<usize> {
    idx.iter().map(|i| i + 1).collect()
}

fn zero_based(idx: &[usize]) -> Result<Vec<usize>, CliError> {
    idx.iter()
        .map(|&i| i.checked_sub(1).ok_or_else(|| config_err("metadata indices start at 1")))
        .collect()
}

pub fn gen(kv: &KeyValues) -> Result<Outcome, CliError> {
    let kind = scenario_kind(kv)?.ok_or_else(|| config_err("`gen` needs a scenario (`case`)"))?;
    let scenario = scenario_from(kv, kind)?;
    let out = out_dir(kv)?;
    kv.finish()?;

    let (multi, truth) = env_data::generate(&scenario)?;
    let mut staging = Staging::new(&out)?;
    let mut records = Vec::with_capacity(multi.len());
    for env in &multi.environments {
        let file = format!("{}.csv", env.env_id);
        env_data::write_csv(env, staging.path(&file))?;
        records.push(EnvironmentRecord {
            env_id: env.env_id.clone(),
            file,
            n: env.n(),
            params: env.params.clone(),
        });
    }
    let meta = Metadata {
        covariates: multi.covariate_names().to_vec(),
        beta: truth.beta.clone(),
        support: one_based(&truth.support),
        nondescendants: one_based(&kind.default_nondescendants()),
        environments: records,
        scenario,
    };
    staging.write(METADATA_FILE, serde_json::to_string_pretty(&meta)? + "\n")?;
    let files = staging.commit()?;
    Ok(Outcome {
        summary: format!("wrote {} environments of {kind} to {}", multi.len(), out.display()),
        files,
        exit_code: EXIT_OK,
    })
}

/// Data for `fit` and `check`, read from disk or generated.
struct Loaded {
    multi: MultiEnvData,
    truth: Option<TrueCausalModel>,
    kind: Option<ScenarioKind>,
}

fn csv_files_in(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    Ok(files)
}

fn read_metadata(dir: &Path) -> Result<Option<Metadata>, CliError> {
    let path = dir.join(METADATA_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path)?;
    let meta = serde_json::from_str(&text)
        .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    Ok(Some(meta))
}

/// Resolves `data` (a directory written by `gen`, or CSV files separated by
/// commas) or, failing that, generates the configured scenario.
fn load(kv: &KeyValues) -> Result<Loaded, CliError> {
    let explicit_c = kv.indices("nondescendants")?;
    if let Some(spec) = kv.raw("data") {
        let paths: Vec<PathBuf> = spec.split(',').map(|s| PathBuf::from(s.trim())).collect();
        if let Some(missing) = paths.iter().find(|p| !p.exists()) {
            return Err(config_err(format!("data path {} does not exist", missing.display())));
        }
        let mut meta = None;
        let files = if paths.len() == 1 && paths[0].is_dir() {
            meta = read_metadata(&paths[0])?;
            match &meta {
                Some(m) => m.environments.iter().map(|r| paths[0].join(&r.file)).collect(),
                None => csv_files_in(&paths[0])?,
            }
        } else {
            paths
        };
        if files.is_empty() {
            return Err(config_err(format!("no CSV files found in {spec}")));
        }
        let c = match (&explicit_c, &meta) {
            (Some(c), _) => c.clone(),
            (None, Some(m)) => zero_based(&m.nondescendants)?,
            (None, None) => Vec::new(),
        };
        let multi = env_data::load_csv(&files, &c)?;
        let (truth, kind) = match meta {
            Some(m) => (
                Some(TrueCausalModel {
                    beta: m.beta,
                    support: zero_based(&m.support)?,
                }),
                Some(m.scenario.kind),
            ),
            None => (None, None),
        };
        return Ok(Loaded { multi, truth, kind });
    }
    let kind = scenario_kind(kv)?
        .ok_or_else(|| config_err("no input: set `data` to a directory or CSV files, or `case` to a scenario"))?;
    let scenario = scenario_from(kv, kind)?;
    let (mut multi, truth) = env_data::generate(&scenario)?;
    multi.known_nondescendants = explicit_c.unwrap_or_else(|| kind.default_nondescendants());
    Ok(Loaded {
        multi,
        truth: Some(truth),
        kind: Some(kind),
    })
}

fn parse_activation(s: &str) -> Result<Activation, CliError> {
    match s.to_ascii_lowercase().as_str() {
        "tanh" => Ok(Activation::Tanh),
        "relu" => Ok(Activation::Relu),
        "identity" | "linear" => Ok(Activation::Identity),
        other => Err(config_err(format!("unknown activation `{other}`"))),
    }
}

fn parse_loss(s: &str) -> Result<Loss, CliError> {
    match s.to_ascii_lowercase().replace('_', "-").as_str() {
        "squared" | "mse" => Ok(Loss::Squared),
        "cross-entropy" | "ce" | "logistic" => Ok(Loss::CrossEntropy),
        other => Err(config_err(format!("unknown loss `{other}`"))),
    }
}

/// Number of classes implied by integer labels `0..K`.
fn class_count(multi: &MultiEnvData) -> Result<usize, CliError> {
    let mut max = 0usize;
    for env in &multi.environments {
        for &y in env.y.iter() {
            if y < 0.0 || y.fract() != 0.0 {
                return Err(config_err(format!(
                    "cross-entropy needs integer class labels, found {y} in {}",
                    env.env_id
                )));
            }
            max = max.max(y as usize);
        }
    }
    Ok(max + 1)
}

fn model_from(kv: &KeyValues, loaded: &Loaded) -> Result<(ModelShape, RiskSpec), CliError> {
    let p = loaded.multi.p();
    let is_gmm = matches!(loaded.kind, Some(ScenarioKind::Gmm { .. }));
    let kind = match kv.raw("model.kind").map(|s| s.to_ascii_lowercase()) {
        None if is_gmm => ModelKind::Mlp,
        None => ModelKind::Linear,
        Some(s) => match s.as_str() {
            "linear" => ModelKind::Linear,
            "logistic" => ModelKind::Logistic,
            "mlp" => ModelKind::Mlp,
            other => return Err(config_err(format!("unknown model kind `{other}`"))),
        },
    };
    let default_loss = match kind {
        ModelKind::Linear => Loss::Squared,
        ModelKind::Logistic => Loss::CrossEntropy,
        ModelKind::Mlp if is_gmm => Loss::CrossEntropy,
        ModelKind::Mlp => Loss::Squared,
    };
    let loss = kv.raw("model.loss").map(parse_loss).transpose()?.unwrap_or(default_loss);
    let hidden = kv.list::<usize>("model.hidden")?;
    let activation = kv.raw("model.activation").map(parse_activation).transpose()?;
    if kind != ModelKind::Mlp && (hidden.is_some() || activation.is_some()) {
        return Err(config_err("model.hidden and model.activation apply to the mlp model only"));
    }
    let shape = match kind {
        ModelKind::Linear => ModelShape::linear(p),
        ModelKind::Logistic => ModelShape::logistic(p),
        ModelKind::Mlp => {
            let output = match loss {
                Loss::CrossEntropy => class_count(&loaded.multi)?,
                Loss::Squared => 1,
            };
            ModelShape::mlp(
                p,
                hidden.unwrap_or_else(|| vec![16, 16]),
                output,
                activation.unwrap_or(Activation::Tanh),
            )
        }
    };
    shape.validate()?;
    let risk = RiskSpec { loss };
    risk.validate(&shape)?;
    Ok((shape, risk))
}

fn objective_from(kv: &KeyValues, c: &[usize]) -> Result<ObjectiveSpec, CliError> {
    let method = kv.get_or("method", Method::Coco)?;
    let mut spec = match method {
        Method::Erm => ObjectiveSpec::erm(),
        Method::Coco => ObjectiveSpec::coco(),
        Method::CocoModified | Method::NaiveCoco => {
            if c.is_empty() {
                return Err(config_err(format!("{method} needs a nonempty `nondescendants` set")));
            }
            if method == Method::CocoModified {
                ObjectiveSpec::coco_modified(c.to_vec())
            } else {
                ObjectiveSpec::naive_coco(c.to_vec())
            }
        }
        Method::CocoErm => ObjectiveSpec::coco_erm(1.0),
        Method::Irmv1 => ObjectiveSpec::irmv1(20.0),
        Method::Vrex => ObjectiveSpec::vrex(20.0),
    };
    if let Some(v) = kv.get("objective.lambda_r")? {
        spec.lambda_r = v;
    }
    if let Some(v) = kv.get("objective.lambda")? {
        spec.lambda = v;
    }
    if let Some(v) = kv.get("objective.lambda_w")? {
        spec.lambda_w = v;
    }
    if let Some(v) = kv.get("objective.lambda_vrex")? {
        spec.lambda_vrex = v;
    }
    if let Some(s) = kv.raw("objective.estimator") {
        spec.estimator = match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "population" | "population-style" => Estimator::PopulationStyle,
            "approx1" | "unbiased" => Estimator::UnbiasedApprox1,
            "approx2" | "biased" => Estimator::BiasedApprox2,
            other => return Err(config_err(format!("unknown estimator `{other}`"))),
        };
    }
    Ok(spec)
}

fn optim_from(kv: &KeyValues, shape: &ModelShape, risk: RiskSpec) -> Result<OptimConfig, CliError> {
    let seed = kv.get_or("seed", 0u64)?;
    let mut cfg = if shape.kind == ModelKind::Mlp {
        GmmSuiteConfig::default().optim_config(seed)
    } else {
        bench::linear_optim_config(seed)
    };
    if !objectives::is_quadratic(shape, risk) {
        cfg.outer_grad = OuterGradient::HessianVector;
        if shape.kind != ModelKind::Mlp {
            cfg.starts = vec![Preconditioner::Identity];
        }
    }
    if let Some(v) = kv.get("optim.step_size")? {
        cfg.step_size = v;
    }
    if let Some(v) = kv.get("optim.max_iters")? {
        cfg.max_iters = v;
    }
    if let Some(v) = kv.get("optim.tol")? {
        cfg.tol = v;
    }
    if let Some(v) = kv.get("optim.fd_step")? {
        cfg.fd_step = v;
    }
    if let Some(v) = kv.get("optim.jitter")? {
        cfg.jitter = v;
    }
    if let Some(v) = kv.get("optim.batch_size")? {
        cfg.batch_size = v;
    }
    if let Some(v) = kv.get("optim.trace_every")? {
        cfg.trace_every = v;
    }
    if let Some(s) = kv.raw("optim.outer_grad") {
        cfg.outer_grad = match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "analytic" => OuterGradient::Analytic,
            "fd" | "finite-difference" => OuterGradient::FiniteDifference,
            "hvp" | "hessian-vector" => OuterGradient::HessianVector,
            other => return Err(config_err(format!("unknown outer gradient `{other}`"))),
        };
    }
    if let Some(s) = kv.raw("optim.init") {
        cfg.init = match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "jitter" | "zero-plus-jitter" => Init::ZeroPlusJitter,
            "fan-in" | "fanin" => Init::FanIn,
            other => return Err(config_err(format!("unknown init `{other}`"))),
        };
    }
    if let Some(list) = kv.list::<String>("optim.starts")? {
        cfg.starts = list
            .iter()
            .map(|s| match s.to_ascii_lowercase().as_str() {
                "identity" => Ok(Preconditioner::Identity),
                "diagonal" => Ok(Preconditioner::Diagonal),
                other => Err(config_err(format!("unknown start `{other}`"))),
            })
            .collect::<Result<_, _>>()?;
    }
    if let Some(v) = kv.bool("optim.anneal")? {
        cfg.anneal.enabled = v;
    }
    if let Some(v) = kv.get("optim.anneal_trigger")? {
        cfg.anneal.trigger_fraction = v;
    }
    if let Some(v) = kv.get("optim.anneal_decay")? {
        cfg.anneal.decay_factor = v;
    }
    if let Some(v) = kv.get("optim.anneal_escape")? {
        cfg.anneal.escape_norm = Some(v);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Contents of `fit.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub method: Method,
    pub objective: ObjectiveSpec,
    pub model: ModelShape,
    pub optim: OptimConfig,
    pub covariates: Vec<String>,
    pub environments: usize,
    pub theta: Vec<f64>,
    pub true_beta: Option<Vec<f64>>,
    pub mae: Option<f64>,
    pub converged: bool,
    pub diverged: bool,
    pub diagnostic: Option<String>,
    pub iterations: usize,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub final_gradient_norm: f64,
    pub final_lambda_r: f64,
    pub start: Preconditioner,
}

pub fn fit(kv: &KeyValues) -> Result<Outcome, CliError> {
    let out = out_dir(kv)?;
    let loaded = load(kv)?;
    let (shape, risk) = model_from(kv, &loaded)?;
    let spec = objective_from(kv, &loaded.multi.known_nondescendants)?;
    let cfg = optim_from(kv, &shape, risk)?;
    kv.finish()?;
    spec.validate(loaded.multi.p())?;

    let result = optimizer::fit(&loaded.multi, risk, &spec, &cfg, &shape)?;
    let theta: Vec<f64> = result.params.theta.iter().copied().collect();
    let true_beta = loaded
        .truth
        .as_ref()
        .filter(|t| shape.kind == ModelKind::Linear && t.beta.len() == theta.len())
        .map(|t| t.beta.clone());
    let mae = true_beta.as_ref().map(|b| bench::mae(&theta, b));
    let report = FitReport {
        method: spec.method,
        objective: spec.clone(),
        model: shape,
        optim: cfg,
        covariates: loaded.multi.covariate_names().to_vec(),
        environments: loaded.multi.len(),
        theta,
        true_beta,
        mae,
        converged: result.converged,
        diverged: result.diverged,
        diagnostic: result.diagnostic.clone(),
        iterations: result.iterations,
        initial_objective: result.initial_objective,
        final_objective: result.final_objective,
        final_gradient_norm: result.final_gradient_norm,
        final_lambda_r: result.final_lambda_r,
        start: result.start,
    };
    let mut trace = csv::Writer::from_writer(Vec::new());
    trace.write_record(["iteration", "objective"])?;
    for (it, v) in &result.objective_trace {
        trace.write_record([it.to_string(), v.to_string()])?;
    }
    let trace = trace.into_inner().map_err(|e| CliError::Io(e.into_error()))?;

    let mut staging = Staging::new(&out)?;
    staging.write("fit.json", serde_json::to_string_pretty(&report)? + "\n")?;
    staging.write("trace.csv", trace)?;
    let files = staging.commit()?;

    let mut summary = format!(
        "{} on {} environments: objective {:.6e} after {} iterations",
        spec.method,
        report.environments,
        report.final_objective,
        report.iterations
    );
    if let Some(m) = mae {
        summary.push_str(&format!(", mae {m:.4}"));
    }
    let exit_code = if result.diverged {
        summary.push_str(&format!(
            "\nfit diverged: {}",
            result.diagnostic.as_deref().unwrap_or("no diagnostic")
        ));
        EXIT_NUMERICAL
    } else {
        EXIT_OK
    };
    Ok(Outcome {
        files,
        exit_code,
        summary,
    })
}

/// Strength family of a streamed check. The non-identifiable scenario cycles
/// through its fixed strengths; the other scenarios draw from `Unif(0, 5)`.
fn family_from(kv: &KeyValues, kind: ScenarioKind) -> Result<StrengthFamily, CliError> {
    match kv.raw("check.family").map(|s| s.to_ascii_lowercase()) {
        None if kind == ScenarioKind::NonIdentifiable => Ok(StrengthFamily::Cycle(default_values(kind))),
        None => Ok(StrengthFamily::Uniform { lo: 0.0, hi: 5.0 }),
        Some(s) if s == "uniform" => Ok(StrengthFamily::Uniform {
            lo: kv.get_or("check.lo", 0.0)?,
            hi: kv.get_or("check.hi", 5.0)?,
        }),
        Some(s) if s == "cycle" => {
            let v = kv
                .list::<f64>("envs")?
                .ok_or_else(|| config_err("check.family = cycle takes its values from `envs`"))?;
            Ok(StrengthFamily::Cycle(v))
        }
        Some(other) => Err(config_err(format!("unknown strength family `{other}`"))),
    }
}

/// Contents of `check.json`.
#[derive(Debug, Clone, Serialize)]
struct CheckFile<'a> {
    /// Non-descendant set, 1-based.
    nondescendants: Vec<usize>,
    covariates: Vec<String>,
    streaming: bool,
    #[serde(flatten)]
    report: &'a CheckReport,
}

pub fn check(kv: &KeyValues) -> Result<Outcome, CliError> {
    let out = out_dir(kv)?;
    let defaults = RankOptions::default();
    let opts = RankOptions {
        kappa: kv.get_or("check.kappa", defaults.kappa)?,
        tol: kv.get_or("check.tol", defaults.tol)?,
    };
    let explicit_c = kv.indices("nondescendants")?;
    if explicit_c.as_ref().is_some_and(|c| c.is_empty()) {
        return Err(config_err("the non-descendant set must not be empty"));
    }
    let streaming = !kv.contains("data");
    let (multi, report) = if streaming {
        let kind = scenario_kind(kv)?
            .ok_or_else(|| config_err("`check` needs `data` or a scenario (`case`)"))?;
        let c = explicit_c.unwrap_or_else(|| kind.default_nondescendants());
        let family = family_from(kv, kind)?;
        let stream = EnvironmentStream::new(
            kind,
            family,
            kv.get_or("n", default_n(kind))?,
            kv.get_or("seed", 0u64)?,
        )?;
        let max_envs = kv.get_or("check.max_envs", 10usize)?;
        kv.finish()?;
        if max_envs == 0 {
            return Err(config_err("check.max_envs must be >= 1"));
        }
        identify::ico_workflow(&stream, &c, max_envs, &opts)?
    } else {
        let loaded = load(kv)?;
        kv.finish()?;
        let c = loaded.multi.known_nondescendants.clone();
        if c.is_empty() {
            return Err(config_err("the non-descendant set must not be empty"));
        }
        let report = identify::ico_rank_check_with(&loaded.multi, &c, &opts)?;
        (loaded.multi, report)
    };
    let file = CheckFile {
        nondescendants: one_based(&multi.known_nondescendants),
        covariates: multi.covariate_names().to_vec(),
        streaming,
        report: &report,
    };
    let mut staging = Staging::new(&out)?;
    staging.write("check.json", serde_json::to_string_pretty(&file)? + "\n")?;
    let files = staging.commit()?;
    let rc = &report.rank_check;
    let summary = format!(
        "rank check {} with {} environments: rank {} of {} (floor rank {}), {} invariant sets",
        if rc.passes { "passed" } else { "failed" },
        report.environments_used,
        rc.rank,
        multi.p(),
        rc.floor_rank,
        report.invariant_sets.len()
    );
    Ok(Outcome {
        files,
        exit_code: EXIT_OK,
        summary,
    })
}

fn methods(kv: &KeyValues, key: &str) -> Result<Option<Vec<BenchMethod>>, CliError> {
    kv.list::<String>(key)?
        .map(|list| {
            list.iter()
                .map(|s| s.parse::<BenchMethod>().map_err(CliError::from))
                .collect()
        })
        .transpose()
}

pub fn bench_cmd(kv: &KeyValues, suite: Option<&str>) -> Result<Outcome, CliError> {
    let out = out_dir(kv)?;
    let name = match suite {
        Some(s) => s.to_string(),
        None => kv
            .get::<String>("suite")?
            .ok_or_else(|| config_err("`bench` needs a suite: linear-cases, gmm or appendix-b1"))?,
    };
    let suite: Suite = name.parse()?;
    let seed = kv.get_or("seed", 0u64)?;
    let report = match suite {
        Suite::LinearCases => {
            let mut cfg = LinearSuiteConfig {
                seed,
                ..LinearSuiteConfig::default()
            };
            if let Some(cases) = kv.list::<ScenarioKind>("bench.cases")? {
                cfg.cases = cases;
            }
            if let Some(v) = kv.list("envs")? {
                cfg.gammas = v;
            }
            cfg.n_per_env = kv.get_or("n", cfg.n_per_env)?;
            cfg.reps = kv.get_or("reps", cfg.reps)?;
            if let Some(m) = methods(kv, "bench.methods")? {
                cfg.methods = m;
            }
            if let Some(v) = kv.list("bench.irm_lambdas")? {
                cfg.irm_lambdas = v;
            }
            if let Some(v) = kv.list("bench.vrex_lambdas")? {
                cfg.vrex_lambdas = v;
            }
            if let Some(c) = kv.indices("nondescendants")? {
                cfg.nondescendants = c;
            }
            cfg.max_iters = kv.get_or("optim.max_iters", cfg.max_iters)?;
            kv.finish()?;
            cfg.validate()?;
            bench::run_linear_suite(&cfg)?
        }
        Suite::Gmm => {
            let mut cfg = GmmSuiteConfig {
                seed,
                ..GmmSuiteConfig::default()
            };
            cfg.classes = kv.get_or("bench.classes", cfg.classes)?;
            if let Some(v) = kv.list("envs")? {
                cfg.train_flips = v;
            }
            cfg.n_per_env = kv.get_or("n", cfg.n_per_env)?;
            cfg.n_eval = kv.get_or("bench.n_eval", cfg.n_eval)?;
            cfg.test_envs = kv.get_or("bench.test_envs", cfg.test_envs)?;
            if let Some(v) = kv.list("model.hidden")? {
                cfg.hidden = v;
            }
            if let Some(v) = kv.list("bench.weights")? {
                cfg.weights = v;
            }
            cfg.reps = kv.get_or("reps", cfg.reps)?;
            if let Some(m) = methods(kv, "bench.methods")? {
                cfg.methods = m;
            }
            cfg.step_size = kv.get_or("optim.step_size", cfg.step_size)?;
            cfg.max_iters = kv.get_or("optim.max_iters", cfg.max_iters)?;
            cfg.batch_size = kv.get_or("optim.batch_size", cfg.batch_size)?;
            kv.finish()?;
            cfg.validate()?;
            bench::run_gmm_suite(&cfg)?
        }
        Suite::AppendixB1 => {
            let mut cfg = AppendixB1Config {
                seed,
                ..AppendixB1Config::default()
            };
            if let Some(v) = kv.list("envs")? {
                cfg.sigmas = v;
            }
            cfg.n_per_env = kv.get_or("n", cfg.n_per_env)?;
            cfg.tol = kv.get_or("check.tol", cfg.tol)?;
            kv.finish()?;
            bench::run_appendix_b1(&cfg)?
        }
    };
    let stem = suite.to_string();
    let mut staging = Staging::new(&out)?;
    staging.write(&format!("{stem}.json"), report.to_json()? + "\n")?;
    staging.write(&format!("{stem}.csv"), report.to_csv()?)?;
    let files = staging.commit()?;
    let mut summary = render_report(&report);
    if !report.failures.is_empty() {
        summary.push_str(&format!("\n{} cells failed; see the JSON report", report.failures.len()));
    }
    Ok(Outcome {
        files,
        exit_code: EXIT_OK,
        summary,
    })
}

fn fmt_vec(v: &[f64]) -> String {
    let items: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
    format!("({})", items.join(", "))
}

/// Plain-text tables for a bench report.
pub fn render_report(report: &BenchReport) -> String {
    let m = &report.metadata;
    let mut s = format!(
        "suite {} | seed {} | n {} | environments {} | reps {}\n",
        m.suite,
        m.seed,
        m.n_per_env,
        m.environments.join(" "),
        m.reps
    );
    if !report.mae.is_empty() {
        s.push_str(&format!("{:<14} {:<12} {:>10} {:>10} {:>6}\n", "case", "method", "mae", "sd", "fail"));
        for r in &report.mae {
            s.push_str(&format!(
                "{:<14} {:<12} {:>10.4} {:>10.4} {:>6}\n",
                r.case,
                r.method.to_string(),
                r.mean,
                r.sd,
                r.failures
            ));
        }
    }
    if !report.accuracy.is_empty() {
        s.push_str(&format!(
            "{:<12} {:>8} {:>8} {:>8} {:>8} {:>6}\n",
            "method", "train", "sd", "test", "sd", "fail"
        ));
        for r in &report.accuracy {
            s.push_str(&format!(
                "{:<12} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>6}\n",
                r.method.to_string(),
                r.train_mean,
                r.train_sd,
                r.test_mean,
                r.test_sd,
                r.failures
            ));
        }
    }
    if let Some(b1) = &report.appendix_b1 {
        s.push_str(&format!("{:<8} {:<40} {:<40} {:>10}\n", "sigma", "ols", "closed form", "error"));
        for e in &b1.environments {
            s.push_str(&format!(
                "{:<8} {:<40} {:<40} {:>10.4}\n",
                e.sigma,
                fmt_vec(&e.ols),
                fmt_vec(&e.closed_form),
                e.ols_max_error
            ));
        }
        s.push_str(&format!(
            "coco {} (max error {:.4})\n",
            fmt_vec(&b1.coco_solution),
            b1.coco_max_error
        ));
        for (i, block) in b1.block_intersections.iter().enumerate() {
            let pts: Vec<String> = block.iter().map(|p| fmt_vec(p)).collect();
            s.push_str(&format!("block {} intersection: {}\n", i + 1, pts.join(" ")));
        }
    }
    for f in &report.failures {
        s.push_str(&format!("failed {}: {}\n", f.cell, f.error));
    }
    s.trim_end().to_string()
}

pub fn report(kv: &KeyValues, inputs: &[PathBuf]) -> Result<Outcome, CliError> {
    let out = kv.get::<String>("out")?.map(PathBuf::from);
    kv.finish()?;
    if inputs.is_empty() {
        return Err(config_err("`report` needs at least one bench JSON file"));
    }
    let mut text = String::new();
    for path in inputs {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        let report: BenchReport = serde_json::from_str(&raw)
            .map_err(|e| config_err(format!("{} is not a bench report: {e}", path.display())))?;
        if !text.is_empty() {
            text.push_str("\n\n");
        }
        text.push_str(&render_report(&report));
    }
    let files = match out {
        Some(dir) => {
            let mut staging = Staging::new(&dir)?;
            staging.write("report.txt", text.clone() + "\n")?;
            staging.commit()?
        }
        None => Vec::new(),
    };
    Ok(Outcome {
        files,
        exit_code: EXIT_OK,
        summary: text,
    })
}
