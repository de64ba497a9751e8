//! Flat `key = value` experiment files.
//!
//! Every line is blank, a `#` comment, or `dotted.key = value`. Values are
//! numbers, booleans, bare words, comma lists (`3, 5`), matrices with rows
//! split by `;` (`3, 0; 0, 1`) or, for sweep grids, `log(lo, hi, n)` and
//! `lin(lo, hi, n)`. See the README for the full key table.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::path::PathBuf;

use fedgain_core::experiment::{lin_grid, log_grid, random_diagonal_problem, reference_problem};
use fedgain_core::theory::{GMode, VerifyOptions};
use fedgain_core::{Error as CoreError, GradientMode, PolicyKind, ProblemSpec, RunConfig, StreamConfig, WeightVector};
use nalgebra::DMatrix;

/// Parse or validation failure, pointing at the offending line and key when known.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub key: Option<String>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(l) = self.line {
            write!(f, "line {l}: ")?;
        }
        if let Some(k) = &self.key {
            write!(f, "{k}: ")?;
        }
        f.write_str(&self.message)
    }
}

impl std::error::Error for ConfigError {}

type Result<T> = std::result::Result<T, ConfigError>;

/// Parameters a sweep may vary.
pub const SWEEPABLE: &[&str] = &[
    "policy.lambda",
    "policy.mu",
    "policy.p",
    "run.eps",
    "run.batch_size",
    "run.num_agents",
    "run.num_iterations",
    "problem.noise_std",
];

const KEYS: &[&str] = &[
    "problem.kind",
    "problem.noise_std",
    "problem.dim",
    "problem.seed",
    "problem.cov_min",
    "problem.cov_max",
    "problem.true_weights",
    "problem.cov",
    "run.eps",
    "run.batch_size",
    "run.num_agents",
    "run.num_iterations",
    "run.initial_weights",
    "run.seed",
    "run.gradient_mode",
    "policy.kind",
    "policy.lambda",
    "policy.mu",
    "policy.p",
    "compare.policy.kind",
    "compare.policy.lambda",
    "compare.policy.mu",
    "compare.policy.p",
    "experiment.replications",
    "experiment.output_dir",
    "experiment.emit_plots",
    "verify.burn_in",
    "verify.limsup_iterations",
    "verify.g_samples",
    "verify.g_mode",
    "verify.g_seed",
    "verify.theorem2_replications",
    "verify.appendix_samples",
    "verify.appendix_batch_size",
    "verify.appendix_weights",
    "verify.appendix_lambdas",
];

#[derive(Debug, Clone, PartialEq)]
pub enum ProblemSettings {
    /// `C = diag(3, 1)`, `w* = (3, 5)`.
    Reference { noise_std: f64 },
    RandomDiagonal {
        dim: usize,
        seed: u64,
        cov_min: f64,
        cov_max: f64,
        noise_std: f64,
    },
    Custom {
        true_weights: Vec<f64>,
        cov: Vec<Vec<f64>>,
        noise_std: f64,
    },
}

impl ProblemSettings {
    pub fn noise_std(&self) -> f64 {
        match self {
            Self::Reference { noise_std } | Self::RandomDiagonal { noise_std, .. } | Self::Custom { noise_std, .. } => {
                *noise_std
            }
        }
    }

    fn set_noise_std(&mut self, v: f64) {
        match self {
            Self::Reference { noise_std } | Self::RandomDiagonal { noise_std, .. } | Self::Custom { noise_std, .. } => {
                *noise_std = v
            }
        }
    }

    pub fn build(&self) -> std::result::Result<ProblemSpec, CoreError> {
        match self {
            Self::Reference { noise_std } => reference_problem(*noise_std),
            Self::RandomDiagonal {
                dim,
                seed,
                cov_min,
                cov_max,
                noise_std,
            } => random_diagonal_problem(*dim, *seed, *cov_min, *cov_max, *noise_std),
            Self::Custom {
                true_weights,
                cov,
                noise_std,
            } => {
                let n = true_weights.len();
                if cov.len() != n || cov.iter().any(|r| r.len() != n) {
                    return Err(CoreError::InvalidProblem(format!("covariance must be {n}x{n}")));
                }
                let flat: Vec<f64> = cov.iter().flatten().copied().collect();
                ProblemSpec::new(true_weights.clone(), DMatrix::from_row_slice(n, n, &flat), *noise_std)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub eps: f64,
    pub batch_size: usize,
    pub num_agents: usize,
    pub num_iterations: usize,
    /// `None` means the zero vector.
    pub initial_weights: Option<Vec<f64>>,
    pub seed: u64,
    pub gradient_mode: GradientMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifySettings {
    /// Horizon of the steady-state check, separate from `run.num_iterations`.
    pub limsup_iterations: usize,
    pub burn_in: usize,
    pub g_samples: usize,
    pub g_mode: GMode,
    pub g_seed: u64,
    /// `None` follows `experiment.replications`.
    pub theorem2_replications: Option<usize>,
    pub appendix_samples: usize,
    /// `None` follows `run.batch_size`.
    pub appendix_batch_size: Option<usize>,
    /// Evaluation points; empty means `w0` and the midpoint of `w0` and `w*`.
    pub appendix_weights: Vec<Vec<f64>>,
    /// Empty means the policy's own λ.
    pub appendix_lambdas: Vec<f64>,
}

/// One swept parameter and its values.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepAxis {
    pub path: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareSettings {
    pub policy: PolicyKind,
    pub sweep: Vec<SweepAxis>,
}

/// Fully resolved experiment file.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub problem: ProblemSettings,
    pub run: RunSettings,
    pub policy: PolicyKind,
    pub sweep: Vec<SweepAxis>,
    pub compare: Option<CompareSettings>,
    pub replications: usize,
    pub output_dir: PathBuf,
    pub emit_plots: bool,
    pub verify: VerifySettings,
    /// Source line of every key that was set explicitly.
    pub lines: SourceLines,
}

/// Line numbers are diagnostics only and never affect equality.
#[derive(Debug, Clone, Default)]
pub struct SourceLines(BTreeMap<String, usize>);

impl PartialEq for SourceLines {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl SourceLines {
    pub fn get(&self, key: &str) -> Option<usize> {
        self.0.get(key).copied()
    }
}

struct Entries {
    map: BTreeMap<String, (String, usize)>,
    used: Vec<String>,
}

impl Entries {
    fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError {
                line: Some(line),
                key: None,
                message: format!("expected `key = value`, found `{content}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let err = |message: String| ConfigError {
                line: Some(line),
                key: Some(key.to_string()),
                message,
            };
            let known = KEYS.contains(&key)
                || key.strip_prefix("sweep.").is_some_and(|p| SWEEPABLE.contains(&p))
                || key
                    .strip_prefix("compare.sweep.")
                    .is_some_and(|p| SWEEPABLE.contains(&p));
            if !known {
                return Err(err("unknown key".into()));
            }
            if value.is_empty() {
                return Err(err("missing value".into()));
            }
            if let Some((_, first)) = map.insert(key.to_string(), (value.to_string(), line)) {
                return Err(err(format!("duplicate key (first set on line {first})")));
            }
        }
        Ok(Self { map, used: Vec::new() })
    }

    fn take(&mut self, key: &str) -> Option<(String, usize)> {
        self.used.push(key.to_string());
        self.map.get(key).cloned()
    }

    fn get<T>(&mut self, key: &str, default: T, parse: impl Fn(&str) -> std::result::Result<T, String>) -> Result<T> {
        match self.take(key) {
            None => Ok(default),
            Some((v, line)) => parse(&v).map_err(|message| ConfigError {
                line: Some(line),
                key: Some(key.to_string()),
                message,
            }),
        }
    }

    fn present(&self, key: &str) -> bool {
        self.map.contains_key(key)
    }

    fn error(&self, key: &str, message: impl Into<String>) -> ConfigError {
        ConfigError {
            line: self.map.get(key).map(|e| e.1),
            key: Some(key.to_string()),
            message: message.into(),
        }
    }
}

fn real(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("expected a number, found `{s}`"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("expected a finite number, found `{s}`"))
    }
}

fn positive(s: &str) -> std::result::Result<f64, String> {
    let v = real(s)?;
    if v > 0.0 {
        Ok(v)
    } else {
        Err(format!("must be positive, got {v}"))
    }
}

fn nonnegative(s: &str) -> std::result::Result<f64, String> {
    let v = real(s)?;
    if v >= 0.0 {
        Ok(v)
    } else {
        Err(format!("must be nonnegative, got {v}"))
    }
}

fn count(s: &str) -> std::result::Result<usize, String> {
    let v: usize = s
        .parse()
        .map_err(|_| format!("expected a nonnegative integer, found `{s}`"))?;
    Ok(v)
}

fn positive_count(s: &str) -> std::result::Result<usize, String> {
    match count(s)? {
        0 => Err("must be at least 1".into()),
        v => Ok(v),
    }
}

fn seed(s: &str) -> std::result::Result<u64, String> {
    s.parse()
        .map_err(|_| format!("expected an unsigned 64-bit integer, found `{s}`"))
}

fn boolean(s: &str) -> std::result::Result<bool, String> {
    match s {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected `true` or `false`, found `{s}`")),
    }
}

fn vector(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split(',').map(|p| real(p.trim())).collect()
}

fn matrix(s: &str) -> std::result::Result<Vec<Vec<f64>>, String> {
    s.split(';').map(|r| vector(r.trim())).collect()
}

/// Comma list, `log(lo, hi, n)` or `lin(lo, hi, n)`.
pub fn grid(s: &str) -> std::result::Result<Vec<f64>, String> {
    for (name, build) in [("log", log_grid as fn(f64, f64, usize) -> Vec<f64>), ("lin", lin_grid)] {
        if let Some(inner) = s.strip_prefix(name).and_then(|r| r.trim().strip_prefix('(')) {
            let inner = inner.strip_suffix(')').ok_or_else(|| format!("unclosed `{name}(`"))?;
            let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
            if parts.len() != 3 {
                return Err(format!("`{name}` takes (lo, hi, n)"));
            }
            let (lo, hi, n) = (real(parts[0])?, real(parts[1])?, positive_count(parts[2])?);
            if name == "log" && !(lo > 0.0 && hi > 0.0) {
                return Err("log grid bounds must be positive".into());
            }
            return Ok(build(lo, hi, n));
        }
    }
    vector(s)
}

fn gradient_mode(s: &str) -> std::result::Result<GradientMode, String> {
    match s {
        "stochastic" => Ok(GradientMode::Stochastic),
        "exact" => Ok(GradientMode::Exact),
        _ => Err(format!("expected `stochastic` or `exact`, found `{s}`")),
    }
}

fn g_mode(s: &str) -> std::result::Result<GMode, String> {
    match s {
        "at_optimum" => Ok(GMode::AtOptimum),
        "trajectory_max" => Ok(GMode::TrajectoryMax),
        _ => Err(format!("expected `at_optimum` or `trajectory_max`, found `{s}`")),
    }
}

fn word(s: &str) -> std::result::Result<String, String> {
    Ok(s.to_string())
}

fn policy(e: &mut Entries, prefix: &str) -> Result<PolicyKind> {
    let kind_key = format!("{prefix}.kind");
    let kind = e.get(&kind_key, "estimated_gain".to_string(), word)?;
    let lambda = e.get(&format!("{prefix}.lambda"), 0.1, nonnegative)?;
    let mu = e.get(&format!("{prefix}.mu"), 1.0, nonnegative)?;
    let p = e.get(&format!("{prefix}.p"), 0.5, real)?;
    let (policy, wanted) = match kind.as_str() {
        "oracle_gain" => (PolicyKind::OracleGain { lambda }, Some("lambda")),
        "estimated_gain" => (PolicyKind::EstimatedGain { lambda }, Some("lambda")),
        "grad_norm" => (PolicyKind::GradNorm { mu }, Some("mu")),
        "random" => (PolicyKind::Random { p }, Some("p")),
        "always" => (PolicyKind::Always, None),
        "never" => (PolicyKind::Never, None),
        _ => {
            return Err(e.error(
                &kind_key,
                format!("unknown policy `{kind}` (oracle_gain, estimated_gain, grad_norm, random, always, never)"),
            ))
        }
    };
    for param in ["lambda", "mu", "p"] {
        let key = format!("{prefix}.{param}");
        if Some(param) != wanted && e.present(&key) {
            return Err(e.error(&key, format!("not a parameter of `{kind}`")));
        }
    }
    policy
        .validate()
        .map_err(|err| e.error(&format!("{prefix}.{}", wanted.unwrap_or("kind")), err.to_string()))?;
    Ok(policy)
}

fn sweep_axes(e: &mut Entries, prefix: &str) -> Result<Vec<SweepAxis>> {
    let keys: Vec<String> = e.map.keys().filter(|k| k.starts_with(prefix)).cloned().collect();
    let mut axes = Vec::new();
    for key in keys {
        let values = e.get(&key, Vec::new(), grid)?;
        if values.is_empty() {
            return Err(e.error(&key, "sweep grid is empty"));
        }
        axes.push(SweepAxis {
            path: key[prefix.len()..].to_string(),
            values,
        });
    }
    Ok(axes)
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut e = Entries::parse(text)?;
        let noise_std = e.get("problem.noise_std", 1.0, nonnegative)?;
        let kind = e.get("problem.kind", "reference".to_string(), word)?;
        let problem = match kind.as_str() {
            "reference" => ProblemSettings::Reference { noise_std },
            "random_diagonal" => ProblemSettings::RandomDiagonal {
                dim: e.get("problem.dim", 10, positive_count)?,
                seed: e.get("problem.seed", 0, seed)?,
                cov_min: e.get("problem.cov_min", 0.1, positive)?,
                cov_max: e.get("problem.cov_max", 9.0, positive)?,
                noise_std,
            },
            "custom" => {
                if !e.present("problem.true_weights") || !e.present("problem.cov") {
                    return Err(e.error("problem.kind", "`custom` needs problem.true_weights and problem.cov"));
                }
                ProblemSettings::Custom {
                    true_weights: e.get("problem.true_weights", Vec::new(), vector)?,
                    cov: e.get("problem.cov", Vec::new(), matrix)?,
                    noise_std,
                }
            }
            _ => {
                return Err(e.error(
                    "problem.kind",
                    format!("unknown problem `{kind}` (reference, random_diagonal, custom)"),
                ))
            }
        };
        let run = RunSettings {
            eps: e.get("run.eps", 0.1, positive)?,
            batch_size: e.get("run.batch_size", 5, positive_count)?,
            num_agents: e.get("run.num_agents", 2, positive_count)?,
            num_iterations: e.get("run.num_iterations", 10, positive_count)?,
            initial_weights: e.get("run.initial_weights", None, |s| vector(s).map(Some))?,
            seed: e.get("run.seed", 0, seed)?,
            gradient_mode: e.get("run.gradient_mode", GradientMode::Stochastic, gradient_mode)?,
        };
        let policy_kind = policy(&mut e, "policy")?;
        let sweep = sweep_axes(&mut e, "sweep.")?;
        let has_compare = e.map.keys().any(|k| k.starts_with("compare."));
        let compare = if has_compare {
            if !e.present("compare.policy.kind") {
                let key = e
                    .map
                    .keys()
                    .find(|k| k.starts_with("compare."))
                    .cloned()
                    .unwrap_or_default();
                return Err(e.error(&key, "compare.* keys need compare.policy.kind"));
            }
            Some(CompareSettings {
                policy: policy(&mut e, "compare.policy")?,
                sweep: sweep_axes(&mut e, "compare.sweep.")?,
            })
        } else {
            None
        };
        let replications = e.get("experiment.replications", 100, positive_count)?;
        let output_dir = e.get("experiment.output_dir", PathBuf::from("out"), |s| Ok(PathBuf::from(s)))?;
        let emit_plots = e.get("experiment.emit_plots", true, boolean)?;
        let defaults = VerifyOptions::default();
        let verify = VerifySettings {
            limsup_iterations: e.get("verify.limsup_iterations", 200, positive_count)?,
            burn_in: e.get("verify.burn_in", 100, count)?,
            g_samples: e.get("verify.g_samples", defaults.g_samples, positive_count)?,
            g_mode: e.get("verify.g_mode", defaults.g_mode, g_mode)?,
            g_seed: e.get("verify.g_seed", defaults.g_seed, seed)?,
            theorem2_replications: e.get("verify.theorem2_replications", None, |s| positive_count(s).map(Some))?,
            appendix_samples: e.get("verify.appendix_samples", 100_000, positive_count)?,
            appendix_batch_size: e.get("verify.appendix_batch_size", None, |s| positive_count(s).map(Some))?,
            appendix_weights: e.get("verify.appendix_weights", Vec::new(), matrix)?,
            appendix_lambdas: e.get("verify.appendix_lambdas", Vec::new(), |s| {
                let v = vector(s)?;
                match v.iter().find(|l| **l < 0.0) {
                    Some(l) => Err(format!("must be nonnegative, got {l}")),
                    None => Ok(v),
                }
            })?,
        };
        let ignored: Vec<&String> = e.map.keys().filter(|k| !e.used.contains(k)).collect();
        if let Some(key) = ignored.first() {
            return Err(e.error(key, format!("not used by problem.kind = {kind}")));
        }
        let cfg = Self {
            problem,
            run,
            policy: policy_kind,
            sweep,
            compare,
            replications,
            output_dir,
            emit_plots,
            verify,
            lines: SourceLines(e.map.iter().map(|(k, v)| (k.clone(), v.1)).collect()),
        };
        cfg.run_config()?;
        let axes = cfg.sweep.iter().map(|a| (&cfg, a));
        let cmp = cfg.compare_config();
        for (base, axis) in axes.chain(cmp.iter().flat_map(|c| c.sweep.iter().map(move |a| (c, a)))) {
            for &v in &axis.values {
                base.with_value(&axis.path, v)?;
            }
        }
        if cfg.verify.burn_in >= cfg.verify.limsup_iterations {
            return Err(cfg.err_at("verify.burn_in", "must be below verify.limsup_iterations"));
        }
        Ok(cfg)
    }

    pub fn spec(&self) -> Result<ProblemSpec> {
        self.problem.build().map_err(|err| self.core_error(err))
    }

    /// Simulator configuration at the base point (no sweep applied).
    pub fn run_config(&self) -> Result<RunConfig> {
        let spec = self.spec()?;
        let w0 = match &self.run.initial_weights {
            Some(w) => WeightVector(w.clone()),
            None => WeightVector::zeros(spec.dim()),
        };
        if w0.len() != spec.dim() {
            return Err(self.err_at(
                "run.initial_weights",
                format!("expected {} entries, found {}", spec.dim(), w0.len()),
            ));
        }
        let stream = StreamConfig::new(spec, self.run.batch_size, self.run.num_agents, self.run.seed)
            .map_err(|err| self.core_error(err))?;
        RunConfig::new(stream, self.policy, self.run.eps, self.run.num_iterations, w0)
            .map(|c| c.with_gradient_mode(self.run.gradient_mode))
            .map_err(|err| self.core_error(err))
    }

    pub fn verify_options(&self) -> VerifyOptions {
        VerifyOptions {
            g_samples: self.verify.g_samples,
            g_mode: self.verify.g_mode,
            g_seed: self.verify.g_seed,
        }
    }

    /// Copy with one sweepable parameter replaced.
    pub fn with_value(&self, path: &str, value: f64) -> Result<Self> {
        let mut c = self.clone();
        let as_count = |v: f64| -> Result<usize> {
            if v >= 1.0 && v.fract() == 0.0 && v <= usize::MAX as f64 {
                Ok(v as usize)
            } else {
                Err(self.err_at(
                    &format!("sweep.{path}"),
                    format!("expected a positive integer, got {v}"),
                ))
            }
        };
        match path {
            "policy.lambda" | "policy.mu" | "policy.p" => {
                if c.policy.parameter().map(|p| p.0) != Some(&path[7..]) {
                    return Err(self.err_at(
                        &format!("sweep.{path}"),
                        format!("not a parameter of policy `{}`", c.policy.name()),
                    ));
                }
                c.policy = c.policy.with_parameter(value);
            }
            "run.eps" => c.run.eps = value,
            "run.batch_size" => c.run.batch_size = as_count(value)?,
            "run.num_agents" => c.run.num_agents = as_count(value)?,
            "run.num_iterations" => c.run.num_iterations = as_count(value)?,
            "problem.noise_std" => c.problem.set_noise_std(value),
            _ => return Err(self.err_at(&format!("sweep.{path}"), "not sweepable")),
        }
        c.run_config()?;
        Ok(c)
    }

    /// The comparison curve's base configuration, if any.
    pub fn compare_config(&self) -> Option<Self> {
        self.compare.as_ref().map(|cmp| Self {
            policy: cmp.policy,
            sweep: cmp.sweep.clone(),
            compare: None,
            ..self.clone()
        })
    }

    fn err_at(&self, key: &str, message: impl Into<String>) -> ConfigError {
        ConfigError {
            line: self.lines.get(key),
            key: Some(key.to_string()),
            message: message.into(),
        }
    }

    /// Attributes a simulator validation error to the key that caused it.
    fn core_error(&self, err: CoreError) -> ConfigError {
        let key = match &err {
            CoreError::InvalidParameter { name, .. } => match *name {
                "eps" => "run.eps",
                "num_iterations" => "run.num_iterations",
                "batch_size" => "run.batch_size",
                "num_agents" => "run.num_agents",
                "lambda" => "policy.lambda",
                "mu" => "policy.mu",
                "p" => "policy.p",
                "cov_range" => "problem.cov_min",
                _ => "",
            },
            CoreError::DimensionMismatch { .. } => "run.initial_weights",
            CoreError::InvalidProblem(_) => match self.problem {
                ProblemSettings::Custom { .. } => "problem.cov",
                _ => "problem.kind",
            },
            _ => "",
        };
        if key.is_empty() {
            ConfigError {
                line: None,
                key: None,
                message: err.to_string(),
            }
        } else {
            self.err_at(key, err.to_string())
        }
    }

    /// Canonical text with every default written out. Parsing it yields an
    /// equal configuration.
    pub fn effective(&self) -> String {
        let mut out = String::from("# effective configuration, all defaults resolved\n");
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        let list = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ");
        let rows = |m: &[Vec<f64>]| m.iter().map(|r| list(r)).collect::<Vec<_>>().join("; ");
        match &self.problem {
            ProblemSettings::Reference { noise_std } => {
                put("problem.kind", "reference".into());
                put("problem.noise_std", format!("{noise_std:?}"));
            }
            ProblemSettings::RandomDiagonal {
                dim,
                seed,
                cov_min,
                cov_max,
                noise_std,
            } => {
                put("problem.kind", "random_diagonal".into());
                put("problem.dim", dim.to_string());
                put("problem.seed", seed.to_string());
                put("problem.cov_min", format!("{cov_min:?}"));
                put("problem.cov_max", format!("{cov_max:?}"));
                put("problem.noise_std", format!("{noise_std:?}"));
            }
            ProblemSettings::Custom {
                true_weights,
                cov,
                noise_std,
            } => {
                put("problem.kind", "custom".into());
                put("problem.true_weights", list(true_weights));
                put("problem.cov", rows(cov));
                put("problem.noise_std", format!("{noise_std:?}"));
            }
        }
        let r = &self.run;
        put("run.eps", format!("{:?}", r.eps));
        put("run.batch_size", r.batch_size.to_string());
        put("run.num_agents", r.num_agents.to_string());
        put("run.num_iterations", r.num_iterations.to_string());
        if let Some(w) = &r.initial_weights {
            put("run.initial_weights", list(w));
        }
        put("run.seed", r.seed.to_string());
        put(
            "run.gradient_mode",
            match r.gradient_mode {
                GradientMode::Stochastic => "stochastic",
                GradientMode::Exact => "exact",
            }
            .into(),
        );
        let policy_lines = |put: &mut dyn FnMut(&str, String), prefix: &str, p: &PolicyKind| {
            put(&format!("{prefix}.kind"), p.name().into());
            if let Some((name, v)) = p.parameter() {
                put(&format!("{prefix}.{name}"), format!("{v:?}"));
            }
        };
        policy_lines(&mut put, "policy", &self.policy);
        for a in &self.sweep {
            put(&format!("sweep.{}", a.path), list(&a.values));
        }
        if let Some(c) = &self.compare {
            policy_lines(&mut put, "compare.policy", &c.policy);
            for a in &c.sweep {
                put(&format!("compare.sweep.{}", a.path), list(&a.values));
            }
        }
        put("experiment.replications", self.replications.to_string());
        put("experiment.output_dir", self.output_dir.display().to_string());
        put("experiment.emit_plots", self.emit_plots.to_string());
        let v = &self.verify;
        put("verify.limsup_iterations", v.limsup_iterations.to_string());
        put("verify.burn_in", v.burn_in.to_string());
        put("verify.g_samples", v.g_samples.to_string());
        put(
            "verify.g_mode",
            match v.g_mode {
                GMode::AtOptimum => "at_optimum",
                GMode::TrajectoryMax => "trajectory_max",
            }
            .into(),
        );
        put("verify.g_seed", v.g_seed.to_string());
        if let Some(n) = v.theorem2_replications {
            put("verify.theorem2_replications", n.to_string());
        }
        put("verify.appendix_samples", v.appendix_samples.to_string());
        if let Some(n) = v.appendix_batch_size {
            put("verify.appendix_batch_size", n.to_string());
        }
        if !v.appendix_weights.is_empty() {
            put("verify.appendix_weights", rows(&v.appendix_weights));
        }
        if !v.appendix_lambdas.is_empty() {
            put("verify.appendix_lambdas", list(&v.appendix_lambdas));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_describe_the_reference_setup() {
        let c = ExperimentConfig::parse("").unwrap();
        assert_eq!(c.problem, ProblemSettings::Reference { noise_std: 1.0 });
        assert_eq!(c.run.eps, 0.1);
        assert_eq!(c.run.batch_size, 5);
        assert_eq!(c.run.num_agents, 2);
        assert_eq!(c.run.num_iterations, 10);
        assert_eq!(c.policy, PolicyKind::EstimatedGain { lambda: 0.1 });
        assert!(c.sweep.is_empty() && c.compare.is_none());
    }

    #[test]
    fn grids_and_lists() {
        assert_eq!(grid("1, 2.5,3").unwrap(), vec![1.0, 2.5, 3.0]);
        assert_eq!(grid("lin(0, 1, 3)").unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(grid("log(1, 100, 3)").unwrap().len(), 3);
        assert!(grid("log(0, 1, 3)").is_err());
        assert!(grid("lin(0, 1)").is_err());
        assert!(grid("lin(0, 1, 3").is_err());
        assert_eq!(matrix("3, 0; 0, 1").unwrap(), vec![vec![3.0, 0.0], vec![0.0, 1.0]]);
    }

    #[test]
    fn diagnostics_name_line_and_key() {
        let e = ExperimentConfig::parse("# header\nrun.eps = 0.1\n\nrun.eps2 = 3\n").unwrap_err();
        assert_eq!((e.line, e.key.as_deref()), (Some(4), Some("run.eps2")));
        let e = ExperimentConfig::parse("run.eps = -0.5\n").unwrap_err();
        assert_eq!((e.line, e.key.as_deref()), (Some(1), Some("run.eps")));
        assert!(e.to_string().starts_with("line 1: run.eps: "));
        let e = ExperimentConfig::parse("run.eps = 0.1\nrun.eps = 0.2\n").unwrap_err();
        assert_eq!(e.line, Some(2));
        let e = ExperimentConfig::parse("just words\n").unwrap_err();
        assert_eq!((e.line, e.key), (Some(1), None));
        let e = ExperimentConfig::parse("policy.kind = grad_norm\npolicy.lambda = 1\n").unwrap_err();
        assert_eq!(e.key.as_deref(), Some("policy.lambda"));
        let e = ExperimentConfig::parse("problem.dim = 4\n").unwrap_err();
        assert_eq!(e.key.as_deref(), Some("problem.dim"));
        let e = ExperimentConfig::parse("run.initial_weights = 1, 2, 3\n").unwrap_err();
        assert_eq!(e.key.as_deref(), Some("run.initial_weights"));
        let e =
            ExperimentConfig::parse("problem.kind = custom\nproblem.true_weights = 1, 2\nproblem.cov = 1, 2; 3, 4\n")
                .unwrap_err();
        assert_eq!(e.key.as_deref(), Some("problem.cov"));
        let e = ExperimentConfig::parse("compare.sweep.policy.mu = 1, 2\n").unwrap_err();
        assert_eq!(e.key.as_deref(), Some("compare.sweep.policy.mu"));
        let e = ExperimentConfig::parse("sweep.policy.lambda = 1, x\n").unwrap_err();
        assert_eq!(e.key.as_deref(), Some("sweep.policy.lambda"));
    }

    #[test]
    fn effective_config_round_trips() {
        let text = "problem.kind = random_diagonal\nproblem.dim = 10\nproblem.seed = 7\nrun.eps = 0.2\n\
                    run.batch_size = 20\npolicy.lambda = 0.3\nsweep.policy.lambda = log(0.1, 10, 5)\n\
                    compare.policy.kind = grad_norm\ncompare.sweep.policy.mu = lin(1, 50, 4)\n\
                    verify.appendix_weights = 0, 0; 1, 1\nexperiment.replications = 7\n";
        let c = ExperimentConfig::parse(text).unwrap();
        let again = ExperimentConfig::parse(&c.effective()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.effective(), again.effective());
        let custom = ExperimentConfig::parse(
            "problem.kind = custom\nproblem.true_weights = 0.1, 0.3\nproblem.cov = 2, 0.5; 0.5, 1\nrun.initial_weights = 1, 1\n",
        )
        .unwrap();
        assert_eq!(custom, ExperimentConfig::parse(&custom.effective()).unwrap());
    }

    #[test]
    fn sweep_overrides() {
        let c = ExperimentConfig::parse("sweep.policy.lambda = 1, 2\n").unwrap();
        let p = c.with_value("policy.lambda", 2.0).unwrap();
        assert_eq!(p.policy, PolicyKind::EstimatedGain { lambda: 2.0 });
        assert!(c.with_value("policy.mu", 2.0).is_err());
        assert!(c.with_value("run.batch_size", 2.5).is_err());
        assert_eq!(c.with_value("run.batch_size", 7.0).unwrap().run.batch_size, 7);
        let e = c.with_value("run.eps", -1.0).unwrap_err();
        assert_eq!(e.key.as_deref(), Some("run.eps"));
    }
}
