//! Monte-Carlo and closed-form checks of the convergence and communication
//! bounds for gain-triggered transmission.
//!
//! Expectation bounds pass when the observed mean is within three standard
//! errors of the bound; almost-sure bounds get no slack.
//!
//! The convergence bound assumes a gradient covariance `G` that does not
//! depend on the iterate. The actual covariance does depend on `w`; by
//! default it is estimated at `w*`, where it is genuinely constant.
//! [`GMode::TrajectoryMax`] instead takes the entrywise maximum of
//! estimates along the ensemble-mean trajectory.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Purpose, StreamConfig, StreamKey};
use crate::error::{check_dim, Error, Result};
use crate::policy::{estimated_gain, exact_gain, PolicyKind};
use crate::regression::{objective, spectral_constants, stochastic_gradient, ProblemSpec, WeightVector};
use crate::sim::{replicate, RunConfig, RunTrace};
use crate::stats::{mean, standard_error, std_dev};

/// Slack, in standard errors, granted to expectation bounds.
pub const SE_SLACK: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    Expectation,
    AlmostSure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub name: String,
    pub kind: BoundKind,
    pub bound_value: f64,
    pub observed_value: f64,
    /// `bound − observed`.
    pub margin: f64,
    pub replications: usize,
    pub standard_error: f64,
    pub pass: bool,
}

impl TheoremReport {
    pub fn expectation(
        name: impl Into<String>,
        bound: f64,
        observed: f64,
        standard_error: f64,
        replications: usize,
    ) -> Self {
        Self {
            name: name.into(),
            kind: BoundKind::Expectation,
            bound_value: bound,
            observed_value: observed,
            margin: bound - observed,
            replications,
            standard_error,
            pass: observed <= bound + SE_SLACK * standard_error,
        }
    }

    pub fn almost_sure(name: impl Into<String>, bound: f64, observed: f64, replications: usize) -> Self {
        Self {
            name: name.into(),
            kind: BoundKind::AlmostSure,
            bound_value: bound,
            observed_value: observed,
            margin: bound - observed,
            replications,
            standard_error: 0.0,
            pass: observed <= bound,
        }
    }
}

/// Empirical covariance of single-agent stochastic gradients at a fixed
/// point.
#[derive(Debug, Clone, PartialEq)]
pub struct GEstimate {
    pub cov_matrix: DMatrix<f64>,
    pub num_samples: usize,
    pub eval_point: WeightVector,
}

impl GEstimate {
    pub fn zero(dim: usize) -> Self {
        Self {
            cov_matrix: DMatrix::zeros(dim, dim),
            num_samples: 0,
            eval_point: WeightVector::zeros(dim),
        }
    }

    /// `Tr(Σx G)` with `Σx = C/2`.
    pub fn trace_with(&self, spec: &ProblemSpec) -> f64 {
        0.5 * (spec.feature_cov() * &self.cov_matrix).trace()
    }
}

/// Covariance of `stochastic_gradient` over `samples` independent batches
/// of size `batch_size` at `w`.
pub fn estimate_g(spec: &ProblemSpec, batch_size: usize, w: &[f64], samples: usize, seed: u64) -> Result<GEstimate> {
    check_dim(spec.dim(), w.len())?;
    if samples < 2 {
        return Err(Error::InvalidParameter {
            name: "samples",
            reason: format!("need at least 2 samples, got {samples}"),
        });
    }
    let stream = StreamConfig::new(spec.clone(), batch_size, 1, seed)?;
    let grads: Vec<Vec<f64>> = (0..samples as u64)
        .into_par_iter()
        .map(|s| {
            let batch = stream.draw_keyed(StreamKey {
                seed,
                agent: 0,
                iteration: s,
                purpose: Purpose::GradientCovariance,
            });
            stochastic_gradient(&batch, w)
        })
        .collect::<Result<_>>()?;

    let n = spec.dim();
    let mut centre = vec![0.0; n];
    for g in &grads {
        for (c, v) in centre.iter_mut().zip(g) {
            *c += v;
        }
    }
    centre.iter_mut().for_each(|c| *c /= samples as f64);
    let mut cov = DMatrix::zeros(n, n);
    for g in &grads {
        for i in 0..n {
            let di = g[i] - centre[i];
            for j in i..n {
                cov[(i, j)] += di * (g[j] - centre[j]);
            }
        }
    }
    let denom = (samples - 1) as f64;
    for i in 0..n {
        for j in i..n {
            let v = cov[(i, j)] / denom;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok(GEstimate {
        cov_matrix: cov,
        num_samples: samples,
        eval_point: WeightVector(w.to_vec()),
    })
}

/// Right-hand side of the convergence bound after `K` iterations,
///
/// ```text
/// ρ^K J(w0) + (1 − ρ^K)[J(w*) + ε² Tr(Σx G)/(1 − ρ)] + λ Σ_{ℓ=0}^{K} ρ^{K−ℓ} ā_ℓ
/// ```
///
/// where `ā_ℓ` is the agent-averaged `E(1 − α_ℓ^i)`, so `non_transmit` has
/// `K + 1` entries. For `K = 0` nothing has happened yet and the bound is
/// `J(w0)`.
pub fn theorem1_bound(
    spec: &ProblemSpec,
    eps: f64,
    lambda: f64,
    w0: &[f64],
    num_iterations: usize,
    non_transmit: &[f64],
    g: &GEstimate,
) -> Result<f64> {
    let sc = spectral_constants(spec, eps)?;
    if sc.rho >= 1.0 {
        return Err(Error::NonContractive { eps, rho: sc.rho });
    }
    let j0 = objective(spec, w0)?;
    if num_iterations == 0 {
        return Ok(j0);
    }
    check_dim(num_iterations + 1, non_transmit.len())?;
    let rho = sc.rho;
    let rho_k = rho.powi(num_iterations as i32);
    let floor = spec.optimal_objective() + eps * eps * g.trace_with(spec) / (1.0 - rho);
    let penalty: f64 = non_transmit
        .iter()
        .enumerate()
        .map(|(l, a)| rho.powi((num_iterations - l) as i32) * a)
        .sum();
    Ok(rho_k * j0 + (1.0 - rho_k) * floor + lambda * penalty)
}

/// Steady-state bound `J(w*) + (λ + ε² Tr(Σx G))/(1 − ρ)`.
pub fn limsup_bound(spec: &ProblemSpec, eps: f64, lambda: f64, g: &GEstimate) -> Result<f64> {
    let sc = spectral_constants(spec, eps)?;
    if sc.rho >= 1.0 {
        return Err(Error::NonContractive { eps, rho: sc.rho });
    }
    Ok(spec.optimal_objective() + (lambda + eps * eps * g.trace_with(spec)) / (1.0 - sc.rho))
}

/// Where the gradient covariance is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GMode {
    #[default]
    AtOptimum,
    TrajectoryMax,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub g_samples: usize,
    pub g_mode: GMode,
    /// Seed of the covariance-estimation streams.
    pub g_seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            g_samples: 20_000,
            g_mode: GMode::AtOptimum,
            g_seed: 0x6e73_6565_6473,
        }
    }
}

fn oracle_lambda(cfg: &RunConfig) -> Result<f64> {
    match cfg.policy {
        PolicyKind::OracleGain { lambda } => Ok(lambda),
        other => Err(Error::UnsupportedPolicy(other.label())),
    }
}

fn require_contractive(cfg: &RunConfig) -> Result<f64> {
    let sc = spectral_constants(cfg.spec(), cfg.eps)?;
    if !sc.is_contractive() {
        return Err(Error::NonContractive {
            eps: cfg.eps,
            rho: sc.rho,
        });
    }
    Ok(sc.rho)
}

struct ReplicaSummary {
    objectives: Vec<f64>,
    non_transmit: Vec<f64>,
    weights: Vec<Vec<f64>>,
}

fn summarize(trace: &RunTrace) -> ReplicaSummary {
    let m = trace.num_agents as f64;
    ReplicaSummary {
        objectives: trace.objective_path(),
        non_transmit: trace
            .records
            .iter()
            .map(|r| r.decisions.iter().filter(|d| !d.transmit).count() as f64 / m)
            .collect(),
        weights: trace.records.iter().map(|r| r.weights.clone()).collect(),
    }
}

fn gradient_covariance(
    cfg: &RunConfig,
    opts: &VerifyOptions,
    trajectory: impl FnOnce() -> Vec<Vec<f64>>,
) -> Result<GEstimate> {
    let spec = cfg.spec();
    let n = cfg.stream.batch_size();
    match opts.g_mode {
        GMode::AtOptimum => estimate_g(spec, n, spec.true_weights(), opts.g_samples, opts.g_seed),
        GMode::TrajectoryMax => {
            let mut best: Option<GEstimate> = None;
            for (k, w) in trajectory().iter().enumerate() {
                let est = estimate_g(spec, n, w, opts.g_samples, opts.g_seed.wrapping_add(k as u64))?;
                best = Some(match best {
                    None => est,
                    Some(mut acc) => {
                        acc.cov_matrix.zip_apply(&est.cov_matrix, |a, b| *a = a.max(b));
                        acc.num_samples += est.num_samples;
                        acc
                    }
                });
            }
            best.ok_or_else(|| Error::NotApplicable("empty trajectory".into()))
        }
    }
}

fn mean_trajectory(summaries: &[ReplicaSummary], len: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..len)
        .map(|k| {
            let mut acc = vec![0.0; dim];
            for s in summaries {
                for (a, v) in acc.iter_mut().zip(&s.weights[k]) {
                    *a += v;
                }
            }
            acc.iter().map(|a| a / summaries.len() as f64).collect()
        })
        .collect()
}

/// Monte-Carlo check of the finite-horizon convergence bound for the oracle
/// gain trigger. Replication `r` uses seed `cfg.seed() + r`.
pub fn verify_theorem1(cfg: &RunConfig, replications: usize, opts: &VerifyOptions) -> Result<TheoremReport> {
    let lambda = oracle_lambda(cfg)?;
    require_contractive(cfg)?;
    if replications < 2 {
        return Err(Error::InvalidParameter {
            name: "replications",
            reason: "need at least 2".into(),
        });
    }
    let k = cfg.num_iterations;
    // one extra iteration supplies the decisions at ℓ = K
    let extended = cfg.with_iterations(k + 1);
    let summaries = replicate(&extended, cfg.seed(), replications, summarize)?;
    if summaries.iter().any(|s| s.non_transmit.len() != k + 1) {
        return Err(Error::NotApplicable("a replication diverged".into()));
    }
    let finals: Vec<f64> = summaries.iter().map(|s| s.objectives[k]).collect();
    let non_transmit: Vec<f64> = (0..=k)
        .map(|l| mean(&summaries.iter().map(|s| s.non_transmit[l]).collect::<Vec<_>>()))
        .collect();
    let g = gradient_covariance(cfg, opts, || mean_trajectory(&summaries, k + 1, cfg.spec().dim()))?;
    let bound = theorem1_bound(cfg.spec(), cfg.eps, lambda, &cfg.initial_weights, k, &non_transmit, &g)?;
    Ok(TheoremReport::expectation(
        "theorem1_convergence",
        bound,
        mean(&finals),
        standard_error(&finals),
        replications,
    ))
}

/// Monte-Carlo check of the steady-state bound: the observed value is the
/// mean of `J(w_k)` over `burn_in < k ≤ K`, averaged over replications.
pub fn verify_limsup(
    cfg: &RunConfig,
    replications: usize,
    burn_in: usize,
    opts: &VerifyOptions,
) -> Result<TheoremReport> {
    let lambda = oracle_lambda(cfg)?;
    require_contractive(cfg)?;
    let k = cfg.num_iterations;
    if burn_in >= k {
        return Err(Error::InvalidParameter {
            name: "burn_in",
            reason: format!("burn-in {burn_in} must be below the horizon {k}"),
        });
    }
    if replications < 2 {
        return Err(Error::InvalidParameter {
            name: "replications",
            reason: "need at least 2".into(),
        });
    }
    let summaries = replicate(cfg, cfg.seed(), replications, summarize)?;
    if summaries.iter().any(|s| s.objectives.len() != k + 1) {
        return Err(Error::NotApplicable("a replication diverged".into()));
    }
    let tails: Vec<f64> = summaries.iter().map(|s| mean(&s.objectives[burn_in + 1..=k])).collect();
    let g = gradient_covariance(cfg, opts, || mean_trajectory(&summaries, k, cfg.spec().dim()))?;
    let bound = limsup_bound(cfg.spec(), cfg.eps, lambda, &g)?;
    Ok(TheoremReport::expectation(
        "limsup_steady_state",
        bound,
        mean(&tails),
        standard_error(&tails),
        replications,
    ))
}

fn theorem2_bound(cfg: &RunConfig) -> Result<f64> {
    let lambda = oracle_lambda(cfg)?;
    if lambda <= 0.0 {
        return Err(Error::NotApplicable(
            "communication bound is infinite for lambda = 0".into(),
        ));
    }
    let j0 = objective(cfg.spec(), &cfg.initial_weights)?;
    Ok((j0 - cfg.spec().optimal_objective()) / lambda)
}

/// Almost-sure communication budget `Σ_k max_i α_k^i ≤ (J(w0) − J(w*))/λ`
/// checked on a single oracle trace.
pub fn verify_theorem2(trace: &RunTrace, cfg: &RunConfig) -> Result<TheoremReport> {
    let bound = theorem2_bound(cfg)?;
    Ok(TheoremReport::almost_sure(
        "theorem2_communication",
        bound,
        trace.any_transmissions() as f64,
        1,
    ))
}

/// [`verify_theorem2`] over `replications` seeds. The report's observed
/// value is the largest count seen; also returns the number of violating
/// runs.
pub fn verify_theorem2_ensemble(cfg: &RunConfig, replications: usize) -> Result<(TheoremReport, usize)> {
    let bound = theorem2_bound(cfg)?;
    let counts = replicate(cfg, cfg.seed(), replications, RunTrace::any_transmissions)?;
    let violations = counts.iter().filter(|&&c| c as f64 > bound).count();
    let worst = counts.iter().copied().max().unwrap_or(0) as f64;
    Ok((
        TheoremReport::almost_sure("theorem2_communication", bound, worst, replications),
        violations,
    ))
}

/// How `α(g)` is computed in the appendix check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainSource {
    Exact,
    Estimated,
}

/// Weighted sample of `(weight, α, J(w − εg))` triples reduced to the two
/// sides `E[α J]` and `E[α] E[J]`, together with the standard error of their
/// difference (meaningful for equal weights only).
pub fn appendix_sides(samples: &[(f64, f64, f64)]) -> (f64, f64, f64) {
    let total: f64 = samples.iter().map(|s| s.0).sum();
    let ea: f64 = samples.iter().map(|(p, a, _)| p * a).sum::<f64>() / total;
    let ej: f64 = samples.iter().map(|(p, _, j)| p * j).sum::<f64>() / total;
    let eaj: f64 = samples.iter().map(|(p, a, j)| p * a * j).sum::<f64>() / total;
    let centred: Vec<f64> = samples.iter().map(|(_, a, j)| (a - ea) * (j - ej)).collect();
    let se = if samples.len() > 1 {
        std_dev(&centred) / (samples.len() as f64).sqrt()
    } else {
        0.0
    };
    (eaj, ea * ej, se)
}

/// Exact expectations for a discrete gradient distribution given as
/// `(probability, g)` outcomes. Returns `(E[α J(w−εg)], E[α] E[J(w−εg)])`.
pub fn appendix_discrete(
    spec: &ProblemSpec,
    w: &[f64],
    eps: f64,
    lambda: f64,
    outcomes: &[(f64, Vec<f64>)],
) -> Result<(f64, f64)> {
    let triples = outcomes
        .iter()
        .map(|(p, g)| {
            let alpha = (exact_gain(spec, w, g, eps)? <= -lambda) as u8 as f64;
            let stepped = WeightVector(w.to_vec()).stepped(eps, g);
            Ok((*p, alpha, objective(spec, &stepped)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let (lhs, rhs, _) = appendix_sides(&triples);
    Ok((lhs, rhs))
}

pub const MIN_APPENDIX_SAMPLES: usize = 10_000;

/// Monte-Carlo check of `E[α J(w−εg)] ≤ E[α] E[J(w−εg)]` over fresh
/// stochastic gradients at a fixed `w`.
#[allow(clippy::too_many_arguments)]
pub fn verify_appendix_inequality(
    spec: &ProblemSpec,
    w: &[f64],
    eps: f64,
    lambda: f64,
    batch_size: usize,
    samples: usize,
    seed: u64,
    source: GainSource,
) -> Result<TheoremReport> {
    check_dim(spec.dim(), w.len())?;
    if samples < MIN_APPENDIX_SAMPLES {
        return Err(Error::InvalidParameter {
            name: "samples",
            reason: format!("need at least {MIN_APPENDIX_SAMPLES}, got {samples}"),
        });
    }
    let stream = StreamConfig::new(spec.clone(), batch_size, 1, seed)?;
    let w_vec = WeightVector(w.to_vec());
    let triples = (0..samples as u64)
        .into_par_iter()
        .map(|s| {
            let batch = stream.draw_keyed(StreamKey {
                seed,
                agent: 0,
                iteration: s,
                purpose: Purpose::Appendix,
            });
            let g = stochastic_gradient(&batch, w)?;
            let gain = match source {
                GainSource::Exact => exact_gain(spec, w, &g, eps)?,
                GainSource::Estimated => estimated_gain(&batch, &g, eps)?,
            };
            let j = objective(spec, &w_vec.stepped(eps, &g))?;
            Ok((1.0, (gain <= -lambda) as u8 as f64, j))
        })
        .collect::<Result<Vec<_>>>()?;
    let (lhs, rhs, se) = appendix_sides(&triples);
    let name = match source {
        GainSource::Exact => "appendix_inequality",
        GainSource::Estimated => "appendix_inequality_estimated",
    };
    Ok(TheoremReport::expectation(name, rhs, lhs, se, samples))
}
