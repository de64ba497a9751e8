//! Replicated experiment drivers: policy sweeps, the one-step oracle versus
//! estimate comparison, and matched-budget comparison of two sweep curves.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{draw_batch, Purpose, RngStream};
use crate::error::{Error, Result};
use crate::policy::{estimated_gain, exact_gain, PolicyDecision, PolicyKind};
use crate::regression::{objective, stochastic_gradient, ProblemSpec};
use crate::sim::{apply_update, replicate, RunConfig};
use crate::stats::{interpolate, mean, standard_error, std_dev};

/// Two-dimensional reference problem: `C = diag(3, 1)`, `w* = (3, 5)`.
pub fn reference_problem(noise_std: f64) -> Result<ProblemSpec> {
    ProblemSpec::diagonal(vec![3.0, 5.0], &[3.0, 1.0], noise_std)
}

/// Random problem with diagonal covariance entries uniform in
/// `[cov_min, cov_max)` and `w* ~ N(0, I)`, drawn from `seed`.
pub fn random_diagonal_problem(
    dim: usize,
    seed: u64,
    cov_min: f64,
    cov_max: f64,
    noise_std: f64,
) -> Result<ProblemSpec> {
    if !(cov_min > 0.0 && cov_max > cov_min) {
        return Err(Error::InvalidParameter {
            name: "cov_range",
            reason: format!("need 0 < cov_min < cov_max, got [{cov_min}, {cov_max})"),
        });
    }
    let mut rng = RngStream::keyed(seed, 0, 0, Purpose::Problem);
    let variances: Vec<f64> = (0..dim).map(|_| rng.random_range(cov_min..cov_max)).collect();
    let weights: Vec<f64> = (0..dim).map(|_| rng.standard_normal()).collect();
    ProblemSpec::diagonal(weights, &variances, noise_std)
}

/// `count` logarithmically spaced points from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

pub fn lin_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    (0..count)
        .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
        .collect()
}

/// Default λ grid of the tradeoff sweep.
pub fn default_lambda_grid() -> Vec<f64> {
    log_grid(1e-3, 1.0, 8)
}

/// Aggregate of `replications` seeded runs of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunStats {
    pub replications: usize,
    pub seed_first: u64,
    pub seed_last: u64,
    pub mean_final_objective: f64,
    pub std_final_objective: f64,
    pub se_final_objective: f64,
    pub mean_excess_objective: f64,
    /// Mean of `Σ_k Σ_i α_k^i`.
    pub mean_comm_total: f64,
    /// Mean of `Σ_k max_i α_k^i`.
    pub mean_comm_any: f64,
    pub diverged: usize,
}

/// Per-seed outcome kept by sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RunSample {
    pub seed: u64,
    pub final_objective: f64,
    pub comm_total: u64,
    pub comm_any: u64,
    pub diverged: bool,
}

/// Runs seeds `base_seed..base_seed + replications`, in seed order.
pub fn run_samples(cfg: &RunConfig, replications: usize, base_seed: u64) -> Result<Vec<RunSample>> {
    if replications == 0 {
        return Err(Error::InvalidParameter {
            name: "replications",
            reason: "must be at least 1".into(),
        });
    }
    replicate(cfg, base_seed, replications, |t| RunSample {
        seed: t.seed,
        final_objective: t.final_objective,
        comm_total: t.total_transmissions(),
        comm_any: t.any_transmissions(),
        diverged: t.is_diverged(),
    })
}

impl RunStats {
    /// Aggregates samples in the order given. Panics on an empty slice.
    pub fn from_samples(samples: &[RunSample], optimal_objective: f64) -> Self {
        assert!(!samples.is_empty(), "no samples to aggregate");
        let finals: Vec<f64> = samples.iter().map(|r| r.final_objective).collect();
        let totals: Vec<f64> = samples.iter().map(|r| r.comm_total as f64).collect();
        let anys: Vec<f64> = samples.iter().map(|r| r.comm_any as f64).collect();
        let mean_final = mean(&finals);
        RunStats {
            replications: samples.len(),
            seed_first: samples[0].seed,
            seed_last: samples[samples.len() - 1].seed,
            mean_final_objective: mean_final,
            std_final_objective: std_dev(&finals),
            se_final_objective: standard_error(&finals),
            mean_excess_objective: mean_final - optimal_objective,
            mean_comm_total: mean(&totals),
            mean_comm_any: mean(&anys),
            diverged: samples.iter().filter(|r| r.diverged).count(),
        }
    }
}

pub fn run_stats(cfg: &RunConfig, replications: usize, base_seed: u64) -> Result<RunStats> {
    let samples = run_samples(cfg, replications, base_seed)?;
    Ok(RunStats::from_samples(&samples, cfg.spec().optimal_objective()))
}

/// [`run_stats`] for each policy, sharing seeds across policies.
pub fn policy_sweep(
    base: &RunConfig,
    policies: &[PolicyKind],
    replications: usize,
    base_seed: u64,
) -> Result<Vec<(PolicyKind, RunStats)>> {
    policies
        .iter()
        .map(|p| {
            let cfg = base.with_policy(*p);
            cfg.validate()?;
            Ok((*p, run_stats(&cfg, replications, base_seed)?))
        })
        .collect()
}

/// One λ of the oracle-versus-estimate comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainComparePoint {
    pub lambda: f64,
    pub replications: usize,
    pub oracle_rate: f64,
    pub estimated_rate: f64,
    /// Fraction of `(replication, agent)` pairs where both rules agree.
    pub agreement: f64,
    pub oracle_mean_objective: f64,
    pub oracle_se_objective: f64,
    pub estimated_mean_objective: f64,
    pub estimated_se_objective: f64,
}

struct AgentGains {
    gradient: Vec<f64>,
    exact: f64,
    estimated: f64,
}

/// Single server step from `cfg.initial_weights`, scoring every agent's
/// update with both the exact and the batch-estimated gain on the same
/// batch. Replication `r` uses seed `base_seed + r`.
pub fn gain_compare(
    cfg: &RunConfig,
    lambdas: &[f64],
    replications: usize,
    base_seed: u64,
) -> Result<Vec<GainComparePoint>> {
    cfg.validate()?;
    if replications == 0 || lambdas.is_empty() {
        return Err(Error::InvalidParameter {
            name: "replications",
            reason: "need at least one replication and one lambda".into(),
        });
    }
    if let Some(l) = lambdas.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
        return Err(Error::InvalidParameter {
            name: "lambda",
            reason: format!("must be a nonnegative real, got {l}"),
        });
    }
    let spec = cfg.spec();
    let w0 = &cfg.initial_weights;
    let eps = cfg.eps;
    let per_rep: Vec<Vec<AgentGains>> = (0..replications as u64)
        .into_par_iter()
        .map(|r| {
            let stream = cfg.stream.with_seed(base_seed.wrapping_add(r));
            (0..cfg.num_agents())
                .map(|a| {
                    let batch = draw_batch(&stream, a, 0)?;
                    let g = stochastic_gradient(&batch, w0)?;
                    Ok(AgentGains {
                        exact: exact_gain(spec, w0, &g, eps)?,
                        estimated: estimated_gain(&batch, &g, eps)?,
                        gradient: g,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let decision = |score: f64, lambda: f64| PolicyDecision {
        transmit: score <= -lambda,
        score,
        threshold: -lambda,
    };
    lambdas
        .iter()
        .map(|&lambda| {
            let mut agree = 0usize;
            let mut sent_oracle = 0usize;
            let mut sent_est = 0usize;
            let mut j_oracle = Vec::with_capacity(replications);
            let mut j_est = Vec::with_capacity(replications);
            for agents in &per_rep {
                let grads: Vec<Vec<f64>> = agents.iter().map(|a| a.gradient.clone()).collect();
                let d_o: Vec<_> = agents.iter().map(|a| decision(a.exact, lambda)).collect();
                let d_e: Vec<_> = agents.iter().map(|a| decision(a.estimated, lambda)).collect();
                agree += d_o.iter().zip(&d_e).filter(|(a, b)| a.transmit == b.transmit).count();
                sent_oracle += d_o.iter().filter(|d| d.transmit).count();
                sent_est += d_e.iter().filter(|d| d.transmit).count();
                j_oracle.push(objective(spec, &apply_update(w0, eps, &grads, &d_o))?);
                j_est.push(objective(spec, &apply_update(w0, eps, &grads, &d_e))?);
            }
            let decisions = (replications * cfg.num_agents()) as f64;
            Ok(GainComparePoint {
                lambda,
                replications,
                oracle_rate: sent_oracle as f64 / decisions,
                estimated_rate: sent_est as f64 / decisions,
                agreement: agree as f64 / decisions,
                oracle_mean_objective: mean(&j_oracle),
                oracle_se_objective: standard_error(&j_oracle),
                estimated_mean_objective: mean(&j_est),
                estimated_se_objective: standard_error(&j_est),
            })
        })
        .collect()
}

/// Two curves compared at one communication budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MatchedBudget {
    pub budget: f64,
    pub first: f64,
    pub second: f64,
}

impl MatchedBudget {
    /// Relative improvement of `first` over `second`.
    pub fn relative_gain(&self) -> f64 {
        1.0 - self.first / self.second
    }
}

/// Interpolates both `(communication, value)` curves at `count` budgets
/// evenly spaced over the communication range they share.
pub fn matched_budgets(first: &[(f64, f64)], second: &[(f64, f64)], count: usize) -> Result<Vec<MatchedBudget>> {
    if first.is_empty() || second.is_empty() || count == 0 {
        return Err(Error::InvalidParameter {
            name: "curves",
            reason: "both curves need points and count must be positive".into(),
        });
    }
    let sorted = |c: &[(f64, f64)]| {
        let mut v = c.to_vec();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    };
    let (a, b) = (sorted(first), sorted(second));
    let lo = a[0].0.max(b[0].0);
    let hi = a[a.len() - 1].0.min(b[b.len() - 1].0);
    if lo > hi {
        return Err(Error::NotApplicable("curves share no communication range".into()));
    }
    Ok(lin_grid(lo, hi, count)
        .into_iter()
        .map(|budget| MatchedBudget {
            budget,
            first: interpolate(&a, budget),
            second: interpolate(&b, budget),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::StreamConfig;
    use crate::regression::WeightVector;

    #[test]
    fn grids() {
        let g = log_grid(1e-3, 1.0, 4);
        assert_eq!(g.len(), 4);
        assert!((g[0] - 1e-3).abs() < 1e-15 && (g[3] - 1.0).abs() < 1e-12);
        assert!((g[1] - 1e-2).abs() < 1e-12);
        assert_eq!(lin_grid(0.0, 1.0, 3), vec![0.0, 0.5, 1.0]);
        assert_eq!(log_grid(2.0, 5.0, 1), vec![2.0]);
        assert_eq!(default_lambda_grid().len(), 8);
    }

    #[test]
    fn random_problem_is_seeded() {
        let a = random_diagonal_problem(10, 5, 0.1, 9.0, 1.0).unwrap();
        let b = random_diagonal_problem(10, 5, 0.1, 9.0, 1.0).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, random_diagonal_problem(10, 6, 0.1, 9.0, 1.0).unwrap());
        assert!(a.eigenvalues().iter().all(|&l| (0.1..9.0).contains(&l)));
        assert!(random_diagonal_problem(3, 0, 2.0, 1.0, 1.0).is_err());
    }

    fn paper_cfg(k: usize) -> RunConfig {
        let stream = StreamConfig::new(reference_problem(1.0).unwrap(), 5, 2, 0).unwrap();
        RunConfig::new(
            stream,
            PolicyKind::EstimatedGain { lambda: 0.1 },
            0.2,
            k,
            WeightVector::zeros(2),
        )
        .unwrap()
    }

    #[test]
    fn huge_lambda_never_transmits_in_comparison() {
        let pts = gain_compare(&paper_cfg(1), &[1e6], 200, 0).unwrap();
        assert_eq!(pts[0].oracle_rate, 0.0);
        assert_eq!(pts[0].estimated_rate, 0.0);
        assert_eq!(pts[0].agreement, 1.0);
        assert_eq!(pts[0].oracle_mean_objective, 26.5);
    }

    #[test]
    fn noiseless_large_batch_decisions_agree() {
        let stream = StreamConfig::new(reference_problem(0.0).unwrap(), 100_000, 2, 0).unwrap();
        let cfg = RunConfig::new(
            stream,
            PolicyKind::EstimatedGain { lambda: 0.1 },
            0.2,
            1,
            WeightVector::zeros(2),
        )
        .unwrap();
        // both gains sit near −ε‖∇J‖² + ½ε²∇JᵀC∇J = −15.84 at w0; stay away from it
        let pts = gain_compare(&cfg, &[1.0, 5.0, 10.0, 30.0], 4, 0).unwrap();
        for p in pts {
            assert_eq!(p.agreement, 1.0, "lambda {}", p.lambda);
        }
    }

    #[test]
    fn single_point_sweep_matches_run_stats() {
        let cfg = paper_cfg(10);
        let swept = policy_sweep(&cfg, &[cfg.policy], 50, 9).unwrap();
        assert_eq!(swept[0].1, run_stats(&cfg, 50, 9).unwrap());
        assert_eq!(swept[0].1.seed_first, 9);
        assert_eq!(swept[0].1.seed_last, 58);
    }

    #[test]
    fn matched_budget_interpolation() {
        let a = [(0.0, 10.0), (10.0, 0.0)];
        let b = [(2.0, 20.0), (12.0, 10.0)];
        let m = matched_budgets(&a, &b, 3).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m[0].budget, 2.0);
        assert_eq!(m[2].budget, 10.0);
        assert_eq!(m[0].first, 8.0);
        assert_eq!(m[0].second, 20.0);
        assert_eq!(m[2].second, 12.0);
        assert!(matched_budgets(&[(0.0, 1.0)], &[(5.0, 1.0)], 2).is_err());
    }
}
