//! Server/agent iteration loop.
//!
//! Each iteration the server broadcasts `w_k`, every agent draws a fresh
//! batch, computes its gradient and decides whether to transmit. With `T`
//! the set of transmitting agents the server applies
//!
//! ```text
//! w_{k+1} = w_k                          if T = ∅
//! w_{k+1} = w_k − ε (1/|T|) Σ_{i∈T} g_i  otherwise
//! ```
//!
//! which for two agents is exactly the four-case rule (single sender, both
//! averaged, nobody). Broadcast is free; only uplink transmissions count.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{draw_batch, Purpose, RngStream, StreamConfig};
use crate::error::{check_dim, Error, Result};
use crate::policy::{decide, decision_consistent, PolicyDecision, PolicyInputs, PolicyKind};
use crate::regression::{
    objective, spectral_constants, stochastic_gradient, true_gradient, DataBatch, ProblemSpec, WeightVector,
};
use crate::CSV_VERSION_LINE;

/// Objective value above which a run is declared divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    /// Batch gradients.
    #[default]
    Stochastic,
    /// Substitute `∇J(w)` for every agent's gradient.
    Exact,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub stream: StreamConfig,
    pub policy: PolicyKind,
    pub eps: f64,
    pub num_iterations: usize,
    pub initial_weights: WeightVector,
    pub gradient_mode: GradientMode,
}

impl RunConfig {
    pub fn new(
        stream: StreamConfig,
        policy: PolicyKind,
        eps: f64,
        num_iterations: usize,
        initial_weights: WeightVector,
    ) -> Result<Self> {
        let cfg = Self {
            stream,
            policy,
            eps,
            num_iterations,
            initial_weights,
            gradient_mode: GradientMode::Stochastic,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_gradient_mode(mut self, mode: GradientMode) -> Self {
        self.gradient_mode = mode;
        self
    }

    pub fn with_policy(&self, policy: PolicyKind) -> Self {
        Self { policy, ..self.clone() }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            stream: self.stream.with_seed(seed),
            ..self.clone()
        }
    }

    pub fn with_iterations(&self, num_iterations: usize) -> Self {
        Self {
            num_iterations,
            ..self.clone()
        }
    }

    pub fn spec(&self) -> &ProblemSpec {
        self.stream.spec()
    }

    pub fn num_agents(&self) -> usize {
        self.stream.num_agents()
    }

    pub fn seed(&self) -> u64 {
        self.stream.seed()
    }

    /// Hard errors for invalid values; a non-contractive step size only warns.
    pub fn validate(&self) -> Result<()> {
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::InvalidParameter {
                name: "eps",
                reason: format!("step size must be positive, got {}", self.eps),
            });
        }
        if self.num_iterations == 0 {
            return Err(Error::InvalidParameter {
                name: "num_iterations",
                reason: "must be at least 1".into(),
            });
        }
        check_dim(self.spec().dim(), self.initial_weights.len())?;
        self.policy.validate()?;
        spectral_constants(self.spec(), self.eps)?;
        Ok(())
    }
}

/// Result of one server iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_weights: WeightVector,
    pub decisions: Vec<PolicyDecision>,
    pub gradients: Vec<Vec<f64>>,
}

/// Server update from recorded per-agent gradients and decisions.
pub fn apply_update(w: &WeightVector, eps: f64, gradients: &[Vec<f64>], decisions: &[PolicyDecision]) -> WeightVector {
    let senders: Vec<&Vec<f64>> = gradients
        .iter()
        .zip(decisions)
        .filter(|(_, d)| d.transmit)
        .map(|(g, _)| g)
        .collect();
    if senders.is_empty() {
        return w.clone();
    }
    let mut mean = vec![0.0; w.len()];
    for g in &senders {
        for (m, v) in mean.iter_mut().zip(g.iter()) {
            *m += v;
        }
    }
    let inv = 1.0 / senders.len() as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    w.stepped(eps, &mean)
}

/// One iteration given one batch and one policy RNG per agent.
pub fn step<R: rand::RngCore>(
    spec: &ProblemSpec,
    policy: &PolicyKind,
    eps: f64,
    mode: GradientMode,
    w: &WeightVector,
    batches: &[DataBatch],
    rngs: &mut [R],
) -> Result<StepOutcome> {
    check_dim(batches.len(), rngs.len())?;
    let mut gradients = Vec::with_capacity(batches.len());
    let mut decisions = Vec::with_capacity(batches.len());
    for (batch, rng) in batches.iter().zip(rngs.iter_mut()) {
        let g = match mode {
            GradientMode::Stochastic => stochastic_gradient(batch, w)?,
            GradientMode::Exact => true_gradient(spec, w)?,
        };
        let inputs = PolicyInputs {
            spec: Some(spec),
            batch: Some(batch),
            weights: w,
            gradient: Some(&g),
            eps,
        };
        decisions.push(decide(policy, &inputs, rng)?);
        gradients.push(g);
    }
    let next_weights = apply_update(w, eps, &gradients, &decisions);
    Ok(StepOutcome {
        next_weights,
        decisions,
        gradients,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u64,
    /// `w_k`, the broadcast weights.
    pub weights: Vec<f64>,
    /// `J(w_k)`.
    pub objective: f64,
    pub gradients: Vec<Vec<f64>>,
    pub decisions: Vec<PolicyDecision>,
    /// Per-agent transmissions up to and including this iteration.
    pub cum_per_agent: Vec<u64>,
    /// Iterations up to and including this one in which any agent sent.
    pub cum_any: u64,
}

impl IterationRecord {
    pub fn transmissions(&self) -> u64 {
        self.decisions.iter().filter(|d| d.transmit).count() as u64
    }

    pub fn any_transmit(&self) -> bool {
        self.decisions.iter().any(|d| d.transmit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    /// The objective left the finite range or exceeded [`DIVERGENCE_LIMIT`]
    /// after the update at `iteration`.
    Diverged {
        iteration: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub seed: u64,
    pub num_agents: usize,
    pub dim: usize,
    pub policy: PolicyKind,
    pub records: Vec<IterationRecord>,
    /// `w_K`.
    pub final_weights: Vec<f64>,
    /// `J(w_K)`.
    pub final_objective: f64,
    pub status: RunStatus,
}

impl RunTrace {
    pub fn is_diverged(&self) -> bool {
        matches!(self.status, RunStatus::Diverged { .. })
    }

    pub fn per_agent_counts(&self) -> Vec<u64> {
        self.records
            .last()
            .map(|r| r.cum_per_agent.clone())
            .unwrap_or_else(|| vec![0; self.num_agents])
    }

    /// `Σ_k Σ_i α_k^i`.
    pub fn total_transmissions(&self) -> u64 {
        self.per_agent_counts().iter().sum()
    }

    /// `Σ_k max_i α_k^i`.
    pub fn any_transmissions(&self) -> u64 {
        self.records.last().map_or(0, |r| r.cum_any)
    }

    /// `J(w_0), …, J(w_K)`.
    pub fn objective_path(&self) -> Vec<f64> {
        self.records
            .iter()
            .map(|r| r.objective)
            .chain(std::iter::once(self.final_objective))
            .collect()
    }
}

/// Executes `cfg.num_iterations` server iterations.
pub fn run(cfg: &RunConfig) -> Result<RunTrace> {
    cfg.validate()?;
    let spec = cfg.spec();
    let m = cfg.num_agents();
    let seed = cfg.seed();
    let mut w = cfg.initial_weights.clone();
    let mut j = objective(spec, &w)?;
    let mut records = Vec::with_capacity(cfg.num_iterations);
    let mut cum_per_agent = vec![0u64; m];
    let mut cum_any = 0u64;
    let mut status = RunStatus::Completed;

    for k in 0..cfg.num_iterations as u64 {
        let batches = (0..m)
            .map(|a| draw_batch(&cfg.stream, a, k))
            .collect::<Result<Vec<_>>>()?;
        let mut rngs: Vec<RngStream> = (0..m as u64)
            .map(|a| RngStream::keyed(seed, a, k, Purpose::Policy))
            .collect();
        let out = step(spec, &cfg.policy, cfg.eps, cfg.gradient_mode, &w, &batches, &mut rngs)?;

        for (c, d) in cum_per_agent.iter_mut().zip(&out.decisions) {
            *c += d.transmit as u64;
        }
        cum_any += out.decisions.iter().any(|d| d.transmit) as u64;
        records.push(IterationRecord {
            iteration: k,
            weights: w.0,
            objective: j,
            gradients: out.gradients,
            decisions: out.decisions,
            cum_per_agent: cum_per_agent.clone(),
            cum_any,
        });

        w = out.next_weights;
        j = objective(spec, &w)?;
        if !j.is_finite() || j > DIVERGENCE_LIMIT {
            status = RunStatus::Diverged { iteration: k };
            break;
        }
    }

    Ok(RunTrace {
        seed,
        num_agents: m,
        dim: spec.dim(),
        policy: cfg.policy,
        records,
        final_weights: w.0,
        final_objective: j,
        status,
    })
}

/// Runs replications `r = 0..replications` with seed `base_seed + r` in
/// parallel and maps each trace through `summarize`. Output order follows
/// the replication index.
pub fn replicate<T, F>(cfg: &RunConfig, base_seed: u64, replications: usize, summarize: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&RunTrace) -> T + Sync,
{
    cfg.validate()?;
    (0..replications as u64)
        .into_par_iter()
        .map(|r| {
            let trace = run(&cfg.with_seed(base_seed.wrapping_add(r)))?;
            Ok(summarize(&trace))
        })
        .collect()
}

/// Re-derives every iterate from the recorded gradients and decisions and
/// checks that it is bit-identical to what was recorded.
pub fn replay_check(trace: &RunTrace, cfg: &RunConfig) -> bool {
    let spec = cfg.spec();
    if trace.num_agents != cfg.num_agents() || trace.dim != spec.dim() || trace.policy != cfg.policy {
        return false;
    }
    let mut w = cfg.initial_weights.clone();
    let mut cum = vec![0u64; trace.num_agents];
    let mut cum_any = 0u64;
    for (k, rec) in trace.records.iter().enumerate() {
        if rec.iteration != k as u64
            || rec.weights != w.0
            || rec.gradients.len() != trace.num_agents
            || rec.decisions.len() != trace.num_agents
            || rec.gradients.iter().any(|g| g.len() != trace.dim)
            || objective(spec, &w).ok() != Some(rec.objective)
            || !rec.decisions.iter().all(|d| decision_consistent(&cfg.policy, d))
        {
            return false;
        }
        for (c, d) in cum.iter_mut().zip(&rec.decisions) {
            *c += d.transmit as u64;
        }
        cum_any += rec.any_transmit() as u64;
        if rec.cum_per_agent != cum || rec.cum_any != cum_any {
            return false;
        }
        w = apply_update(&w, cfg.eps, &rec.gradients, &rec.decisions);
    }
    w.0 == trace.final_weights && objective(spec, &w).ok() == Some(trace.final_objective)
}

/// Lines of `trace.log`. Each line is one JSON object tagged by `kind`:
/// a `header`, then one `iteration` per step, then a `final` line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogLine {
    Header {
        format: String,
        seed: u64,
        num_agents: usize,
        dim: usize,
        policy: PolicyKind,
    },
    Iteration(IterationRecord),
    Final {
        weights: Vec<f64>,
        objective: f64,
        status: RunStatus,
    },
}

pub const TRACE_FORMAT: &str = "fedgain-sim v1";

pub fn write_trace_log<W: Write>(mut out: W, trace: &RunTrace) -> Result<()> {
    let header = LogLine::Header {
        format: TRACE_FORMAT.into(),
        seed: trace.seed,
        num_agents: trace.num_agents,
        dim: trace.dim,
        policy: trace.policy,
    };
    serde_json::to_writer(&mut out, &header)?;
    writeln!(out)?;
    for rec in &trace.records {
        serde_json::to_writer(&mut out, &LogLine::Iteration(rec.clone()))?;
        writeln!(out)?;
    }
    let tail = LogLine::Final {
        weights: trace.final_weights.clone(),
        objective: trace.final_objective,
        status: trace.status,
    };
    serde_json::to_writer(&mut out, &tail)?;
    writeln!(out)?;
    Ok(())
}

pub fn read_trace_log<R: BufRead>(input: R) -> Result<RunTrace> {
    let mut lines = input.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Malformed("empty trace log".into()))??;
    let LogLine::Header {
        format,
        seed,
        num_agents,
        dim,
        policy,
    } = serde_json::from_str(&first)?
    else {
        return Err(Error::Malformed("trace log must start with a header".into()));
    };
    if format != TRACE_FORMAT {
        return Err(Error::Malformed(format!("unsupported trace format `{format}`")));
    }
    let mut records = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line)? {
            LogLine::Iteration(rec) => records.push(rec),
            LogLine::Final {
                weights,
                objective,
                status,
            } => {
                return Ok(RunTrace {
                    seed,
                    num_agents,
                    dim,
                    policy,
                    records,
                    final_weights: weights,
                    final_objective: objective,
                    status,
                })
            }
            LogLine::Header { .. } => return Err(Error::Malformed("duplicate header in trace log".into())),
        }
    }
    Err(Error::Malformed("trace log has no final line".into()))
}

/// Per-iteration summary CSV: one row per iteration `k`.
pub fn write_run_summary_csv<W: Write>(mut out: W, trace: &RunTrace, optimal_objective: f64) -> Result<()> {
    writeln!(out, "{CSV_VERSION_LINE}")?;
    writeln!(
        out,
        "iteration,objective,next_objective,excess_objective,transmissions,any_transmit,cum_transmissions,cum_any"
    )?;
    let path = trace.objective_path();
    for (k, rec) in trace.records.iter().enumerate() {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            rec.iteration,
            rec.objective,
            path[k + 1],
            rec.objective - optimal_objective,
            rec.transmissions(),
            rec.any_transmit() as u8,
            rec.cum_per_agent.iter().sum::<u64>(),
            rec.cum_any
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper_cfg(policy: PolicyKind) -> RunConfig {
        let spec = ProblemSpec::diagonal(vec![3.0, 5.0], &[3.0, 1.0], 1.0).unwrap();
        let stream = StreamConfig::new(spec, 5, 2, 7).unwrap();
        RunConfig::new(stream, policy, 0.1, 10, WeightVector::zeros(2)).unwrap()
    }

    fn decision(transmit: bool) -> PolicyDecision {
        PolicyDecision {
            transmit,
            score: 0.0,
            threshold: 0.0,
        }
    }

    #[test]
    fn update_rule_cases() {
        let w = WeightVector(vec![1.0, 1.0]);
        let g = vec![vec![2.0, 0.0], vec![0.0, 2.0]];
        let both = apply_update(&w, 0.1, &g, &[decision(true), decision(true)]);
        assert!((both.0[0] - 0.9).abs() < 1e-15 && (both.0[1] - 0.9).abs() < 1e-15);
        let first = apply_update(&w, 0.1, &g, &[decision(true), decision(false)]);
        assert_eq!(first.0, vec![1.0 - 0.1 * 2.0, 1.0]);
        let second = apply_update(&w, 0.1, &g, &[decision(false), decision(true)]);
        assert_eq!(second.0, vec![1.0, 1.0 - 0.1 * 2.0]);
        assert_eq!(apply_update(&w, 0.1, &g, &[decision(false), decision(false)]), w);
    }

    #[test]
    fn update_rule_matches_four_cases_on_traces() {
        for policy in [
            PolicyKind::EstimatedGain { lambda: 0.5 },
            PolicyKind::OracleGain { lambda: 0.5 },
            PolicyKind::Random { p: 0.5 },
        ] {
            let cfg = paper_cfg(policy);
            let trace = run(&cfg).unwrap();
            let path: Vec<Vec<f64>> = trace
                .records
                .iter()
                .map(|r| r.weights.clone())
                .chain(std::iter::once(trace.final_weights.clone()))
                .collect();
            for (k, rec) in trace.records.iter().enumerate() {
                let (g1, g2) = (&rec.gradients[0], &rec.gradients[1]);
                let w = &rec.weights;
                let expected: Vec<f64> = match (rec.decisions[0].transmit, rec.decisions[1].transmit) {
                    (true, false) => w.iter().zip(g1).map(|(a, b)| a - 0.1 * b).collect(),
                    (false, true) => w.iter().zip(g2).map(|(a, b)| a - 0.1 * b).collect(),
                    (true, true) => (0..2).map(|i| w[i] - 0.1 / 2.0 * (g1[i] + g2[i])).collect(),
                    (false, false) => w.clone(),
                };
                for (a, b) in expected.iter().zip(&path[k + 1]) {
                    assert!((a - b).abs() <= 1e-14 * a.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn never_policy_freezes_weights() {
        let cfg = paper_cfg(PolicyKind::Never);
        let trace = run(&cfg).unwrap();
        assert!(trace.objective_path().iter().all(|&j| j == 26.5));
        assert!(trace.records.iter().all(|r| r.weights == vec![0.0, 0.0]));
        assert_eq!(trace.total_transmissions(), 0);
    }

    #[test]
    fn single_agent_always_is_plain_sgd() {
        let spec = ProblemSpec::diagonal(vec![3.0, 5.0], &[3.0, 1.0], 1.0).unwrap();
        let stream = StreamConfig::new(spec, 5, 1, 3).unwrap();
        let cfg = RunConfig::new(stream.clone(), PolicyKind::Always, 0.1, 5, WeightVector::zeros(2)).unwrap();
        let trace = run(&cfg).unwrap();
        let mut w = vec![0.0, 0.0];
        for k in 0..5 {
            let b = draw_batch(&stream, 0, k).unwrap();
            let g = stochastic_gradient(&b, &w).unwrap();
            w = w.iter().zip(&g).map(|(a, b)| a - 0.1 * b).collect();
        }
        assert_eq!(trace.final_weights, w);
    }

    #[test]
    fn cumulative_counts() {
        let trace = run(&paper_cfg(PolicyKind::Always)).unwrap();
        assert_eq!(trace.per_agent_counts(), vec![10, 10]);
        assert_eq!(trace.total_transmissions(), 20);
        assert_eq!(trace.any_transmissions(), 10);
    }

    #[test]
    fn objective_recorded_at_every_iterate() {
        let cfg = paper_cfg(PolicyKind::EstimatedGain { lambda: 0.1 });
        let trace = run(&cfg).unwrap();
        for r in &trace.records {
            assert_eq!(r.objective, objective(cfg.spec(), &r.weights).unwrap());
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = paper_cfg(PolicyKind::Random { p: 0.4 });
        assert_eq!(run(&cfg).unwrap(), run(&cfg).unwrap());
    }

    #[test]
    fn replay_detects_tampering() {
        let cfg = paper_cfg(PolicyKind::EstimatedGain { lambda: 0.1 });
        let trace = run(&cfg).unwrap();
        assert!(replay_check(&trace, &cfg));

        let mut tampered = trace.clone();
        let d = &mut tampered.records[3].decisions[1];
        d.transmit = !d.transmit;
        assert!(!replay_check(&tampered, &cfg));

        let mut tampered = trace.clone();
        tampered.records[2].gradients[0][1] += 1e-12;
        assert!(!replay_check(&tampered, &cfg));

        let mut tampered = trace;
        tampered.final_objective += 1.0;
        assert!(!replay_check(&tampered, &cfg));
    }

    #[test]
    fn trace_log_round_trip() {
        let cfg = paper_cfg(PolicyKind::OracleGain { lambda: 0.2 });
        let trace = run(&cfg).unwrap();
        let mut buf = Vec::new();
        write_trace_log(&mut buf, &trace).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), trace.records.len() + 2);
        assert!(text.lines().next().unwrap().starts_with(r#"{"kind":"header""#));
        let back = read_trace_log(buf.as_slice()).unwrap();
        assert_eq!(back, trace);
        assert!(replay_check(&back, &cfg));
    }

    #[test]
    fn trace_log_rejects_truncation() {
        let trace = run(&paper_cfg(PolicyKind::Always)).unwrap();
        let mut buf = Vec::new();
        write_trace_log(&mut buf, &trace).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let truncated: String = text.lines().take(3).map(|l| format!("{l}\n")).collect();
        assert!(read_trace_log(truncated.as_bytes()).is_err());
        assert!(read_trace_log("".as_bytes()).is_err());
    }

    #[test]
    fn divergent_step_size_stops_run() {
        let spec = ProblemSpec::diagonal(vec![3.0, 5.0], &[3.0, 1.0], 1.0).unwrap();
        let stream = StreamConfig::new(spec, 5, 2, 7).unwrap();
        let cfg = RunConfig::new(stream, PolicyKind::Always, 1.5, 500, WeightVector::zeros(2))
            .unwrap()
            .with_gradient_mode(GradientMode::Exact);
        let trace = run(&cfg).unwrap();
        assert!(trace.is_diverged());
        assert!(trace.records.len() < 500);
        assert!(trace.final_objective > DIVERGENCE_LIMIT);
    }

    #[test]
    fn config_validation() {
        let spec = ProblemSpec::diagonal(vec![3.0, 5.0], &[3.0, 1.0], 1.0).unwrap();
        let stream = StreamConfig::new(spec, 5, 2, 7).unwrap();
        let w0 = WeightVector::zeros(2);
        assert!(RunConfig::new(stream.clone(), PolicyKind::Always, 0.0, 10, w0.clone()).is_err());
        assert!(RunConfig::new(stream.clone(), PolicyKind::Always, -0.1, 10, w0.clone()).is_err());
        assert!(RunConfig::new(stream.clone(), PolicyKind::Always, 0.1, 0, w0.clone()).is_err());
        assert!(RunConfig::new(stream.clone(), PolicyKind::Always, 0.1, 10, WeightVector::zeros(3)).is_err());
        // non-contractive step sizes only warn
        assert!(RunConfig::new(stream, PolicyKind::Always, 0.9, 10, w0).is_ok());
    }

    #[test]
    fn replicate_preserves_order() {
        let cfg = paper_cfg(PolicyKind::EstimatedGain { lambda: 0.1 });
        let seeds = replicate(&cfg, 100, 16, |t| t.seed).unwrap();
        assert_eq!(seeds, (100..116).collect::<Vec<_>>());
    }
}
