//! Per-agent transmit decisions.
//!
//! The gain of an update `g` applied at `w` is `J(w − εg) − J(w)`; a
//! negative gain is an improvement. Gain-triggered agents transmit when the
//! gain is at most `−λ`.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::regression::{dot, norm_sq, true_gradient, DataBatch, ProblemSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyKind {
    /// Gain computed with the true distribution.
    OracleGain {
        lambda: f64,
    },
    /// Gain estimated from the agent's own batch.
    EstimatedGain {
        lambda: f64,
    },
    /// Transmit when `‖g‖² ≥ μ`.
    GradNorm {
        mu: f64,
    },
    Always,
    Never,
    /// Bernoulli(p) control baseline.
    Random {
        p: f64,
    },
}

impl PolicyKind {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::OracleGain { .. } => "oracle_gain",
            PolicyKind::EstimatedGain { .. } => "estimated_gain",
            PolicyKind::GradNorm { .. } => "grad_norm",
            PolicyKind::Always => "always",
            PolicyKind::Never => "never",
            PolicyKind::Random { .. } => "random",
        }
    }

    /// Name used in reports; marks baselines that are controls only.
    pub fn label(&self) -> String {
        match self {
            PolicyKind::Random { p } => format!("random(p={p}, control)"),
            other => match other.parameter() {
                Some((key, v)) => format!("{}({key}={v})", other.name()),
                None => other.name().to_string(),
            },
        }
    }

    /// Name and value of the policy's scalar parameter, if any.
    pub fn parameter(&self) -> Option<(&'static str, f64)> {
        match *self {
            PolicyKind::OracleGain { lambda } | PolicyKind::EstimatedGain { lambda } => Some(("lambda", lambda)),
            PolicyKind::GradNorm { mu } => Some(("mu", mu)),
            PolicyKind::Random { p } => Some(("p", p)),
            PolicyKind::Always | PolicyKind::Never => None,
        }
    }

    pub fn lambda(&self) -> Option<f64> {
        match *self {
            PolicyKind::OracleGain { lambda } | PolicyKind::EstimatedGain { lambda } => Some(lambda),
            _ => None,
        }
    }

    /// Copy with the scalar parameter replaced.
    pub fn with_parameter(&self, value: f64) -> Self {
        match *self {
            PolicyKind::OracleGain { .. } => PolicyKind::OracleGain { lambda: value },
            PolicyKind::EstimatedGain { .. } => PolicyKind::EstimatedGain { lambda: value },
            PolicyKind::GradNorm { .. } => PolicyKind::GradNorm { mu: value },
            PolicyKind::Random { .. } => PolicyKind::Random { p: value },
            other => other,
        }
    }

    /// Rejects invalid parameters. `λ = 0` is accepted with a warning since
    /// the communication bound degenerates.
    pub fn validate(&self) -> Result<()> {
        match *self {
            PolicyKind::OracleGain { lambda } | PolicyKind::EstimatedGain { lambda } => {
                if !(lambda.is_finite() && lambda >= 0.0) {
                    return Err(Error::InvalidParameter {
                        name: "lambda",
                        reason: format!("must be a nonnegative real, got {lambda}"),
                    });
                }
                if lambda == 0.0 {
                    log::warn!("lambda = 0: every improving update transmits and the communication bound is infinite");
                }
            }
            PolicyKind::GradNorm { mu } => {
                if !(mu.is_finite() && mu >= 0.0) {
                    return Err(Error::InvalidParameter {
                        name: "mu",
                        reason: format!("must be a nonnegative real, got {mu}"),
                    });
                }
            }
            PolicyKind::Random { p } => {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::InvalidParameter {
                        name: "p",
                        reason: format!("must lie in [0, 1], got {p}"),
                    });
                }
            }
            PolicyKind::Always | PolicyKind::Never => {}
        }
        Ok(())
    }
}

/// One agent's decision together with the score that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyDecision {
    pub transmit: bool,
    pub score: f64,
    pub threshold: f64,
}

/// Exact gain `−ε gᵀ∇J(w) + ½ε² gᵀCg`.
pub fn exact_gain(spec: &ProblemSpec, w: &[f64], g: &[f64], eps: f64) -> Result<f64> {
    check_dim(spec.dim(), g.len())?;
    let grad = true_gradient(spec, w)?;
    Ok(-eps * dot(g, &grad) + 0.5 * eps * eps * spec.cov_form(g, g))
}

/// Batch estimate `−ε gᵀ[I − (ε/2)(1/N)Σxᵢxᵢᵀ]g`, using `gᵀ(Σxᵢxᵢᵀ)g = Σ(xᵢᵀg)²`.
pub fn estimated_gain(batch: &DataBatch, g: &[f64], eps: f64) -> Result<f64> {
    check_dim(batch.dim(), g.len())?;
    let curvature = batch.rows().map(|x| dot(x, g).powi(2)).sum::<f64>() / batch.len() as f64;
    Ok(-eps * (norm_sq(g) - 0.5 * eps * curvature))
}

/// Everything a policy may look at. Which fields are required depends on the
/// policy kind.
#[derive(Debug, Clone, Copy)]
pub struct PolicyInputs<'a> {
    pub spec: Option<&'a ProblemSpec>,
    pub batch: Option<&'a DataBatch>,
    pub weights: &'a [f64],
    pub gradient: Option<&'a [f64]>,
    pub eps: f64,
}

pub fn decide<R: RngCore + ?Sized>(
    kind: &PolicyKind,
    inputs: &PolicyInputs<'_>,
    rng: &mut R,
) -> Result<PolicyDecision> {
    let need_g = || {
        inputs.gradient.ok_or(Error::MissingInput {
            policy: kind.name(),
            input: "gradient",
        })
    };
    let decision = match *kind {
        PolicyKind::OracleGain { lambda } => {
            let spec = inputs.spec.ok_or(Error::MissingInput {
                policy: kind.name(),
                input: "spec",
            })?;
            let score = exact_gain(spec, inputs.weights, need_g()?, inputs.eps)?;
            gain_decision(score, lambda)
        }
        PolicyKind::EstimatedGain { lambda } => {
            let batch = inputs.batch.ok_or(Error::MissingInput {
                policy: kind.name(),
                input: "batch",
            })?;
            let score = estimated_gain(batch, need_g()?, inputs.eps)?;
            gain_decision(score, lambda)
        }
        PolicyKind::GradNorm { mu } => {
            let score = norm_sq(need_g()?);
            PolicyDecision {
                transmit: score >= mu,
                score,
                threshold: mu,
            }
        }
        PolicyKind::Always => PolicyDecision {
            transmit: true,
            score: 0.0,
            threshold: 0.0,
        },
        PolicyKind::Never => PolicyDecision {
            transmit: false,
            score: 0.0,
            threshold: 0.0,
        },
        PolicyKind::Random { p } => {
            let u: f64 = rng.random();
            PolicyDecision {
                transmit: u < p,
                score: u,
                threshold: p,
            }
        }
    };
    Ok(decision)
}

fn gain_decision(score: f64, lambda: f64) -> PolicyDecision {
    // equality transmits
    PolicyDecision {
        transmit: score <= -lambda,
        score,
        threshold: -lambda,
    }
}

/// Whether a recorded decision is consistent with its own score and
/// threshold, for policies whose decision is a deterministic function of the
/// score.
pub fn decision_consistent(kind: &PolicyKind, d: &PolicyDecision) -> bool {
    match kind {
        PolicyKind::OracleGain { .. } | PolicyKind::EstimatedGain { .. } => d.transmit == (d.score <= d.threshold),
        PolicyKind::GradNorm { .. } => d.transmit == (d.score >= d.threshold),
        PolicyKind::Random { .. } => d.transmit == (d.score < d.threshold),
        PolicyKind::Always => d.transmit,
        PolicyKind::Never => !d.transmit,
    }
}
