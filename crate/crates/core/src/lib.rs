//! Communication-efficient distributed linear regression.
//!
//! Agents hold i.i.d. data, compute a stochastic gradient each iteration and
//! decide locally whether sending it to the server is worth the uplink. This
//! crate provides the regression closed forms, seeded data streams, the
//! transmit policies, the iteration engine, Monte-Carlo checks of the
//! convergence and communication bounds, and the sweep drivers used by the
//! `fedgain` command-line tool.

pub mod data;
pub mod error;
pub mod experiment;
pub mod policy;
pub mod regression;
pub mod sim;
pub mod stats;
pub mod theory;

pub use data::{draw_batch, empirical_second_moment, RngStream, StreamConfig};
pub use error::{Error, Result};
pub use policy::{decide, estimated_gain, exact_gain, PolicyDecision, PolicyInputs, PolicyKind};
pub use regression::{
    contraction_check, objective, spectral_constants, stochastic_gradient, true_gradient, DataBatch, ProblemSpec,
    SpectralConstants, WeightVector,
};
pub use sim::{replay_check, run, step, GradientMode, RunConfig, RunStatus, RunTrace};
pub use theory::{GEstimate, TheoremReport};

/// First line of every CSV this crate writes.
pub const CSV_VERSION_LINE: &str = "# fedgain-sim v1";
