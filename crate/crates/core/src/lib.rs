//! Distributionally robust stochastic MPC with moment-based ambiguity sets.
//!
//! The library covers the full pipeline of comparing a distributionally
//! robust receding-horizon controller against a fully informed one that
//! knows the disturbance distribution:
//!
//! - [`model`]: stochastic LTI plant, horizon-stacked prediction operators
//!   and moment propagation;
//! - [`tightening`]: risk allocation and the deterministic constraint
//!   tightening constants (distribution-free, Gaussian, empirical);
//! - [`qp`]: the surrogate optimal control problem as a dense QP and an
//!   active-set solver with certified KKT residuals;
//! - [`conservatism`]: tightened constraint-set pairs, Pontryagin erosion
//!   and volume estimates of the conservatism gap;
//! - [`regret`]: closed-loop regret, suboptimality gap, the matched
//!   active-set closed form and convergence diagnostics;
//! - [`harness`]: paired simulation under one shared disturbance
//!   realization, Monte-Carlo violation studies and deterministic export.
//!
//! Monte-Carlo inner loops shard work across threads (rayon) when the
//! default `parallel` feature is enabled; sharded streams are keyed by shard
//! index, so parallel and sequential execution produce bit-identical
//! results.

pub mod conservatism;
pub mod error;
pub mod exec;
pub mod harness;
pub mod linalg;
pub mod lp;
pub mod model;
pub mod noise;
pub mod polytope;
pub mod qp;
pub mod regret;
pub mod stats;
pub mod tightening;
pub mod volume;

pub use error::{Error, Result};
