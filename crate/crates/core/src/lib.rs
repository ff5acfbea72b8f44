//! Two-stage dynamic-treatment-regime (DTR) bandits with linear reward and
//! transition models.
//!
//! The crate provides, in rough dependency order:
//!
//! - [`linalg`]: incremental least-squares accumulation, normal-equation
//!   solves, minimum-eigenvalue computation, and an IRLS logistic fitter.
//! - [`schedule`]: deterministic forced-sampling schedules (two-arm and
//!   K-arm variants) with O(1) membership queries.
//! - [`env`]: a synthetic two-stage linear environment with oracle
//!   Q-functions and per-step regret evaluation.
//! - [`estimators`]: per-arm forced-sample and all-sample OLS banks and the
//!   four Q-estimators they induce.
//! - [`olsbandit`]: the one-stage linear bandit used by the Static and
//!   Recourse baselines.
//! - [`policies`]: all decision-making agents behind one [`policies::Policy`]
//!   interface.
//! - [`replay`]: off-policy evaluation of any policy on logged two-stage
//!   data, including propensity fitting and the reciprocal-floor
//!   duplication bootstrap.
//! - [`harness`]: experiment orchestration (simulation, parameter sweeps,
//!   replay evaluation) with file-based configuration and CSV outputs.

pub mod env;
pub mod estimators;
pub mod harness;
pub mod linalg;
pub mod olsbandit;
pub mod policies;
pub mod replay;
pub mod schedule;
