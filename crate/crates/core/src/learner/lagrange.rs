//! Projected dual ascent on the Lagrange multiplier.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LagrangeState {
    /// Current multiplier, kept `>= 0`.
    pub lambda: f64,
    /// Constraint threshold on the mean per-step safety cost.
    pub c_bar: f64,
    /// Dual step size.
    pub eta: f64,
    /// Optional upper cap applied after the projection.
    pub lambda_max: Option<f64>,
}

impl LagrangeState {
    pub fn new(lambda: f64, c_bar: f64, eta: f64) -> Self {
        Self { lambda: lambda.max(0.0), c_bar, eta, lambda_max: None }
    }
}

/// `lambda <- max(0, lambda + eta (observed - c_bar))`, then capped if configured.
pub fn dual_update(state: LagrangeState, observed_cost: f64) -> LagrangeState {
    let mut lambda = (state.lambda + state.eta * (observed_cost - state.c_bar)).max(0.0);
    if let Some(cap) = state.lambda_max {
        lambda = lambda.min(cap);
    }
    LagrangeState { lambda, ..state }
}
