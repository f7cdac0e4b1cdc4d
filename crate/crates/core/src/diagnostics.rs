//! Per-iteration metrics: loss gap, constraint violation, squared relative
//! gradient norm, compression/momentum error terms, Lyapunov value and the
//! canonical-correlation subspace distance.

use crate::error::{Error, Result};
use crate::manifold;
use crate::MatrixVar;

/// One row of a run's metrics stream. Byte counts are cumulative uplink
/// cost under the compressor's wire format; wall time is informational and
/// excluded from reproducibility guarantees.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub iter: usize,
    pub loss_gap: f64,
    pub constraint_violation: f64,
    pub rgrad_norm_sq: f64,
    pub bytes_up_cum: u64,
    pub wall_ms: f64,
    pub lyapunov: Option<f64>,
    pub err_g: Option<f64>,
    pub err_p_tilde: Option<f64>,
    pub err_p: Option<f64>,
    pub cc_dist: Option<f64>,
}

/// Feasibility penalty `N(X)` of the current iterate.
pub fn constraint_violation(x: &MatrixVar) -> f64 {
    manifold::penalty_value(x)
}

/// Squared Frobenius norm of the relative gradient at `X` for the exact
/// gradient `∇f(X)`.
pub fn rgrad_norm_sq(x: &MatrixVar, exact_grad: &MatrixVar) -> Result<f64> {
    Ok(manifold::relative_gradient(x, exact_grad)?.norm_squared())
}

/// Compression and momentum error terms:
/// `G̃ = (1/N)Σ‖g_i−v_i‖²`, `P̃ = (1/N)Σ‖v_i−∇f_i(X)‖²`,
/// `P = ‖v̄−∇f(X)‖²` with `v̄` and `∇f` the node means.
pub fn error_terms(
    node_v: &[MatrixVar],
    node_g: &[MatrixVar],
    exact_grads: &[MatrixVar],
) -> (f64, f64, f64) {
    let n = node_v.len() as f64;
    let mut g_tilde = 0.0;
    let mut p_tilde = 0.0;
    for ((v, g), exact) in node_v.iter().zip(node_g).zip(exact_grads) {
        g_tilde += (g - v).norm_squared();
        p_tilde += (v - exact).norm_squared();
    }
    let mut v_bar = node_v[0].clone();
    let mut grad_bar = exact_grads[0].clone();
    for (v, e) in node_v.iter().zip(exact_grads).skip(1) {
        v_bar += v;
        grad_bar += e;
    }
    let p = (v_bar.unscale(n) - grad_bar.unscale(n)).norm_squared();
    (g_tilde / n, p_tilde / n, p)
}

/// Lyapunov value
/// `m(X)−m* + (c₁γ/θ)G̃ + (2c₁γηβ/θ)P̃ + (c₂γ/η)P`
/// from a pre-computed merit gap and error terms.
#[allow(clippy::too_many_arguments)]
pub fn lyapunov_value(
    merit_gap: f64,
    g_tilde: f64,
    p_tilde: f64,
    p: f64,
    gamma: f64,
    eta: f64,
    theta: f64,
    beta: f64,
    c1: f64,
    c2: f64,
) -> Result<f64> {
    if eta == 0.0 {
        return Err(Error::InvalidParam("eta must be nonzero".into()));
    }
    if theta <= 0.0 {
        return Err(Error::InvalidParam("theta must be positive".into()));
    }
    Ok(merit_gap
        + c1 * gamma / theta * g_tilde
        + 2.0 * c1 * gamma * eta * beta / theta * p_tilde
        + c2 * gamma / eta * p)
}

/// Chordal subspace distance from canonical correlations:
/// `√(p − Σσ_j²)` with `σ_j` the singular values of `Q_XᵀQ_*`, where `Q` are
/// thin-QR orthonormalizations. Zero iff the two column spans coincide.
pub fn canonical_correlation_distance(x: &MatrixVar, x_star: &MatrixVar) -> Result<f64> {
    if x.shape() != x_star.shape() {
        return Err(Error::shape(
            format!("{}x{}", x_star.nrows(), x_star.ncols()),
            format!("{}x{}", x.nrows(), x.ncols()),
        ));
    }
    let qx = manifold::qf(x)?;
    let qs = manifold::qf(x_star)?;
    let m = qx.transpose() * qs;
    let p = x.ncols() as f64;
    let sum_sq: f64 = m.singular_values().iter().map(|s| s * s).sum();
    Ok((p - sum_sq).max(0.0).sqrt())
}
