//! Dense-matrix geometry of the Stiefel manifold `St(p,n) = {X : XᵀX = I_p}`.
//!
//! Iterates are not kept exactly feasible. They live in the safe region
//! `St(p,n)^ε = {X : ‖XᵀX − I_p‖₂ ≤ ε}` and are pulled towards the manifold
//! by the gradient of the penalty `N(X) = ¼‖XᵀX − I_p‖²_F`. The descent
//! direction combines the relative (Riemannian) gradient with that pull:
//!
//! ```text
//! Λ(X; g) = skew(g Xᵀ) X + λ X (XᵀX − I_p),
//! ```
//!
//! whose two summands are orthogonal under the Frobenius inner product for
//! every `X` and every gradient estimate `g`. That orthogonality is what
//! makes a small `‖Λ‖` certify both stationarity and feasibility at once.
//!
//! All operations are pure functions of their inputs and safe to call
//! concurrently.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::normal_matrix;
use crate::MatrixVar;

/// Safe-region geometry plus the gradient bound used for clipping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SafeRegionParams {
    /// Safe-region radius, in `(0, 3/4)`.
    pub epsilon: f64,
    /// Penalty weight λ > 0.
    pub lambda: f64,
    /// Uniform bound L' on gradient-estimate Frobenius norms.
    pub grad_bound: f64,
}

impl SafeRegionParams {
    pub fn new(epsilon: f64, lambda: f64, grad_bound: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 0.75) {
            return Err(Error::InvalidParam(format!(
                "epsilon must lie in (0, 3/4), got {epsilon}"
            )));
        }
        if !(lambda > 0.0) {
            return Err(Error::InvalidParam(format!(
                "lambda must be positive, got {lambda}"
            )));
        }
        if !(grad_bound > 0.0) {
            return Err(Error::InvalidParam(format!(
                "grad_bound must be positive, got {grad_bound}"
            )));
        }
        Ok(Self {
            epsilon,
            lambda,
            grad_bound,
        })
    }
}

/// Smoothness constants entering the merit function and the schedules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeritParams {
    /// Merit penalty weight μ; must dominate [`mu_lower_bound`].
    pub mu: f64,
    /// Global smoothness constant L of the objective on the safe region.
    pub smooth_l: f64,
    /// Averaged per-node smoothness constant.
    pub avg_smooth_l: f64,
    /// Smoothness constant of the merit function itself (supplied or
    /// estimated; see `problems::estimate_merit_smoothness`).
    pub merit_smooth_lm: f64,
}

impl MeritParams {
    pub fn new(
        mu: f64,
        smooth_l: f64,
        avg_smooth_l: f64,
        merit_smooth_lm: f64,
        region: &SafeRegionParams,
    ) -> Result<Self> {
        for (name, v) in [
            ("mu", mu),
            ("smooth_l", smooth_l),
            ("avg_smooth_l", avg_smooth_l),
            ("merit_smooth_lm", merit_smooth_lm),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParam(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        let bound = mu_lower_bound(smooth_l, region.grad_bound, region.lambda, region.epsilon)?;
        if mu < bound {
            return Err(Error::InvalidParam(format!(
                "mu = {mu} is below the admissible lower bound {bound}"
            )));
        }
        Ok(Self {
            mu,
            smooth_l,
            avg_smooth_l,
            merit_smooth_lm,
        })
    }

    /// Builds params with μ set exactly to its lower bound.
    pub fn with_mu_at_bound(
        smooth_l: f64,
        avg_smooth_l: f64,
        merit_smooth_lm: f64,
        region: &SafeRegionParams,
    ) -> Result<Self> {
        let mu = mu_lower_bound(smooth_l, region.grad_bound, region.lambda, region.epsilon)?;
        Self::new(mu, smooth_l, avg_smooth_l, merit_smooth_lm, region)
    }
}

fn check_square(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    Ok(())
}

fn check_same_shape(x: &MatrixVar, g: &MatrixVar) -> Result<()> {
    if x.shape() != g.shape() {
        return Err(Error::shape(
            format!("{}x{}", x.nrows(), x.ncols()),
            format!("{}x{}", g.nrows(), g.ncols()),
        ));
    }
    Ok(())
}

/// Symmetric part `(M + Mᵀ)/2`.
pub fn sym(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_square(m)?;
    Ok((m + m.transpose()) * 0.5)
}

/// Skew-symmetric part `(M − Mᵀ)/2`.
pub fn skew(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_square(m)?;
    Ok((m - m.transpose()) * 0.5)
}

/// Gram residual `XᵀX − I_p`.
pub fn gram_residual(x: &MatrixVar) -> DMatrix<f64> {
    let mut s = x.transpose() * x;
    for j in 0..s.ncols() {
        s[(j, j)] -= 1.0;
    }
    s
}

/// Feasibility penalty `N(X) = ¼‖XᵀX − I_p‖²_F`; zero iff X has
/// orthonormal columns.
pub fn penalty_value(x: &MatrixVar) -> f64 {
    0.25 * gram_residual(x).norm_squared()
}

/// Penalty gradient `∇N(X) = X(XᵀX − I_p)`.
pub fn penalty_gradient(x: &MatrixVar) -> MatrixVar {
    x * gram_residual(x)
}

/// Relative gradient `skew(g Xᵀ) X`, evaluated in the `O(np²)` form
/// `½ (g (XᵀX) − X (gᵀX))`.
///
/// When `g = ∇f(X)` and X is feasible this is the Riemannian gradient of f
/// with respect to the canonical metric.
pub fn relative_gradient(x: &MatrixVar, g: &MatrixVar) -> Result<MatrixVar> {
    check_same_shape(x, g)?;
    let xtx = x.transpose() * x;
    let gtx = g.transpose() * x;
    Ok((g * xtx - x * gtx) * 0.5)
}

/// Landing direction `Λ(X; g) = skew(g Xᵀ)X + λ X(XᵀX − I_p)`.
///
/// The two summands are Frobenius-orthogonal for every X and g.
pub fn landing_direction(x: &MatrixVar, g: &MatrixVar, lambda: f64) -> Result<MatrixVar> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidParam(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    Ok(relative_gradient(x, g)? + penalty_gradient(x) * lambda)
}

/// Spectral norm of the Gram residual, `‖XᵀX − I_p‖₂`.
pub fn gram_residual_spectral_norm(x: &MatrixVar) -> f64 {
    gram_residual(x)
        .symmetric_eigenvalues()
        .iter()
        .fold(0.0f64, |acc, e| acc.max(e.abs()))
}

/// Membership in the safe region `St(p,n)^ε` (spectral-norm test).
pub fn in_safe_region(x: &MatrixVar, epsilon: f64) -> bool {
    gram_residual_spectral_norm(x) <= epsilon
}

/// Smallest and largest singular values of X, via an SVD of X itself
/// (more accurate near σ ≈ 1 than going through XᵀX).
pub fn singular_value_bounds(x: &MatrixVar) -> (f64, f64) {
    let sv = x.clone().singular_values();
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for s in sv.iter() {
        lo = lo.min(*s);
        hi = hi.max(*s);
    }
    (lo, hi)
}

/// Uniform safe step size: every step `X − γΛ(X; g)` with `X ∈ St(p,n)^ε`
/// and `‖g‖_F ≤ L'` stays inside `St(p,n)^ε` whenever `γ ≤ γ_s`.
pub fn safe_step_size(params: &SafeRegionParams) -> f64 {
    let eps = params.epsilon;
    let lambda = params.lambda;
    let lp = params.grad_bound;
    let one_plus = 1.0 + eps;
    let t1 = lambda * (1.0 - eps) * eps / (one_plus * one_plus * lp * lp + lambda * lambda * one_plus * eps * eps);
    let t2 = (eps / (2.0 * one_plus * one_plus * lp * lp)).sqrt();
    let t3 = 1.0 / (2.0 * lambda);
    t1.min(t2).min(t3)
}

/// Admissible lower bound for the merit penalty weight μ.
pub fn mu_lower_bound(l: f64, l_prime: f64, lambda: f64, epsilon: f64) -> Result<f64> {
    if epsilon >= 0.75 {
        return Err(Error::InvalidParam(format!(
            "epsilon must be below 3/4, got {epsilon}"
        )));
    }
    let l_hat = l.max(l_prime);
    Ok(2.0 / (3.0 - 4.0 * epsilon)
        * (l * (1.0 - epsilon)
            + 3.0 * (1.0 + epsilon).sqrt() * l_prime
            + 2.0 * l_hat * l_hat * (1.0 + epsilon) / lambda))
}

/// Merit function `m(X) = f(X) − ½⟨sym(Xᵀ∇f(X)), XᵀX − I_p⟩ + μ N(X)`.
///
/// On the manifold both correction terms vanish and `m(X) = f(X)`.
pub fn merit_value(x: &MatrixVar, grad_f_at_x: &MatrixVar, f_at_x: f64, mu: f64) -> f64 {
    let residual = gram_residual(x);
    let h = 0.5
        * sym(&(x.transpose() * grad_f_at_x))
            .expect("XᵀG is always square")
            .dot(&residual);
    f_at_x - h + mu * penalty_value(x)
}

/// Closed-form merit gradient.
///
/// `hess_pen` must be the objective's Hessian applied to the penalty
/// gradient, `H_X[∇N(X)]`; problems with quadratic objectives provide it
/// exactly.
pub fn merit_gradient(
    x: &MatrixVar,
    grad_f_at_x: &MatrixVar,
    hess_pen: &MatrixVar,
    mu: f64,
) -> MatrixVar {
    let residual = gram_residual(x);
    let sym_xg = sym(&(x.transpose() * grad_f_at_x)).expect("XᵀG is always square");
    grad_f_at_x - (hess_pen + grad_f_at_x * &residual) * 0.5 - x * sym_xg
        + (x * residual) * mu
}

/// Norm clipping `min{1, L'/‖g‖_F}·g`; leaves `g` untouched when already
/// within the bound (including `g = 0`), otherwise rescales so the output
/// norm never exceeds `L'`.
pub fn clip_gradient(g: &MatrixVar, l_prime: f64) -> MatrixVar {
    let norm = g.norm();
    if !(norm > l_prime) {
        return g.clone();
    }
    let mut out = g * (l_prime / norm);
    // Rounding can leave the rescaled norm a few ulps above the bound;
    // squeeze until the invariant ‖out‖ ≤ L' holds exactly.
    for _ in 0..8 {
        let n = out.norm();
        if n <= l_prime {
            break;
        }
        out *= l_prime / n;
    }
    out
}

/// Q factor of the thin QR decomposition, sign-fixed so the diagonal of R
/// is positive (which makes it unique).
pub fn qf(m: &MatrixVar) -> Result<MatrixVar> {
    let (rows, cols) = m.shape();
    if rows < cols {
        return Err(Error::shape(
            "tall or square matrix".to_string(),
            format!("{rows}x{cols}"),
        ));
    }
    let scale = m.amax();
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::RankDeficient("qf"));
    }
    let qr = m.clone().qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..cols {
        let d = r[(j, j)];
        if d.abs() <= 1e-12 * scale * (rows.max(cols) as f64) {
            return Err(Error::RankDeficient("qf"));
        }
        if d < 0.0 {
            for i in 0..rows {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    Ok(q)
}

/// Haar-distributed point on `St(p,n)`: sign-fixed Q factor of a Gaussian.
pub fn random_orthonormal(n: usize, p: usize, rng: &mut ChaCha8Rng) -> MatrixVar {
    qf(&normal_matrix(n, p, rng)).expect("Gaussian matrices are a.s. full rank")
}

/// Random point of `St(p,n)^ε`: `U diag(σ) Vᵀ` with Haar factors and
/// squared singular values uniform in `[1−ε, 1+ε]`.
pub fn random_safe_point(n: usize, p: usize, epsilon: f64, rng: &mut ChaCha8Rng) -> MatrixVar {
    let u = random_orthonormal(n, p, rng);
    let v = random_orthonormal(p, p, rng);
    let mut scaled = u;
    for j in 0..p {
        let s2 = 1.0 - epsilon + 2.0 * epsilon * rng.random::<f64>();
        let s = s2.sqrt();
        for i in 0..n {
            scaled[(i, j)] *= s;
        }
    }
    scaled * v.transpose()
}
