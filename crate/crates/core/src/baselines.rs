//! Comparison algorithms: uncompressed landing descent, QR-retraction
//! Riemannian gradient descent, the Euclidean penalty method, and
//! single-node unconstrained descent on directly compressed gradients.

use std::time::Instant;

use crate::compress::CompressorSpec;
use crate::diagnostics::MetricsRecord;
use crate::engine::{self, RunOptions, RunResult, ScheduleParams};
use crate::error::Result;
use crate::manifold::{penalty_gradient, qf, random_orthonormal, relative_gradient};
use crate::problems::MatrixProblem;
use crate::rng::{normal_vector, stream, StreamDomain};
use crate::{MatrixVar, VectorVar};

/// Which comparison algorithm to run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BaselineKind {
    /// Distributed landing descent without compression: the engine with the
    /// identity compressor, unit momentum and an exact oracle.
    VanillaLanding,
    /// Riemannian gradient descent with a thin-QR retraction.
    QrRetraction,
    /// Euclidean gradient descent on `f + λ_pen·N`.
    Penalty { lambda_pen: f64 },
}

/// One retraction step: `qf(X − γ·skew(∇f Xᵀ)X)`, where `qf` is the Q factor
/// of the thin QR decomposition with positive R diagonal. The output has
/// orthonormal columns to machine precision.
pub fn qr_retraction_step(x: &MatrixVar, grad_f: &MatrixVar, gamma: f64) -> Result<MatrixVar> {
    let rel = relative_gradient(x, grad_f)?;
    qf(&(x - rel * gamma))
}

/// One penalty step: `X − γ(∇f + λ_pen·X(XᵀX−I))`.
pub fn penalty_step(x: &MatrixVar, grad_f: &MatrixVar, lambda_pen: f64, gamma: f64) -> MatrixVar {
    x - (grad_f + penalty_gradient(x) * lambda_pen) * gamma
}

/// Options shared by the baseline runners.
#[derive(Debug, Clone)]
pub struct BaselineOptions {
    pub gamma: f64,
    /// Landing penalty weight (vanilla landing only).
    pub lambda: f64,
    /// Clipping bound (vanilla landing only).
    pub grad_bound: f64,
    pub iters: usize,
    pub seed: u64,
    pub metrics_every: usize,
    pub keep_iterates: bool,
    pub x0: Option<MatrixVar>,
    pub divergence_factor: f64,
}

impl BaselineOptions {
    pub fn new(gamma: f64, lambda: f64, grad_bound: f64, iters: usize, seed: u64) -> Self {
        Self {
            gamma,
            lambda,
            grad_bound,
            iters,
            seed,
            metrics_every: 1,
            keep_iterates: false,
            x0: None,
            divergence_factor: 1e6,
        }
    }
}

/// Runs a baseline with the same metrics stream and uplink accounting as
/// the engine (every node ships its full gradient each round).
pub fn run_baseline<P: MatrixProblem>(
    problem: &P,
    kind: BaselineKind,
    opts: &BaselineOptions,
) -> Result<RunResult> {
    match kind {
        BaselineKind::VanillaLanding => {
            let schedule = ScheduleParams::manual(opts.gamma, 1.0, opts.lambda, 1.0)?;
            let mut run = RunOptions::new(
                CompressorSpec::identity(),
                schedule,
                opts.iters,
                opts.seed,
                opts.grad_bound,
            );
            run.metrics_every = opts.metrics_every;
            run.keep_iterates = opts.keep_iterates;
            run.x0 = opts.x0.clone();
            run.divergence_factor = opts.divergence_factor;
            engine::run_ef_landing(problem, &run)
        }
        BaselineKind::QrRetraction => run_descent_loop(problem, opts, |x, g, gamma| {
            qr_retraction_step(x, g, gamma)
        }),
        BaselineKind::Penalty { lambda_pen } => run_descent_loop(problem, opts, |x, g, gamma| {
            Ok(penalty_step(x, g, lambda_pen, gamma))
        }),
    }
}

fn run_descent_loop<P, F>(problem: &P, opts: &BaselineOptions, step: F) -> Result<RunResult>
where
    P: MatrixProblem,
    F: Fn(&MatrixVar, &MatrixVar, f64) -> Result<MatrixVar>,
{
    let (n, p) = (problem.rows(), problem.cols());
    let full_bytes = 8 * (n * p) as u64 * problem.num_nodes() as u64;
    let start = Instant::now();
    let mut x = match &opts.x0 {
        Some(x0) => x0.clone(),
        None => random_orthonormal(n, p, &mut stream(opts.seed, StreamDomain::Init, 0, 0)),
    };
    let every = opts.metrics_every.max(1);
    let mut bytes = 0u64;
    let mut metrics = Vec::new();
    let mut iterates = opts.keep_iterates.then(Vec::new);
    let collect = |iter: usize, x: &MatrixVar, bytes: u64, wall_ms: f64| -> Result<MetricsRecord> {
        let exact = problem.global_gradient(x);
        Ok(MetricsRecord {
            iter,
            loss_gap: problem.loss_gap(x),
            constraint_violation: crate::manifold::penalty_value(x),
            rgrad_norm_sq: crate::diagnostics::rgrad_norm_sq(x, &exact)?,
            bytes_up_cum: bytes,
            wall_ms,
            lyapunov: None,
            err_g: None,
            err_p_tilde: None,
            err_p: None,
            cc_dist: None,
        })
    };
    let first = collect(0, &x, bytes, start.elapsed().as_secs_f64() * 1e3)?;
    let gap0 = first.loss_gap;
    let threshold = opts.divergence_factor * (1.0 + gap0.abs());
    let mut diverged = !gap0.is_finite();
    metrics.push(first);
    if let Some(tr) = iterates.as_mut() {
        tr.push(x.clone());
    }

    for k in 0..opts.iters {
        if diverged {
            break;
        }
        let g = problem.global_gradient(&x);
        let next = step(&x, &g, opts.gamma)?;
        x = next;
        bytes += full_bytes;
        if !x.iter().all(|e| e.is_finite()) {
            diverged = true;
        }
        if let Some(tr) = iterates.as_mut() {
            tr.push(x.clone());
        }
        if (k + 1).is_multiple_of(every) || k + 1 == opts.iters || diverged {
            let record = collect(k + 1, &x, bytes, start.elapsed().as_secs_f64() * 1e3)?;
            diverged = diverged
                || !record.loss_gap.is_finite()
                || record.loss_gap.abs() > threshold;
            metrics.push(record);
        }
    }
    Ok(RunResult {
        metrics,
        final_x: x,
        diverged,
        iterates,
    })
}

/// One row of an unconstrained compressed-descent trace.
#[derive(Debug, Clone, PartialEq)]
pub struct UnconstrainedRecord {
    pub iter: usize,
    pub value: f64,
    pub grad_norm_sq: f64,
    pub bytes_up_cum: u64,
}

/// Single-node descent on directly compressed gradients,
/// `x ← x − γ·C(∇f(x))`; `records[k]` holds `f` and `‖∇f‖²` at `x^k` for
/// `k = 0..=iters`.
pub fn unconstrained_vanilla_compression<V, G>(
    value_fn: V,
    grad_fn: G,
    x0: VectorVar,
    spec: &CompressorSpec,
    gamma: f64,
    iters: usize,
    seed: u64,
) -> Result<Vec<UnconstrainedRecord>>
where
    V: Fn(&VectorVar) -> f64,
    G: Fn(&VectorVar) -> VectorVar,
{
    let d = x0.len();
    spec.validate(d)?;
    let mut x = x0;
    let mut bytes = 0u64;
    let mut records = Vec::with_capacity(iters + 1);
    for k in 0..iters {
        let g = grad_fn(&x);
        records.push(UnconstrainedRecord {
            iter: k,
            value: value_fn(&x),
            grad_norm_sq: g.norm_squared(),
            bytes_up_cum: bytes,
        });
        let mut rng = stream(seed, StreamDomain::Compress, 0, k as u64);
        let msg = spec.compress(g.as_slice(), &mut rng)?;
        bytes += msg.bytes_on_wire;
        let c = VectorVar::from_column_slice(&msg.logical);
        x = &x - c * gamma;
    }
    let g = grad_fn(&x);
    records.push(UnconstrainedRecord {
        iter: iters,
        value: value_fn(&x),
        grad_norm_sq: g.norm_squared(),
        bytes_up_cum: bytes,
    });
    Ok(records)
}

/// Seeded Gaussian start vector for the unconstrained baseline.
pub fn gaussian_start(d: usize, seed: u64) -> VectorVar {
    normal_vector(d, &mut stream(seed, StreamDomain::Init, 0, 0))
}
