//! Retraction-free, communication-compressed distributed stochastic
//! optimization on (block-wise) Stiefel manifolds.
//!
//! The crate is organized around a small set of building blocks:
//!
//! * [`manifold`] — dense-matrix geometry of `St(p,n)`: penalty and
//!   relative (Riemannian) gradients, landing directions, safe-region
//!   membership, safe step sizes and merit-function machinery.
//! * [`compress`] — contractive compression operators (identity, top-k,
//!   rand-k, stochastic quantization) with exact byte-cost accounting.
//! * [`engine`] — the landing state machines with per-node momentum and
//!   error feedback, plus the step-size/momentum schedules.
//! * [`block`] — the block-wise generalization: several independently
//!   constrained matrix blocks plus a free vector block.
//! * [`baselines`] — QR-retraction descent, the Euclidean penalty method
//!   and single-node unconstrained compressed descent.
//! * [`problems`] — benchmark problems (distributed online PCA, linear
//!   toys, block toys) and noisy gradient oracles.
//! * [`diagnostics`] — per-iteration metrics: loss gap, constraint
//!   violation, gradient norms, error terms and subspace distances.

// Validation uses `!(x > 0.0)` on purpose: the negation also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod block;
pub mod compress;
pub mod dataset;
pub mod diagnostics;
pub mod engine;
pub mod error;
pub mod manifold;
pub mod problems;
pub mod rng;

pub use error::{Error, Result};

/// Dense real matrix in column-major storage; the optimization variable
/// `X ∈ R^{n×p}` and every gradient estimate of the same shape.
pub type MatrixVar = nalgebra::DMatrix<f64>;

/// Dense real vector; the free (unconstrained) block of a composite point.
pub type VectorVar = nalgebra::DVector<f64>;
