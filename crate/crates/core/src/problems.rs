//! Benchmark problems and gradient oracles.
//!
//! The central benchmark is distributed online PCA: node `i` holds a data
//! matrix `A_i ∈ R^{l_i×n}` and the global objective is the sample-averaged
//! projection energy
//!
//! ```text
//! f(X) = −(1/(2·l_total)) Σ_i ‖A_i X‖²_F,
//! ```
//!
//! minimized over `X ∈ St(p,n)`. Each node's term is weighted so that
//! `f = (1/N) Σ_i f_i` holds exactly for any partition of the same rows,
//! with `∇f_i(X) = −(N/l_total)·A_iᵀ(A_i X)`. The optimum is the span of the
//! top-p right singular vectors of the stacked data matrix.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::block::{BlockLayout, BlockPoint};
use crate::error::{Error, Result};
use crate::manifold;
use crate::rng::{normal_vector, stream, StreamDomain};
use crate::{MatrixVar, VectorVar};

/// A distributed objective over matrix variables with exact per-node
/// gradients. Stochastic oracles override [`MatrixProblem::sample_gradient`].
pub trait MatrixProblem: Sync {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    fn num_nodes(&self) -> usize;

    /// Exact per-node gradient `∇f_i(X)`.
    fn node_gradient(&self, node: usize, x: &MatrixVar) -> MatrixVar;

    /// One stochastic oracle draw; exact by default.
    fn sample_gradient(&self, node: usize, x: &MatrixVar, rng: &mut ChaCha8Rng) -> MatrixVar {
        let _ = rng;
        self.node_gradient(node, x)
    }

    /// Global objective value `f(X)`.
    fn value(&self, x: &MatrixVar) -> f64;

    fn optimum_value(&self) -> Option<f64> {
        None
    }

    fn optimum_point(&self) -> Option<&MatrixVar> {
        None
    }

    /// Hessian of the global objective applied to a direction, when the
    /// problem can provide it exactly (quadratics can).
    fn hess_prod(&self, x: &MatrixVar, v: &MatrixVar) -> Option<MatrixVar> {
        let _ = (x, v);
        None
    }

    /// Gradient of a uniformly sampled row subset, rescaled to be unbiased.
    fn minibatch_gradient(
        &self,
        node: usize,
        x: &MatrixVar,
        batch: usize,
        rng: &mut ChaCha8Rng,
    ) -> Option<MatrixVar> {
        let _ = (node, x, batch, rng);
        None
    }

    /// Oracle noise level (Frobenius standard deviation); 0 for exact oracles.
    fn noise_sigma(&self) -> f64 {
        0.0
    }

    /// Mean of the node gradients, summed in ascending node order and then
    /// divided by N. This exact op order is shared with the master-side
    /// aggregation so reductions agree bit for bit.
    fn global_gradient(&self, x: &MatrixVar) -> MatrixVar {
        let mut g = self.node_gradient(0, x);
        for i in 1..self.num_nodes() {
            g += self.node_gradient(i, x);
        }
        g.unscale(self.num_nodes() as f64)
    }

    /// `f(X) − f*` when the optimum is known, otherwise `f(X)`.
    fn loss_gap(&self, x: &MatrixVar) -> f64 {
        match self.optimum_value() {
            Some(f_star) => self.value(x) - f_star,
            None => self.value(x),
        }
    }
}

/// Distributed online PCA on synthetic data.
#[derive(Debug, Clone)]
pub struct PcaProblem {
    node_data: Vec<DMatrix<f64>>,
    n: usize,
    p: usize,
    l_total: usize,
    x_star: MatrixVar,
    f_star: f64,
    seed: u64,
}

impl PcaProblem {
    /// Generates the synthetic dataset: a Haar-distributed basis
    /// `U ∈ St(p,n)` and `l·N` rows drawn i.i.d. from
    /// `N(0, UUᵀ + σ_data·I_n)` (each row is `U z + √σ_data·w`), split
    /// evenly across nodes.
    pub fn generate(
        n: usize,
        l_per_node: usize,
        p: usize,
        sigma_data: f64,
        nodes: usize,
        seed: u64,
    ) -> Result<Self> {
        if p == 0 || p > n {
            return Err(Error::InvalidParam(format!(
                "need 1 ≤ p ≤ n, got p={p}, n={n}"
            )));
        }
        if l_per_node == 0 || nodes == 0 {
            return Err(Error::InvalidParam(
                "need at least one row per node and one node".into(),
            ));
        }
        if sigma_data < 0.0 {
            return Err(Error::InvalidParam(format!(
                "sigma_data must be nonnegative, got {sigma_data}"
            )));
        }
        let mut basis_rng = stream(seed, StreamDomain::Data, 0, 0);
        let u = manifold::random_orthonormal(n, p, &mut basis_rng);
        let l_total = l_per_node * nodes;
        let mut row_rng = stream(seed, StreamDomain::Data, 0, 1);
        let noise_scale = sigma_data.sqrt();
        let mut a = DMatrix::zeros(l_total, n);
        for r in 0..l_total {
            let z = normal_vector(p, &mut row_rng);
            let w = normal_vector(n, &mut row_rng);
            let row = &u * z + w * noise_scale;
            for c in 0..n {
                a[(r, c)] = row[c];
            }
        }
        Self::from_stacked(a, p, nodes, seed)
    }

    /// Builds the problem from an existing stacked data matrix (used when
    /// replaying a saved dataset). Rows are partitioned as
    /// `[i·l, (i+1)·l)` with `l = ⌊l_total/N⌋`; the remainder goes to the
    /// last node.
    pub fn from_stacked(a: DMatrix<f64>, p: usize, nodes: usize, seed: u64) -> Result<Self> {
        let l_total = a.nrows();
        let n = a.ncols();
        if p == 0 || p > n {
            return Err(Error::InvalidParam(format!(
                "need 1 ≤ p ≤ n, got p={p}, n={n}"
            )));
        }
        if nodes == 0 || l_total < nodes {
            return Err(Error::InvalidParam(format!(
                "cannot split {l_total} rows across {nodes} nodes"
            )));
        }
        let per = l_total / nodes;
        let mut node_data = Vec::with_capacity(nodes);
        for i in 0..nodes {
            let start = i * per;
            let end = if i + 1 == nodes { l_total } else { start + per };
            node_data.push(a.rows(start, end - start).into_owned());
        }
        let svd = a.clone().svd(false, true);
        let v_t = svd.v_t.expect("requested right singular vectors");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
        let mut x_star = DMatrix::zeros(n, p);
        for (col, &si) in order.iter().take(p).enumerate() {
            for r in 0..n {
                x_star[(r, col)] = v_t[(si, r)];
            }
        }
        let mut problem = Self {
            node_data,
            n,
            p,
            l_total,
            x_star,
            f_star: 0.0,
            seed,
        };
        problem.f_star = problem.value(&problem.x_star.clone());
        Ok(problem)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn l_total(&self) -> usize {
        self.l_total
    }

    pub fn node_rows(&self, node: usize) -> usize {
        self.node_data[node].nrows()
    }

    /// Stacks the per-node matrices back into one `l_total×n` matrix.
    pub fn stacked(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.l_total, self.n);
        let mut row = 0;
        for d in &self.node_data {
            for r in 0..d.nrows() {
                for c in 0..self.n {
                    a[(row, c)] = d[(r, c)];
                }
                row += 1;
            }
        }
        a
    }

    pub fn x_star(&self) -> &MatrixVar {
        &self.x_star
    }

    fn node_weight(&self) -> f64 {
        self.node_data.len() as f64 / self.l_total as f64
    }

    /// Upper bound on per-node gradient norms over the safe region:
    /// `max_i (N/l_total)·‖A_i‖₂² · √(1+ε) · √p`.
    pub fn grad_bound_estimate(&self, epsilon: f64) -> f64 {
        let w = self.node_weight();
        let mut worst = 0.0f64;
        for d in &self.node_data {
            worst = worst.max(w * spectral_norm_sq(d));
        }
        worst * (1.0 + epsilon).sqrt() * (self.p as f64).sqrt()
    }

    /// Smoothness constants `(L, L̃)`: the global operator norm
    /// `‖AᵀA‖₂/l_total` and the quadratic mean of the per-node constants
    /// `L_i = (N/l_total)·‖A_i‖₂²`.
    pub fn smoothness_estimates(&self) -> (f64, f64) {
        let w = self.node_weight();
        let l_is: Vec<f64> = self
            .node_data
            .iter()
            .map(|d| w * spectral_norm_sq(d))
            .collect();
        let l_tilde = (l_is.iter().map(|l| l * l).sum::<f64>() / l_is.len() as f64).sqrt();
        // λ_max of (1/l_total)·Σ A_iᵀA_i by power iteration.
        let mut v = normal_vector(self.n, &mut stream(self.seed, StreamDomain::Probe, 0, 42));
        v /= v.norm();
        let mut lam = 0.0;
        for _ in 0..200 {
            let mut w_vec = VectorVar::zeros(self.n);
            for d in &self.node_data {
                w_vec += d.transpose() * (d * &v);
            }
            w_vec /= self.l_total as f64;
            let new_lam = w_vec.norm();
            if new_lam == 0.0 {
                break;
            }
            v = w_vec / new_lam;
            if (new_lam - lam).abs() <= 1e-13 * new_lam {
                lam = new_lam;
                break;
            }
            lam = new_lam;
        }
        (lam, l_tilde)
    }
}

fn spectral_norm_sq(a: &DMatrix<f64>) -> f64 {
    let sv = a.singular_values();
    let top = sv.iter().fold(0.0f64, |acc, s| acc.max(*s));
    top * top
}

impl MatrixProblem for PcaProblem {
    fn rows(&self) -> usize {
        self.n
    }

    fn cols(&self) -> usize {
        self.p
    }

    fn num_nodes(&self) -> usize {
        self.node_data.len()
    }

    fn node_gradient(&self, node: usize, x: &MatrixVar) -> MatrixVar {
        let a = &self.node_data[node];
        let t = a * x;
        (a.transpose() * t) * (-self.node_weight())
    }

    fn value(&self, x: &MatrixVar) -> f64 {
        // One scalar accumulator over rows in global order: partitions of
        // the same rows produce bit-identical values.
        let mut s = 0.0;
        for a in &self.node_data {
            for r in 0..a.nrows() {
                for c in 0..x.ncols() {
                    let mut dot = 0.0;
                    for k in 0..a.ncols() {
                        dot += a[(r, k)] * x[(k, c)];
                    }
                    s += dot * dot;
                }
            }
        }
        -0.5 * s / self.l_total as f64
    }

    fn optimum_value(&self) -> Option<f64> {
        Some(self.f_star)
    }

    fn optimum_point(&self) -> Option<&MatrixVar> {
        Some(&self.x_star)
    }

    fn hess_prod(&self, _x: &MatrixVar, v: &MatrixVar) -> Option<MatrixVar> {
        let mut acc = DMatrix::zeros(self.n, self.p);
        for a in &self.node_data {
            acc += a.transpose() * (a * v);
        }
        Some(acc * (-1.0 / self.l_total as f64))
    }

    fn minibatch_gradient(
        &self,
        node: usize,
        x: &MatrixVar,
        batch: usize,
        rng: &mut ChaCha8Rng,
    ) -> Option<MatrixVar> {
        let a = &self.node_data[node];
        let rows = a.nrows();
        if batch == 0 {
            return None;
        }
        let mut sub = DMatrix::zeros(batch, self.n);
        for b in 0..batch {
            let r = rng.random_range(0..rows);
            for c in 0..self.n {
                sub[(b, c)] = a[(r, c)];
            }
        }
        let t = &sub * x;
        let scale = -self.node_weight() * (rows as f64 / batch as f64);
        Some((sub.transpose() * t) * scale)
    }
}

/// A linear objective `f(X) = ⟨C, X⟩`, identical on every node. Its
/// constant gradient makes it the canonical stagnation example for greedy
/// compression without error feedback.
#[derive(Debug, Clone)]
pub struct LinearProblem {
    c: MatrixVar,
    nodes: usize,
    f_star: f64,
}

impl LinearProblem {
    pub fn new(c: MatrixVar, nodes: usize) -> Self {
        // min ⟨C, X⟩ over St(p,n) is minus the nuclear norm of C.
        let f_star = -c.singular_values().iter().sum::<f64>();
        Self { c, nodes, f_star }
    }

    /// The two-dimensional stagnation toy: `f(X) = −(2,1)·X` on the unit
    /// circle, where top-1 compression of the constant gradient is
    /// orthogonal to the tangent space at `X = (1,0)ᵀ`.
    pub fn stagnation_toy(nodes: usize) -> Self {
        Self::new(MatrixVar::from_column_slice(2, 1, &[-2.0, -1.0]), nodes)
    }
}

impl MatrixProblem for LinearProblem {
    fn rows(&self) -> usize {
        self.c.nrows()
    }

    fn cols(&self) -> usize {
        self.c.ncols()
    }

    fn num_nodes(&self) -> usize {
        self.nodes
    }

    fn node_gradient(&self, _node: usize, _x: &MatrixVar) -> MatrixVar {
        self.c.clone()
    }

    fn value(&self, x: &MatrixVar) -> f64 {
        self.c.dot(x)
    }

    fn optimum_value(&self) -> Option<f64> {
        Some(self.f_star)
    }

    fn hess_prod(&self, _x: &MatrixVar, _v: &MatrixVar) -> Option<MatrixVar> {
        Some(MatrixVar::zeros(self.c.nrows(), self.c.ncols()))
    }
}

/// Oracle noise models satisfying unbiasedness and bounded variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    /// Exact gradient plus `(σ/√(np))·Z` with `Z` standard normal,
    /// entry-truncated at six standard deviations so gradient norms stay
    /// uniformly bounded (the truncation bias is below 1e−8 and ignored).
    AdditiveGaussian,
    /// Unbiased gradient of a uniformly resampled row subset.
    Minibatch { batch_size: usize },
}

/// Wraps an exact problem with a stochastic gradient oracle.
#[derive(Debug, Clone)]
pub struct NoisyOracle<P> {
    pub base: P,
    pub sigma: f64,
    pub kind: NoiseKind,
}

impl<P: MatrixProblem> NoisyOracle<P> {
    pub fn new(base: P, sigma: f64, kind: NoiseKind) -> Self {
        Self { base, sigma, kind }
    }
}

impl<P: MatrixProblem> MatrixProblem for NoisyOracle<P> {
    fn rows(&self) -> usize {
        self.base.rows()
    }

    fn cols(&self) -> usize {
        self.base.cols()
    }

    fn num_nodes(&self) -> usize {
        self.base.num_nodes()
    }

    fn node_gradient(&self, node: usize, x: &MatrixVar) -> MatrixVar {
        self.base.node_gradient(node, x)
    }

    fn sample_gradient(&self, node: usize, x: &MatrixVar, rng: &mut ChaCha8Rng) -> MatrixVar {
        match self.kind {
            NoiseKind::AdditiveGaussian => {
                let mut g = self.base.node_gradient(node, x);
                let d = (g.nrows() * g.ncols()) as f64;
                let scale = self.sigma / d.sqrt();
                for e in g.iter_mut() {
                    let z: f64 = StandardNormal.sample(rng);
                    *e += scale * z.clamp(-6.0, 6.0);
                }
                g
            }
            NoiseKind::Minibatch { batch_size } => self
                .base
                .minibatch_gradient(node, x, batch_size, rng)
                .expect("base problem does not support minibatch sampling"),
        }
    }

    fn value(&self, x: &MatrixVar) -> f64 {
        self.base.value(x)
    }

    fn optimum_value(&self) -> Option<f64> {
        self.base.optimum_value()
    }

    fn optimum_point(&self) -> Option<&MatrixVar> {
        self.base.optimum_point()
    }

    fn hess_prod(&self, x: &MatrixVar, v: &MatrixVar) -> Option<MatrixVar> {
        self.base.hess_prod(x, v)
    }

    fn noise_sigma(&self) -> f64 {
        self.sigma
    }
}

/// A distributed objective over composite block points.
pub trait BlockProblem: Sync {
    fn layout(&self) -> &BlockLayout;
    fn num_nodes(&self) -> usize;
    fn node_gradient(&self, node: usize, point: &BlockPoint) -> BlockPoint;

    fn sample_gradient(&self, node: usize, point: &BlockPoint, rng: &mut ChaCha8Rng) -> BlockPoint {
        let _ = rng;
        self.node_gradient(node, point)
    }

    fn value(&self, point: &BlockPoint) -> f64;

    fn optimum_value(&self) -> Option<f64> {
        None
    }

    fn global_gradient(&self, point: &BlockPoint) -> BlockPoint {
        let mut g = self.node_gradient(0, point);
        for i in 1..self.num_nodes() {
            g = g.add(&self.node_gradient(i, point));
        }
        g.unscale(self.num_nodes() as f64)
    }

    fn loss_gap(&self, point: &BlockPoint) -> f64 {
        match self.optimum_value() {
            Some(f_star) => self.value(point) - f_star,
            None => self.value(point),
        }
    }
}

/// Block toy: J independent quadratic blocks `f_j(X_j) = −½⟨X_j, S_j X_j⟩`
/// with known PSD matrices `S_j`, plus a free quadratic `½‖x − x_target‖²`.
#[derive(Debug, Clone)]
pub struct BlockToyProblem {
    s: Vec<DMatrix<f64>>,
    block_optima: Vec<MatrixVar>,
    x_target: VectorVar,
    layout: BlockLayout,
    nodes: usize,
    f_star: f64,
}

impl BlockToyProblem {
    /// `S_j = B_jᵀB_j/n_j` from seeded Gaussians (PSD with O(1) spectrum);
    /// per-block optima come from a dense eigendecomposition.
    pub fn generate(
        block_dims: &[(usize, usize)],
        free_dim: usize,
        nodes: usize,
        seed: u64,
    ) -> Result<Self> {
        if nodes == 0 {
            return Err(Error::InvalidParam("need at least one node".into()));
        }
        let layout = BlockLayout::new(block_dims.to_vec(), free_dim)?;
        let mut rng = stream(seed, StreamDomain::Data, 0, 0);
        let mut s = Vec::with_capacity(block_dims.len());
        let mut block_optima = Vec::with_capacity(block_dims.len());
        let mut f_star = 0.0;
        for &(n_j, p_j) in block_dims {
            let b = crate::rng::normal_matrix(n_j, n_j, &mut rng);
            let s_j = (b.transpose() * &b) / n_j as f64;
            let eig = s_j.clone().symmetric_eigen();
            let mut order: Vec<usize> = (0..n_j).collect();
            order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
            let mut basis = DMatrix::zeros(n_j, p_j);
            for (col, &ei) in order.iter().take(p_j).enumerate() {
                for r in 0..n_j {
                    basis[(r, col)] = eig.eigenvectors[(r, ei)];
                }
                f_star -= 0.5 * eig.eigenvalues[order[col]];
            }
            block_optima.push(basis);
            s.push(s_j);
        }
        let x_target = normal_vector(free_dim, &mut rng);
        Ok(Self {
            s,
            block_optima,
            x_target,
            layout,
            nodes,
            f_star,
        })
    }

    pub fn block_optimum(&self, j: usize) -> &MatrixVar {
        &self.block_optima[j]
    }

    pub fn x_target(&self) -> &VectorVar {
        &self.x_target
    }
}

impl BlockProblem for BlockToyProblem {
    fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    fn num_nodes(&self) -> usize {
        self.nodes
    }

    fn node_gradient(&self, _node: usize, point: &BlockPoint) -> BlockPoint {
        let blocks = self
            .s
            .iter()
            .zip(&point.blocks)
            .map(|(s_j, x_j)| (s_j * x_j) * -1.0)
            .collect();
        BlockPoint::new(blocks, &point.free - &self.x_target)
    }

    fn value(&self, point: &BlockPoint) -> f64 {
        let mut v = 0.0;
        for (s_j, x_j) in self.s.iter().zip(&point.blocks) {
            v -= 0.5 * x_j.dot(&(s_j * x_j));
        }
        let d = &point.free - &self.x_target;
        v + 0.5 * d.norm_squared()
    }

    fn optimum_value(&self) -> Option<f64> {
        Some(self.f_star)
    }
}

/// Exposes a matrix problem as a one-block composite problem with no free
/// variables; the degenerate case of the block-wise engine.
#[derive(Debug, Clone)]
pub struct SingleBlockAdapter<P> {
    pub inner: P,
    layout: BlockLayout,
}

impl<P: MatrixProblem> SingleBlockAdapter<P> {
    pub fn new(inner: P) -> Self {
        let layout = BlockLayout::new(vec![(inner.rows(), inner.cols())], 0)
            .expect("matrix problems are tall by construction");
        Self { inner, layout }
    }
}

impl<P: MatrixProblem> BlockProblem for SingleBlockAdapter<P> {
    fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    fn num_nodes(&self) -> usize {
        self.inner.num_nodes()
    }

    fn node_gradient(&self, node: usize, point: &BlockPoint) -> BlockPoint {
        BlockPoint::new(
            vec![self.inner.node_gradient(node, &point.blocks[0])],
            VectorVar::zeros(0),
        )
    }

    fn sample_gradient(&self, node: usize, point: &BlockPoint, rng: &mut ChaCha8Rng) -> BlockPoint {
        BlockPoint::new(
            vec![self.inner.sample_gradient(node, &point.blocks[0], rng)],
            VectorVar::zeros(0),
        )
    }

    fn value(&self, point: &BlockPoint) -> f64 {
        self.inner.value(&point.blocks[0])
    }

    fn optimum_value(&self) -> Option<f64> {
        self.inner.optimum_value()
    }
}

/// Numerical estimate of the merit function's smoothness constant: the
/// largest ratio `‖∇m(X)−∇m(Y)‖_F/‖X−Y‖_F` over sampled safe-region pairs
/// (half independent, half local perturbations).
pub fn estimate_merit_smoothness<P: MatrixProblem>(
    problem: &P,
    mu: f64,
    epsilon: f64,
    pairs: usize,
    seed: u64,
) -> Option<f64> {
    let n = problem.rows();
    let p = problem.cols();
    let grad_m = |x: &MatrixVar| -> Option<MatrixVar> {
        let g = problem.global_gradient(x);
        let hess_pen = problem.hess_prod(x, &manifold::penalty_gradient(x))?;
        Some(manifold::merit_gradient(x, &g, &hess_pen, mu))
    };
    let mut rng = stream(seed, StreamDomain::Probe, 1, 0);
    let mut worst = 0.0f64;
    for t in 0..pairs {
        let x = manifold::random_safe_point(n, p, epsilon, &mut rng);
        let y = if t % 2 == 0 {
            manifold::random_safe_point(n, p, epsilon, &mut rng)
        } else {
            clamp_to_safe(&(&x + crate::rng::normal_matrix(n, p, &mut rng) * 1e-3), epsilon)
        };
        let diff = (&x - &y).norm();
        if diff < 1e-12 {
            continue;
        }
        let gx = grad_m(&x)?;
        let gy = grad_m(&y)?;
        worst = worst.max((gx - gy).norm() / diff);
    }
    Some(worst)
}

/// Projects a matrix into the safe region by clamping its singular values
/// into `[√(1−ε), √(1+ε)]`.
fn clamp_to_safe(x: &MatrixVar, epsilon: f64) -> MatrixVar {
    let svd = x.clone().svd(true, true);
    let u = svd.u.as_ref().expect("requested U");
    let v_t = svd.v_t.as_ref().expect("requested Vᵀ");
    let lo = (1.0 - epsilon).sqrt();
    let hi = (1.0 + epsilon).sqrt();
    let mut scaled = u.clone();
    for j in 0..svd.singular_values.len() {
        let s = svd.singular_values[j].clamp(lo, hi);
        for i in 0..scaled.nrows() {
            scaled[(i, j)] *= s;
        }
    }
    scaled * v_t
}
