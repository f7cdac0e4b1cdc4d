//! Composite points for block-wise constrained problems: J matrix blocks,
//! each confined to its own Stiefel manifold, plus one free vector block.
//!
//! The inner product, norm, compression layout and clipping all act on the
//! composite: `⟨X, Y⟩ = Σ_j ⟨X_j, Y_j⟩ + ⟨x, y⟩`. A point with a single
//! block and no free part behaves bit-for-bit like the plain matrix case.

use crate::error::{Error, Result};
use crate::manifold;
use crate::{MatrixVar, VectorVar};

/// Shape signature of a composite point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    /// `(rows, cols)` of each constrained block; each block tall or square.
    pub blocks: Vec<(usize, usize)>,
    /// Length of the free (unconstrained) vector block.
    pub free_dim: usize,
}

impl BlockLayout {
    pub fn new(blocks: Vec<(usize, usize)>, free_dim: usize) -> Result<Self> {
        if blocks.is_empty() && free_dim == 0 {
            return Err(Error::InvalidParam("empty block layout".into()));
        }
        for &(n, p) in &blocks {
            if p == 0 || n == 0 || p > n {
                return Err(Error::InvalidParam(format!(
                    "block must be tall or square, got {n}x{p}"
                )));
            }
        }
        Ok(Self { blocks, free_dim })
    }

    /// Total number of flat entries.
    pub fn total_len(&self) -> usize {
        self.blocks.iter().map(|(n, p)| n * p).sum::<usize>() + self.free_dim
    }
}

/// A composite point (or gradient estimate of the same shape).
#[derive(Debug, Clone, PartialEq)]
pub struct BlockPoint {
    pub blocks: Vec<MatrixVar>,
    pub free: VectorVar,
}

impl BlockPoint {
    pub fn new(blocks: Vec<MatrixVar>, free: VectorVar) -> Self {
        Self { blocks, free }
    }

    pub fn layout(&self) -> BlockLayout {
        BlockLayout {
            blocks: self.blocks.iter().map(|b| b.shape()).collect(),
            free_dim: self.free.len(),
        }
    }

    pub fn zeros(layout: &BlockLayout) -> Self {
        Self {
            blocks: layout
                .blocks
                .iter()
                .map(|&(n, p)| MatrixVar::zeros(n, p))
                .collect(),
            free: VectorVar::zeros(layout.free_dim),
        }
    }

    pub fn norm_squared(&self) -> f64 {
        let mut acc = 0.0;
        for b in &self.blocks {
            acc += b.norm_squared();
        }
        acc + self.free.norm_squared()
    }

    pub fn norm(&self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn dot(&self, other: &BlockPoint) -> f64 {
        let mut acc = 0.0;
        for (a, b) in self.blocks.iter().zip(&other.blocks) {
            acc += a.dot(b);
        }
        acc + self.free.dot(&other.free)
    }

    pub fn is_finite(&self) -> bool {
        self.blocks
            .iter()
            .all(|b| b.iter().all(|e| e.is_finite()))
            && self.free.iter().all(|e| e.is_finite())
    }

    /// Column-major flattening of every block followed by the free vector.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.layout().total_len());
        for b in &self.blocks {
            out.extend_from_slice(b.as_slice());
        }
        out.extend_from_slice(self.free.as_slice());
        out
    }

    pub fn from_flat(layout: &BlockLayout, flat: &[f64]) -> Result<Self> {
        if flat.len() != layout.total_len() {
            return Err(Error::shape(
                format!("{} flat entries", layout.total_len()),
                format!("{}", flat.len()),
            ));
        }
        let mut blocks = Vec::with_capacity(layout.blocks.len());
        let mut offset = 0;
        for &(n, p) in &layout.blocks {
            blocks.push(MatrixVar::from_column_slice(n, p, &flat[offset..offset + n * p]));
            offset += n * p;
        }
        let free = VectorVar::from_column_slice(&flat[offset..]);
        Ok(Self { blocks, free })
    }

    /// `(1−η)·self + η·other`, the momentum update, applied block-wise with
    /// the same elementary operations as the matrix engine.
    pub fn lerp(&self, other: &BlockPoint, eta: f64) -> BlockPoint {
        BlockPoint {
            blocks: self
                .blocks
                .iter()
                .zip(&other.blocks)
                .map(|(a, b)| a * (1.0 - eta) + b * eta)
                .collect(),
            free: &self.free * (1.0 - eta) + &other.free * eta,
        }
    }

    pub fn sub(&self, other: &BlockPoint) -> BlockPoint {
        BlockPoint {
            blocks: self
                .blocks
                .iter()
                .zip(&other.blocks)
                .map(|(a, b)| a - b)
                .collect(),
            free: &self.free - &other.free,
        }
    }

    pub fn add(&self, other: &BlockPoint) -> BlockPoint {
        BlockPoint {
            blocks: self
                .blocks
                .iter()
                .zip(&other.blocks)
                .map(|(a, b)| a + b)
                .collect(),
            free: &self.free + &other.free,
        }
    }

    pub fn scale(&self, s: f64) -> BlockPoint {
        BlockPoint {
            blocks: self.blocks.iter().map(|b| b * s).collect(),
            free: &self.free * s,
        }
    }

    /// `self − s·other`, the iterate update.
    pub fn sub_scaled(&self, other: &BlockPoint, s: f64) -> BlockPoint {
        BlockPoint {
            blocks: self
                .blocks
                .iter()
                .zip(&other.blocks)
                .map(|(a, b)| a - b * s)
                .collect(),
            free: &self.free - &other.free * s,
        }
    }

    /// Entry-wise division by a count, pinned op order for aggregation.
    pub fn unscale(&self, s: f64) -> BlockPoint {
        BlockPoint {
            blocks: self.blocks.iter().map(|b| b.unscale(s)).collect(),
            free: self.free.unscale(s),
        }
    }
}

/// Landing direction of the block-wise problem: each constrained block gets
/// `skew(g_j X_jᵀ)X_j + λ X_j(X_jᵀX_j − I)`, the free block passes its
/// gradient estimate through unchanged.
pub fn blockwise_landing_direction(
    point: &BlockPoint,
    grad: &BlockPoint,
    lambda: f64,
) -> Result<BlockPoint> {
    if point.blocks.len() != grad.blocks.len() || point.free.len() != grad.free.len() {
        return Err(Error::shape(
            format!("{} blocks + {}", point.blocks.len(), point.free.len()),
            format!("{} blocks + {}", grad.blocks.len(), grad.free.len()),
        ));
    }
    let mut blocks = Vec::with_capacity(point.blocks.len());
    for (x, g) in point.blocks.iter().zip(&grad.blocks) {
        blocks.push(manifold::landing_direction(x, g, lambda)?);
    }
    Ok(BlockPoint {
        blocks,
        free: grad.free.clone(),
    })
}

/// Norm clipping on the composite norm, `min{1, L'/‖g‖}·g`; mirrors
/// [`manifold::clip_gradient`] exactly in the single-block case.
pub fn blockwise_clip(g: &BlockPoint, l_prime: f64) -> BlockPoint {
    let norm = g.norm();
    if !(norm > l_prime) {
        return g.clone();
    }
    let mut out = g.scale(l_prime / norm);
    for _ in 0..8 {
        let n = out.norm();
        if n <= l_prime {
            break;
        }
        out = out.scale(l_prime / n);
    }
    out
}

/// Per-block feasibility penalties `N_j(X_j)`.
pub fn block_constraint_violations(point: &BlockPoint) -> Vec<f64> {
    point.blocks.iter().map(manifold::penalty_value).collect()
}
