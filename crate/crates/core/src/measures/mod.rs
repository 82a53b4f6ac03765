//! Empirical measures and exact Wasserstein distances between them.
//!
//! All clouds carry equal weights. Distances between equal-size clouds are
//! exact: sorted order statistics in one dimension, an optimal permutation
//! from the assignment solver otherwise.

pub mod assignment;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use assignment::Assignment;

/// Largest cloud accepted by [`w2_assignment`] and [`w1_assignment`].
pub const MAX_ASSIGNMENT_SIZE: usize = 2000;

#[derive(Debug, Error, PartialEq)]
pub enum MeasureError {
    #[error("empirical measure needs at least one point")]
    Empty,
    #[error("point buffer of length {len} is not a multiple of dimension {dim}")]
    Ragged { len: usize, dim: usize },
    #[error("non-finite coordinate at point {point}")]
    NonFinite { point: usize },
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("size mismatch: {left} vs {right}")]
    SizeMismatch { left: usize, right: usize },
    #[error("cloud of {size} points exceeds the exact transport limit {limit}")]
    TooLarge { size: usize, limit: usize },
}

/// Equal-weight point cloud in `R^d`, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMeasure {
    dim: usize,
    points: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn new(dim: usize, points: Vec<f64>) -> Result<Self, MeasureError> {
        if dim == 0 || points.is_empty() {
            return Err(MeasureError::Empty);
        }
        if !points.len().is_multiple_of(dim) {
            return Err(MeasureError::Ragged {
                len: points.len(),
                dim,
            });
        }
        if let Some(k) = points.iter().position(|x| !x.is_finite()) {
            return Err(MeasureError::NonFinite { point: k / dim });
        }
        Ok(Self { dim, points })
    }

    pub fn from_scalars(values: &[f64]) -> Result<Self, MeasureError> {
        Self::new(1, values.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, k: usize) -> &[f64] {
        &self.points[k * self.dim..(k + 1) * self.dim]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'_, f64> {
        self.points.chunks_exact(self.dim)
    }

    /// Coordinate-wise mean, summed in index order.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for p in self.iter() {
            for (acc, x) in m.iter_mut().zip(p) {
                *acc += x;
            }
        }
        let n = self.len() as f64;
        m.iter_mut().for_each(|x| *x /= n);
        m
    }

    /// `∫|x|^2 mu(dx)`.
    pub fn second_moment(&self) -> f64 {
        self.points.iter().map(|x| x * x).sum::<f64>() / self.len() as f64
    }

    pub fn translated(&self, shift: &[f64]) -> Self {
        let mut points = self.points.clone();
        for p in points.chunks_exact_mut(self.dim) {
            for (x, s) in p.iter_mut().zip(shift) {
                *x += s;
            }
        }
        Self {
            dim: self.dim,
            points,
        }
    }

    /// Sub-cloud made of the listed points.
    pub fn select(&self, indices: &[usize]) -> Self {
        let points = indices
            .iter()
            .flat_map(|&k| self.point(k).iter().copied())
            .collect();
        Self {
            dim: self.dim,
            points,
        }
    }
}

fn check_pair(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<usize, MeasureError> {
    if a.dim != b.dim {
        return Err(MeasureError::DimensionMismatch {
            left: a.dim,
            right: b.dim,
        });
    }
    if a.len() != b.len() {
        return Err(MeasureError::SizeMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(a.len())
}

fn squared_distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Exact `W_2` between equal-size one-dimensional clouds.
pub fn w2_1d(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<f64, MeasureError> {
    let n = check_pair(a, b)?;
    if a.dim != 1 {
        return Err(MeasureError::DimensionMismatch {
            left: a.dim,
            right: 1,
        });
    }
    let (x, y) = (sorted(&a.points), sorted(&b.points));
    let cost: f64 = x.iter().zip(&y).map(|(p, q)| (p - q) * (p - q)).sum();
    Ok((cost / n as f64).sqrt())
}

/// Exact `W_2^2` between one-dimensional clouds of any sizes, through the
/// monotone (quantile) coupling.
pub fn w2_squared_1d_quantile(
    a: &EmpiricalMeasure,
    b: &EmpiricalMeasure,
) -> Result<f64, MeasureError> {
    for m in [a, b] {
        if m.dim != 1 {
            return Err(MeasureError::DimensionMismatch {
                left: m.dim,
                right: 1,
            });
        }
    }
    let (x, y) = (sorted(&a.points), sorted(&b.points));
    // Atoms of `a` carry `y.len()` units of mass and atoms of `b` carry
    // `x.len()` units, so the merge runs in exact integer arithmetic.
    let (unit_a, unit_b) = (y.len() as u64, x.len() as u64);
    let (mut i, mut j) = (0usize, 0usize);
    let (mut left_a, mut left_b) = (unit_a, unit_b);
    let mut cost = 0.0;
    while i < x.len() && j < y.len() {
        let mass = left_a.min(left_b);
        cost += mass as f64 * (x[i] - y[j]) * (x[i] - y[j]);
        left_a -= mass;
        left_b -= mass;
        if left_a == 0 {
            i += 1;
            left_a = unit_a;
        }
        if left_b == 0 {
            j += 1;
            left_b = unit_b;
        }
    }
    let cost = cost / (unit_a as f64 * unit_b as f64);
    Ok(cost)
}

/// Optimal permutation for the cost `|x - y|^p`, `p` in `{1, 2}`.
pub fn optimal_matching(
    a: &EmpiricalMeasure,
    b: &EmpiricalMeasure,
    squared: bool,
    limit: usize,
) -> Result<Assignment, MeasureError> {
    let n = check_pair(a, b)?;
    if n > limit {
        return Err(MeasureError::TooLarge { size: n, limit });
    }
    let mut cost = vec![0.0; n * n];
    for (i, row) in cost.chunks_exact_mut(n).enumerate() {
        let x = a.point(i);
        for (j, c) in row.iter_mut().enumerate() {
            let d2 = squared_distance(x, b.point(j));
            *c = if squared { d2 } else { d2.sqrt() };
        }
    }
    Ok(assignment::solve(n, &cost))
}

/// `W_2^2` via the assignment solver with an explicit size limit.
pub fn w2_squared_assignment_with_limit(
    a: &EmpiricalMeasure,
    b: &EmpiricalMeasure,
    limit: usize,
) -> Result<f64, MeasureError> {
    let m = optimal_matching(a, b, true, limit)?;
    Ok((m.total_cost / a.len() as f64).max(0.0))
}

/// Exact `W_2` between equal-size clouds in any dimension.
pub fn w2_assignment(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<f64, MeasureError> {
    Ok(w2_squared_assignment_with_limit(a, b, MAX_ASSIGNMENT_SIZE)?.sqrt())
}

/// Exact `W_1` between equal-size clouds in any dimension.
pub fn w1_assignment(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<f64, MeasureError> {
    let m = optimal_matching(a, b, false, MAX_ASSIGNMENT_SIZE)?;
    Ok((m.total_cost / a.len() as f64).max(0.0))
}

/// `(1/n) sum_k |a_k - b_k|^2`: the transport cost of the index-wise
/// coupling, an upper bound on `W_2^2`.
pub fn coupling_upper_bound(
    a: &EmpiricalMeasure,
    b: &EmpiricalMeasure,
) -> Result<f64, MeasureError> {
    let n = check_pair(a, b)?;
    let total: f64 = a.iter().zip(b.iter()).map(|(x, y)| squared_distance(x, y)).sum();
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(v: &[f64]) -> EmpiricalMeasure {
        EmpiricalMeasure::from_scalars(v).unwrap()
    }

    #[test]
    fn construction_errors() {
        assert_eq!(EmpiricalMeasure::new(1, vec![]), Err(MeasureError::Empty));
        assert!(matches!(
            EmpiricalMeasure::new(2, vec![1.0, 2.0, 3.0]),
            Err(MeasureError::Ragged { .. })
        ));
        assert_eq!(
            EmpiricalMeasure::new(1, vec![0.0, f64::NAN]),
            Err(MeasureError::NonFinite { point: 1 })
        );
    }

    #[test]
    fn w2_1d_examples() {
        assert_eq!(w2_1d(&cloud(&[0.0, 2.0]), &cloud(&[0.0, 2.0])).unwrap(), 0.0);
        assert!((w2_1d(&cloud(&[0.0, 2.0]), &cloud(&[3.0, 1.0])).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(w2_1d(&cloud(&[0.0]), &cloud(&[-2.5])).unwrap(), 2.5);
    }

    #[test]
    fn w2_1d_errors() {
        let two = EmpiricalMeasure::new(2, vec![0.0, 1.0]).unwrap();
        assert!(matches!(
            w2_1d(&two, &two),
            Err(MeasureError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            w2_1d(&cloud(&[0.0]), &cloud(&[0.0, 1.0])),
            Err(MeasureError::SizeMismatch { .. })
        ));
    }

    #[test]
    fn coupling_bound_strict_witness() {
        let a = cloud(&[0.0, 2.0]);
        let b = cloud(&[3.0, 1.0]);
        assert_eq!(coupling_upper_bound(&a, &b).unwrap(), 5.0);
        let w = w2_assignment(&a, &b).unwrap();
        assert!((w * w - 1.0).abs() < 1e-12);
    }

    #[test]
    fn too_large_rejected() {
        let a = cloud(&vec![0.0; MAX_ASSIGNMENT_SIZE + 1]);
        assert_eq!(
            w2_assignment(&a, &a),
            Err(MeasureError::TooLarge {
                size: MAX_ASSIGNMENT_SIZE + 1,
                limit: MAX_ASSIGNMENT_SIZE
            })
        );
    }

    #[test]
    fn translation_gives_shift_norm() {
        let a = EmpiricalMeasure::new(2, vec![0.0, 0.0, 1.0, 3.0, -2.0, 0.5]).unwrap();
        let b = a.translated(&[3.0, 4.0]);
        assert!((w2_assignment(&a, &b).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn quantile_matches_equal_size_and_replication() {
        let a = cloud(&[0.3, -1.0, 2.0]);
        let b = cloud(&[1.0, 0.0, 0.5]);
        let w = w2_1d(&a, &b).unwrap();
        assert!((w2_squared_1d_quantile(&a, &b).unwrap() - w * w).abs() < 1e-14);
        // Replicating every atom of b twice leaves the measure unchanged.
        let b2 = cloud(&[1.0, 1.0, 0.0, 0.0, 0.5, 0.5]);
        assert!((w2_squared_1d_quantile(&a, &b2).unwrap() - w * w).abs() < 1e-14);
        // Against a single atom: the second moment about it.
        let c = cloud(&[1.0]);
        let expected = (0.49 + 4.0 + 1.0) / 3.0;
        assert!((w2_squared_1d_quantile(&a, &c).unwrap() - expected).abs() < 1e-14);
    }
}
