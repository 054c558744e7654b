//! Principal component analysis for pre-reducing the latent space.

use crate::grammar::LatentBox;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::OptimizerError;

/// Eigenvalues below this fraction of the largest count as zero.
const RANK_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// Retained axes, ordered by decreasing explained variance.
    pub axes: Vec<Vec<f64>>,
    /// Explained variance of every axis (all `d`, descending).
    pub explained_variance: Vec<f64>,
    pub target_ratio: f64,
    /// Numerical rank of the sample covariance.
    pub rank: usize,
    /// Set when the target ratio could not be met before running out of rank.
    pub rank_deficient: bool,
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn reduced_dim(&self) -> usize {
        self.axes.len()
    }

    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        let total: f64 = self.explained_variance.iter().sum();
        self.explained_variance.iter().map(|v| v / total).collect()
    }

    pub fn project(&self, z: &[f64]) -> Result<Vec<f64>, OptimizerError> {
        check_dim(self.input_dim(), z.len())?;
        Ok(self
            .axes
            .iter()
            .map(|a| a.iter().zip(z).zip(&self.mean).map(|((a, z), m)| a * (z - m)).sum())
            .collect())
    }

    pub fn lift(&self, v: &[f64]) -> Result<Vec<f64>, OptimizerError> {
        check_dim(self.reduced_dim(), v.len())?;
        let mut z = self.mean.clone();
        for (a, &c) in self.axes.iter().zip(v) {
            for (zi, ai) in z.iter_mut().zip(a) {
                *zi += c * ai;
            }
        }
        Ok(z)
    }

    /// Tightest axis-aligned box in reduced coordinates containing the
    /// projection of `bounds`.
    pub fn project_box(&self, bounds: &LatentBox) -> Result<LatentBox, OptimizerError> {
        check_dim(self.input_dim(), bounds.dim())?;
        let mut lower = Vec::with_capacity(self.reduced_dim());
        let mut upper = Vec::with_capacity(self.reduced_dim());
        for a in &self.axes {
            let (mut lo, mut hi) = (0.0, 0.0);
            for (j, &aj) in a.iter().enumerate() {
                let (l, h) = (aj * (bounds.lower[j] - self.mean[j]), aj * (bounds.upper[j] - self.mean[j]));
                lo += l.min(h);
                hi += l.max(h);
            }
            lower.push(lo);
            upper.push(hi);
        }
        Ok(LatentBox::new(lower, upper))
    }
}

fn check_dim(expected: usize, got: usize) -> Result<(), OptimizerError> {
    if expected == got {
        Ok(())
    } else {
        Err(OptimizerError::DimensionMismatch { expected, got })
    }
}

/// Eigendecomposition of the sample covariance; keeps the smallest number of
/// axes whose cumulative explained-variance ratio reaches `target`.
pub fn pca_fit(points: &[Vec<f64>], target: f64) -> Result<PcaModel, OptimizerError> {
    if points.len() < 2 {
        return Err(OptimizerError::TooFewPoints(points.len()));
    }
    if !(target > 0.0 && target <= 1.0) {
        return Err(OptimizerError::InvalidConfig(format!("PCA target ratio must be in (0, 1], got {target}")));
    }
    let d = points[0].len();
    for p in points {
        check_dim(d, p.len())?;
    }
    let n = points.len();
    let data = DMatrix::from_fn(n, d, |i, j| points[i][j]);
    let mean: DVector<f64> = data.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| data[(i, j)] - mean[j]);
    let cov = (centered.transpose() * &centered) / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let variance: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k].max(0.0)).collect();
    let top = variance.first().copied().unwrap_or(0.0);
    let rank = variance.iter().filter(|&&v| v > RANK_TOLERANCE * top).count();
    if rank == 0 {
        return Err(OptimizerError::DegenerateData);
    }

    let total: f64 = variance.iter().sum();
    let mut cumulative = 0.0;
    let mut r = rank;
    for (k, v) in variance.iter().enumerate().take(rank) {
        cumulative += v / total;
        if cumulative >= target {
            r = k + 1;
            break;
        }
    }
    let rank_deficient = cumulative < target;
    if rank_deficient {
        log::warn!("PCA: target ratio {target} not reached; reduced dimension capped at rank {rank}");
    }

    let axes = order[..r]
        .iter()
        .map(|&k| {
            let col = eig.eigenvectors.column(k);
            // Sign convention: largest-magnitude component positive.
            let pivot = col.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
            let s = if pivot < 0.0 { -1.0 } else { 1.0 };
            col.iter().map(|x| s * x).collect()
        })
        .collect();

    Ok(PcaModel {
        mean: mean.iter().copied().collect(),
        axes,
        explained_variance: variance,
        target_ratio: target,
        rank,
        rank_deficient,
    })
}
