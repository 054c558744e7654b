//! Black-box maximizers over a latent box.
//!
//! Both optimizers propose batches of full-dimensional latent points and hand
//! them to an [`Objective`]. The objective may stop the run by returning only
//! a prefix of a batch (or nothing), which lets callers enforce exact
//! evaluation budgets.

pub mod bo;
pub mod ga;
pub mod gp;
pub mod pca;

use crate::grammar::LatentBox;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bo::{propose_batch, run_bo, BoConfig};
pub use ga::{ga_offspring, ga_replace, ga_step, run_ga, GaConfig, GaPopulation};
pub use gp::{ei_from_moments, expected_improvement, gp_fit, GpParams, GpSurrogate, Matern52};
pub use pca::{pca_fit, PcaModel};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimizerError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("need at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("all points are identical")]
    DegenerateData,
    #[error("kernel matrix not positive definite after jitter retries")]
    CholeskyFailure,
    #[error("invalid optimizer configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub value: f64,
    /// Penalty values steer the GA but are kept out of surrogate fits.
    pub penalized: bool,
}

impl Evaluation {
    pub fn scored(value: f64) -> Self {
        Evaluation {
            value,
            penalized: false,
        }
    }
}

pub trait Objective {
    /// Evaluates `batch` in order. Returning fewer results than points ends
    /// the run after the returned prefix.
    fn evaluate(&mut self, batch: &[Vec<f64>]) -> Vec<Evaluation>;

    /// True once no further evaluations will be accepted.
    fn exhausted(&self) -> bool {
        false
    }
}

/// Wraps a plain function with an evaluation budget.
pub struct FnObjective<F> {
    f: F,
    remaining: usize,
}

impl<F: FnMut(&[f64]) -> f64> FnObjective<F> {
    pub fn new(f: F, max_evaluations: usize) -> Self {
        FnObjective {
            f,
            remaining: max_evaluations,
        }
    }
}

impl<F: FnMut(&[f64]) -> f64> Objective for FnObjective<F> {
    fn evaluate(&mut self, batch: &[Vec<f64>]) -> Vec<Evaluation> {
        let n = batch.len().min(self.remaining);
        self.remaining -= n;
        batch[..n].iter().map(|z| Evaluation::scored((self.f)(z))).collect()
    }

    fn exhausted(&self) -> bool {
        self.remaining == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    /// Point in the optimizer's search space (reduced for BO with PCA).
    pub point: Vec<f64>,
    /// Full latent point handed to the objective.
    pub latent: Vec<f64>,
    pub value: f64,
    pub penalized: bool,
    /// Batch (BO) or generation (GA) that produced the point.
    pub round: usize,
}

pub fn best_so_far(history: &[HistoryEntry]) -> Vec<f64> {
    let mut best = f64::NEG_INFINITY;
    history
        .iter()
        .map(|h| {
            best = best.max(h.value);
            best
        })
        .collect()
}

pub(crate) fn sample_uniform<R: Rng>(rng: &mut R, bounds: &LatentBox) -> Vec<f64> {
    bounds
        .lower
        .iter()
        .zip(&bounds.upper)
        .map(|(&lo, &hi)| if hi > lo { rng.random_range(lo..=hi) } else { lo })
        .collect()
}

pub(crate) fn validate_bounds(bounds: &LatentBox) -> Result<(), OptimizerError> {
    if bounds.dim() == 0 {
        return Err(OptimizerError::InvalidConfig("empty bounds".into()));
    }
    for (lo, hi) in bounds.lower.iter().zip(&bounds.upper) {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(OptimizerError::InvalidConfig(format!("invalid bound interval [{lo}, {hi}]")));
        }
    }
    Ok(())
}

/// Optimizer selection as it appears in run configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum OptimizerConfig {
    Bo(BoConfig),
    Ga(GaConfig),
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Ga(GaConfig::default())
    }
}
