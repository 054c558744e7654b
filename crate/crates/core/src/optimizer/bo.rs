//! Batch Bayesian optimization: Thompson samples on a random candidate cloud
//! plus one expected-improvement maximizer per batch.

use crate::grammar::LatentBox;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::gp::{cholesky_with_jitter, ei_from_moments, expected_improvement, gp_fit, GpParams, GpSurrogate};
use super::pca::PcaModel;
use super::{sample_uniform, validate_bounds, HistoryEntry, Objective, OptimizerError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoConfig {
    pub init_size: usize,
    pub batch_size: usize,
    pub cloud_size: usize,
    pub ei_restarts: usize,
    /// First pattern-search step as a fraction of each box width.
    pub ei_initial_step: f64,
    pub ei_min_step: f64,
    pub thompson_rank: usize,
    /// Surrogate fits use at most this many (highest-scoring) points.
    pub max_gp_points: usize,
    /// Explained-variance target for the PCA pre-reduction.
    pub pca_target: f64,
    pub max_batches: Option<usize>,
}

impl Default for BoConfig {
    fn default() -> Self {
        BoConfig {
            init_size: 10,
            batch_size: 10,
            cloud_size: 2048,
            ei_restarts: 20,
            ei_initial_step: 0.1,
            ei_min_step: 1e-4,
            thompson_rank: 64,
            max_gp_points: 100,
            pca_target: 0.999,
            max_batches: None,
        }
    }
}

impl BoConfig {
    pub fn validate(&self) -> Result<(), OptimizerError> {
        if self.init_size == 0 || self.batch_size == 0 || self.cloud_size == 0 || self.max_gp_points == 0 {
            return Err(OptimizerError::InvalidConfig("BO sizes must be positive".into()));
        }
        if !(self.ei_min_step > 0.0 && self.ei_initial_step >= self.ei_min_step) {
            return Err(OptimizerError::InvalidConfig("EI pattern-search steps must satisfy 0 < min <= initial".into()));
        }
        if !(self.pca_target > 0.0 && self.pca_target <= 1.0) {
            return Err(OptimizerError::InvalidConfig("pca_target must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Proposes a batch in the surrogate's input space: the refined EI maximizer
/// first, then the argmax of each Thompson draw, without duplicates.
pub fn propose_batch<R: Rng>(
    s: &GpSurrogate,
    bounds: &LatentBox,
    best: f64,
    cfg: &BoConfig,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>, OptimizerError> {
    let cloud: Vec<Vec<f64>> = (0..cfg.cloud_size).map(|_| sample_uniform(rng, bounds)).collect();
    let (mean, v) = s.posterior_parts(&cloud);
    let signal = s.params.kernel.variance;
    let var: Vec<f64> = (0..cloud.len())
        .map(|c| (signal - v.column(c).norm_squared()).max(0.0))
        .collect();

    let mut batch = Vec::with_capacity(cfg.batch_size);
    batch.push(maximize_ei(s, bounds, best, cfg, &cloud, &mean, &var));

    let draws = thompson_draws(s, &cloud, &mean, &v, &var, cfg, rng)?;
    for f in draws {
        let arg = (0..f.len()).fold(0, |a, c| if f[c] > f[a] { c } else { a });
        batch.push(cloud[arg].clone());
    }

    let mut unique: Vec<Vec<f64>> = Vec::with_capacity(cfg.batch_size);
    for p in batch {
        if !unique.contains(&p) {
            unique.push(p);
        }
    }
    unique.truncate(cfg.batch_size);
    while unique.len() < cfg.batch_size {
        unique.push(sample_uniform(rng, bounds));
    }
    Ok(unique)
}

/// Approximate joint posterior draws on the cloud: exact on `r` anchor points,
/// propagated to the rest by conditioning, with the unexplained marginal
/// variance added independently per point.
fn thompson_draws<R: Rng>(
    s: &GpSurrogate,
    cloud: &[Vec<f64>],
    mean: &DVector<f64>,
    v: &DMatrix<f64>,
    var: &[f64],
    cfg: &BoConfig,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>, OptimizerError> {
    let m = cloud.len();
    let r = cfg.thompson_rank.min(s.len()).min(m).max(1);
    let kernel = s.params.kernel;
    // Posterior covariance between every cloud point and the first r.
    let v_anchor = v.columns(0, r);
    let s_ca = DMatrix::from_fn(m, r, |c, a| kernel.eval(&cloud[c], &cloud[a])) - v.transpose() * v_anchor;
    let s_aa = s_ca.rows(0, r).into_owned();
    let s_aa = 0.5 * (&s_aa + s_aa.transpose());
    let (chol, _) = cholesky_with_jitter(s_aa, 0.0, kernel.variance)?;
    // B^T = L^{-1} S_AC, so B B^T = S_CA S_AA^{-1} S_AC.
    let bt = chol
        .l()
        .solve_lower_triangular(&s_ca.transpose())
        .expect("Cholesky factor is non-singular");
    let resid: Vec<f64> = (0..m)
        .map(|c| (var[c] - bt.column(c).norm_squared()).max(0.0).sqrt())
        .collect();

    let mut draws = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let eps = DVector::from_iterator(r, (0..r).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let shared = bt.transpose() * eps;
        let f: Vec<f64> = (0..m)
            .map(|c| mean[c] + shared[c] + resid[c] * rng.sample::<f64, _>(StandardNormal))
            .collect();
        draws.push(f);
    }
    Ok(draws)
}

fn maximize_ei(
    s: &GpSurrogate,
    bounds: &LatentBox,
    best: f64,
    cfg: &BoConfig,
    cloud: &[Vec<f64>],
    mean: &DVector<f64>,
    var: &[f64],
) -> Vec<f64> {
    let floor = s.variance_floor();
    let mut scored: Vec<(f64, usize)> = (0..cloud.len())
        .map(|c| {
            let sigma = if var[c] <= floor { 0.0 } else { var[c].sqrt() };
            (ei_from_moments(mean[c], sigma, best), c)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let incumbent = s
        .y
        .iter()
        .enumerate()
        .fold(0, |a, (i, &y)| if y > s.y[a] { i } else { a });
    let mut starts = vec![bounds.clamp(&s.x[incumbent])];
    starts.extend(scored.iter().take(cfg.ei_restarts.saturating_sub(1)).map(|&(_, c)| cloud[c].clone()));

    let mut best_point = starts[0].clone();
    let mut best_ei = f64::NEG_INFINITY;
    for start in starts {
        let (p, e) = pattern_search(|q| expected_improvement(s, q, best), start, bounds, cfg);
        if e > best_ei {
            best_ei = e;
            best_point = p;
        }
    }
    best_point
}

/// Coordinate pattern search: accept the first improving ±step move, halve
/// the step when a full sweep fails.
fn pattern_search(
    f: impl Fn(&[f64]) -> f64,
    start: Vec<f64>,
    bounds: &LatentBox,
    cfg: &BoConfig,
) -> (Vec<f64>, f64) {
    const MAX_MOVES: usize = 1000;
    let widths: Vec<f64> = bounds.lower.iter().zip(&bounds.upper).map(|(l, h)| h - l).collect();
    let mut x = start;
    let mut fx = f(&x);
    let mut frac = cfg.ei_initial_step;
    let mut moves = 0;
    while frac >= cfg.ei_min_step && moves < MAX_MOVES {
        let mut improved = false;
        'sweep: for j in 0..x.len() {
            if widths[j] <= 0.0 {
                continue;
            }
            for sign in [1.0, -1.0] {
                let mut cand = x.clone();
                cand[j] = (cand[j] + sign * frac * widths[j]).clamp(bounds.lower[j], bounds.upper[j]);
                if cand[j] == x[j] {
                    continue;
                }
                let fc = f(&cand);
                if fc > fx {
                    x = cand;
                    fx = fc;
                    improved = true;
                    moves += 1;
                    break 'sweep;
                }
            }
        }
        if !improved {
            frac *= 0.5;
        }
    }
    (x, fx)
}

/// Maximizes the objective over `bounds`. With `pca`, the search runs in the
/// reduced coordinates over the projected box, and every lifted point is
/// clamped back into `bounds` before evaluation.
pub fn run_bo(
    objective: &mut dyn Objective,
    bounds: &LatentBox,
    cfg: &BoConfig,
    pca: Option<&PcaModel>,
    seed: u64,
) -> Result<Vec<HistoryEntry>, OptimizerError> {
    validate_bounds(bounds)?;
    cfg.validate()?;
    let search = match pca {
        Some(p) => p.project_box(bounds)?,
        None => bounds.clone(),
    };
    let to_latent = |v: &[f64]| -> Result<Vec<f64>, OptimizerError> {
        match pca {
            Some(p) => Ok(bounds.clamp(&p.lift(v)?)),
            None => Ok(v.to_vec()),
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut history: Vec<HistoryEntry> = Vec::new();
    let mut round = 0;

    let mut batch: Vec<Vec<f64>> = (0..cfg.init_size).map(|_| sample_uniform(&mut rng, &search)).collect();
    loop {
        let latents = batch.iter().map(|v| to_latent(v)).collect::<Result<Vec<_>, _>>()?;
        let evals = objective.evaluate(&latents);
        let complete = evals.len() == batch.len();
        for ((point, latent), e) in batch.into_iter().zip(latents).zip(evals) {
            history.push(HistoryEntry {
                point,
                latent,
                value: e.value,
                penalized: e.penalized,
                round,
            });
        }
        round += 1;
        if !complete || objective.exhausted() || cfg.max_batches.is_some_and(|m| round > m) {
            break;
        }
        batch = next_batch(&history, &search, cfg, &mut rng)?;
    }
    Ok(history)
}

fn next_batch<R: Rng>(
    history: &[HistoryEntry],
    search: &LatentBox,
    cfg: &BoConfig,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>, OptimizerError> {
    let mut usable: Vec<&HistoryEntry> = history.iter().filter(|h| !h.penalized && h.value.is_finite()).collect();
    if usable.is_empty() {
        return Ok((0..cfg.batch_size).map(|_| sample_uniform(rng, search)).collect());
    }
    if usable.len() > cfg.max_gp_points {
        usable.sort_by(|a, b| b.value.total_cmp(&a.value));
        usable.truncate(cfg.max_gp_points);
    }
    let x: Vec<Vec<f64>> = usable.iter().map(|h| h.point.clone()).collect();
    let y: Vec<f64> = usable.iter().map(|h| h.value).collect();
    let s = gp_fit(&x, &y, GpParams::heuristic(&x, &y))?;
    let best = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    propose_batch(&s, search, best, cfg, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimizer::{Evaluation, FnObjective};

    #[test]
    fn batch_is_deterministic_inside_bounds_and_spread() {
        let bounds = LatentBox::uniform(2, -1.0, 1.0);
        let x = vec![vec![0.0, 0.0], vec![0.8, 0.8], vec![-0.8, 0.7]];
        let y = vec![5.0, 1.0, 0.5];
        let s = gp_fit(&x, &y, GpParams::heuristic(&x, &y)).unwrap();
        let cfg = BoConfig::default();
        let a = propose_batch(&s, &bounds, 5.0, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = propose_batch(&s, &bounds, 5.0, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        assert!(a.iter().all(|p| bounds.contains(p)));
        let distinct = a
            .iter()
            .enumerate()
            .filter(|(i, p)| a.iter().enumerate().all(|(j, q)| j == *i || p != &q))
            .count();
        assert!(distinct >= 8);
    }

    #[test]
    fn stops_exactly_at_budget() {
        let bounds = LatentBox::uniform(2, 0.0, 1.0);
        let mut obj = FnObjective::new(|z: &[f64]| -(z[0] - 0.3).powi(2) - (z[1] - 0.6).powi(2), 27);
        let h = run_bo(&mut obj, &bounds, &BoConfig::default(), None, 4).unwrap();
        assert_eq!(h.len(), 27);
        assert!(h.iter().all(|e| bounds.contains(&e.latent)));
    }

    struct Penalizing;

    impl Objective for Penalizing {
        fn evaluate(&mut self, batch: &[Vec<f64>]) -> Vec<Evaluation> {
            batch
                .iter()
                .map(|z| {
                    if z[0] > 0.8 {
                        Evaluation {
                            value: -1000.0,
                            penalized: true,
                        }
                    } else {
                        Evaluation::scored(z[0])
                    }
                })
                .collect()
        }
    }

    #[test]
    fn penalized_points_do_not_break_the_surrogate() {
        let bounds = LatentBox::uniform(3, 0.0, 1.0);
        let cfg = BoConfig {
            max_batches: Some(3),
            ..BoConfig::default()
        };
        let h = run_bo(&mut Penalizing, &bounds, &cfg, None, 2).unwrap();
        assert_eq!(h.len(), 40);
        let best = h.iter().filter(|e| !e.penalized).map(|e| e.value).fold(f64::NEG_INFINITY, f64::max);
        assert!(best > 0.6, "{best}");
    }

    #[test]
    fn reduced_search_lifts_into_bounds() {
        let bounds = LatentBox::uniform(5, -1.0, 1.0);
        let pts: Vec<Vec<f64>> = (0..20)
            .map(|i| {
                let t = i as f64 / 19.0 - 0.5;
                vec![t, -t, 0.0, 0.5 * t, 0.0]
            })
            .collect();
        let pca = crate::optimizer::pca_fit(&pts, 0.999).unwrap();
        assert_eq!(pca.reduced_dim(), 1);
        let mut obj = FnObjective::new(|z: &[f64]| z[0], 30);
        let h = run_bo(&mut obj, &bounds, &BoConfig::default(), Some(&pca), 1).unwrap();
        assert_eq!(h.len(), 30);
        for e in &h {
            assert_eq!(e.point.len(), 1);
            assert!(bounds.contains(&e.latent));
        }
    }
}
