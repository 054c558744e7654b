//! Gaussian-process surrogate with a Matérn 5/2 kernel.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use super::OptimizerError;

/// Diagonal jitter levels (relative to the signal variance), tried in order.
pub const JITTER_LADDER: [f64; 3] = [1e-8, 1e-6, 1e-4];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Matern52 {
    pub variance: f64,
    pub lengthscale: f64,
}

impl Matern52 {
    pub fn of_distance(&self, r: f64) -> f64 {
        let s = 5f64.sqrt() * r / self.lengthscale;
        self.variance * (1.0 + s + s * s / 3.0) * (-s).exp()
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        self.of_distance(distance(a, b))
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpParams {
    pub kernel: Matern52,
    pub noise_variance: f64,
    pub prior_mean: f64,
}

impl GpParams {
    /// σ² = Var(y), ℓ = median pairwise distance, σ_n² = 1e-6·σ², prior mean
    /// = mean(y). Degenerate statistics fall back to 1.
    pub fn heuristic(x: &[Vec<f64>], y: &[f64]) -> Self {
        let n = y.len().max(1) as f64;
        let mean = y.iter().sum::<f64>() / n;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let variance = if var > 0.0 && var.is_finite() { var } else { 1.0 };
        let mut dists = Vec::with_capacity(x.len() * x.len().saturating_sub(1) / 2);
        for i in 0..x.len() {
            for j in i + 1..x.len() {
                dists.push(distance(&x[i], &x[j]));
            }
        }
        dists.sort_by(f64::total_cmp);
        let median = if dists.is_empty() {
            0.0
        } else if dists.len() % 2 == 1 {
            dists[dists.len() / 2]
        } else {
            0.5 * (dists[dists.len() / 2 - 1] + dists[dists.len() / 2])
        };
        let lengthscale = if median > 0.0 { median } else { 1.0 };
        GpParams {
            kernel: Matern52 { variance, lengthscale },
            noise_variance: 1e-6 * variance,
            prior_mean: if mean.is_finite() { mean } else { 0.0 },
        }
    }
}

#[derive(Debug, Clone)]
pub struct GpSurrogate {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub params: GpParams,
    /// Jitter actually added (absolute).
    pub jitter: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

pub fn gp_fit(x: &[Vec<f64>], y: &[f64], params: GpParams) -> Result<GpSurrogate, OptimizerError> {
    if x.is_empty() || x.len() != y.len() {
        return Err(OptimizerError::InvalidConfig(format!(
            "GP needs matching non-empty inputs, got {} points and {} targets",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    let k = DMatrix::from_fn(n, n, |i, j| params.kernel.eval(&x[i], &x[j]));
    let (chol, jitter) = cholesky_with_jitter(k, params.noise_variance, params.kernel.variance)?;
    let resid = DVector::from_iterator(n, y.iter().map(|v| v - params.prior_mean));
    let alpha = chol.solve(&resid);
    Ok(GpSurrogate {
        x: x.to_vec(),
        y: y.to_vec(),
        params,
        jitter,
        chol,
        alpha,
    })
}

pub(crate) fn cholesky_with_jitter(
    k: DMatrix<f64>,
    noise: f64,
    scale: f64,
) -> Result<(Cholesky<f64, Dyn>, f64), OptimizerError> {
    for rel in JITTER_LADDER {
        let jitter = rel * scale;
        let mut m = k.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += noise + jitter;
        }
        if let Some(c) = Cholesky::new(m) {
            return Ok((c, jitter));
        }
    }
    Err(OptimizerError::CholeskyFailure)
}

impl GpSurrogate {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x[0].len()
    }

    /// Variance below which the posterior is indistinguishable from the
    /// diagonal regularization.
    pub fn variance_floor(&self) -> f64 {
        self.params.noise_variance + self.jitter
    }

    fn cross(&self, q: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.x.iter().map(|xi| self.params.kernel.eval(xi, q)))
    }

    pub fn posterior(&self, q: &[f64]) -> (f64, f64) {
        let ks = self.cross(q);
        let mean = self.params.prior_mean + ks.dot(&self.alpha);
        let v = self.chol.l().solve_lower_triangular(&ks).expect("Cholesky factor is non-singular");
        let var = (self.params.kernel.variance - v.norm_squared()).max(0.0);
        (mean, var)
    }

    /// Posterior means, and `V = L⁻¹ K(X, Q)` for joint covariance queries.
    pub(crate) fn posterior_parts(&self, qs: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
        let kxq = DMatrix::from_fn(self.len(), qs.len(), |i, j| self.params.kernel.eval(&self.x[i], &qs[j]));
        let mean = kxq.transpose() * &self.alpha;
        let mean = mean.add_scalar(self.params.prior_mean);
        let v = self.chol.l().solve_lower_triangular(&kxq).expect("Cholesky factor is non-singular");
        (mean, v)
    }
}

/// `(μ − best)·Φ(u) + σ·φ(u)` with `u = (μ − best)/σ`; `max(μ − best, 0)`
/// when the posterior variance is at the regularization floor.
pub fn expected_improvement(s: &GpSurrogate, q: &[f64], best: f64) -> f64 {
    let (mu, var) = s.posterior(q);
    ei_from_moments(mu, if var <= s.variance_floor() { 0.0 } else { var.sqrt() }, best)
}

pub fn ei_from_moments(mu: f64, sigma: f64, best: f64) -> f64 {
    let diff = mu - best;
    if sigma <= 0.0 {
        return diff.max(0.0);
    }
    let n = Normal::standard();
    let u = diff / sigma;
    (diff * n.cdf(u) + sigma * n.pdf(u)).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noiseless(variance: f64, lengthscale: f64) -> GpParams {
        GpParams {
            kernel: Matern52 { variance, lengthscale },
            noise_variance: 0.0,
            prior_mean: 0.0,
        }
    }

    #[test]
    fn kernel_at_zero_is_signal_variance() {
        let k = Matern52 {
            variance: 2.5,
            lengthscale: 0.3,
        };
        assert_eq!(k.of_distance(0.0), 2.5);
        assert!(k.of_distance(1.0) < k.of_distance(0.5));
    }

    #[test]
    fn far_query_reverts_to_prior() {
        let s = gp_fit(&[vec![0.0, 0.0]], &[3.0], noiseless(2.0, 0.5)).unwrap();
        let (m, v) = s.posterior(&[100.0, 100.0]);
        assert!(m.abs() < 1e-12);
        assert!((v - 2.0).abs() < 1e-12);
    }

    #[test]
    fn interpolates_training_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let y: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let s = gp_fit(&x, &y, noiseless(1.0, 0.8)).unwrap();
        for (xi, yi) in x.iter().zip(&y) {
            let (m, v) = s.posterior(xi);
            assert!((m - yi).abs() < 1e-6);
            assert!(v < 1e-6);
        }
        let best = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for xi in &x {
            assert!(expected_improvement(&s, xi, best) < 1e-6);
        }
    }

    #[test]
    fn ei_closed_forms() {
        assert_eq!(ei_from_moments(1.0, 0.0, 1.0), 0.0);
        assert_eq!(ei_from_moments(2.0, 0.0, 1.0), 1.0);
        assert!((ei_from_moments(0.0, 1.0, 0.0) - 0.398_942_280_401_432_7).abs() < 1e-12);
        assert!(ei_from_moments(-50.0, 1.0, 0.0) >= 0.0);
    }

    #[test]
    fn variance_nonnegative_on_random_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<Vec<f64>> = (0..30).map(|_| (0..2).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let y: Vec<f64> = x.iter().map(|p| (3.0 * p[0]).sin() + p[1]).collect();
        let s = gp_fit(&x, &y, GpParams::heuristic(&x, &y)).unwrap();
        for _ in 0..10_000 {
            let q = [rng.random_range(-0.5..1.5), rng.random_range(-0.5..1.5)];
            let (_, v) = s.posterior(&q);
            assert!(v >= 0.0);
            assert!(expected_improvement(&s, &q, 1.0) >= 0.0);
        }
    }

    #[test]
    fn duplicate_points_need_jitter() {
        let x = vec![vec![0.5], vec![0.5], vec![0.5]];
        let s = gp_fit(&x, &[1.0, 1.0, 1.0], noiseless(1.0, 1.0)).unwrap();
        assert!(s.jitter > 0.0);
        let (m, _) = s.posterior(&[0.5]);
        assert!((m - 1.0).abs() < 1e-4);
    }

    #[test]
    fn heuristic_uses_median_distance() {
        let x = vec![vec![0.0], vec![1.0], vec![3.0]];
        let p = GpParams::heuristic(&x, &[1.0, 2.0, 3.0]);
        assert_eq!(p.kernel.lengthscale, 2.0);
        assert!((p.kernel.variance - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(p.prior_mean, 2.0);
    }
}
