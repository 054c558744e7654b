//! Applicability domain from ν-one-class SVMs over GNN fingerprints.
//!
//! One SVM per ensemble member; each votes +1 when its decision value is
//! non-negative and -1 otherwise. A molecule is inside the domain when the
//! number of positive votes exceeds the consensus fraction of the ensemble
//! (strict majority by default, i.e. vote sum > 0).

use crate::gnn::Fingerprint;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// ν-values and γ-values searched by default.
pub const DEFAULT_NU_GRID: [f64; 4] = [0.5, 0.1, 0.05, 0.01];
pub const DEFAULT_GAMMA_GRID: [Gamma; 8] = [
    Gamma::Value(0.5),
    Gamma::Value(0.1),
    Gamma::Value(0.01),
    Gamma::Value(0.005),
    Gamma::Value(0.001),
    Gamma::Value(0.0005),
    Gamma::Value(0.0001),
    Gamma::Scale,
];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdError {
    #[error("all training fingerprints are identical; the decision boundary is undefined")]
    DegenerateData,
    #[error("need at least 2 fingerprints, got {0}")]
    TooFewPoints(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("fingerprint dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("ensemble size mismatch: {svms} SVMs for {models} models")]
    SizeMismatch { svms: usize, models: usize },
}

/// RBF kernel width: explicit, or `1 / (d · Var(all entries))`.
/// Serialized as `"scale"` or a number.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GammaRepr", into = "GammaRepr")]
pub enum Gamma {
    Scale,
    Value(f64),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum GammaRepr {
    Named(String),
    Value(f64),
}

impl TryFrom<GammaRepr> for Gamma {
    type Error = String;

    fn try_from(r: GammaRepr) -> Result<Self, String> {
        match r {
            GammaRepr::Named(s) if s == "scale" => Ok(Gamma::Scale),
            GammaRepr::Named(s) => Err(format!("unknown gamma \"{s}\" (expected \"scale\" or a number)")),
            GammaRepr::Value(v) => Ok(Gamma::Value(v)),
        }
    }
}

impl From<Gamma> for GammaRepr {
    fn from(g: Gamma) -> Self {
        match g {
            Gamma::Scale => GammaRepr::Named("scale".into()),
            Gamma::Value(v) => GammaRepr::Value(v),
        }
    }
}

impl Gamma {
    pub fn resolve(self, points: &[Vec<f64>]) -> f64 {
        match self {
            Gamma::Value(g) => g,
            Gamma::Scale => scale_gamma(points),
        }
    }
}

fn scale_gamma(points: &[Vec<f64>]) -> f64 {
    let d = points.first().map_or(1, |p| p.len()).max(1);
    let n = (points.len() * d) as f64;
    let mean = points.iter().flatten().sum::<f64>() / n;
    let var = points.iter().flatten().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    if var > 0.0 {
        1.0 / (d as f64 * var)
    } else {
        1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Stop when the maximal KKT violation drops below this.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tolerance: 1e-6,
            max_iterations: 100_000,
        }
    }
}

fn rbf(gamma: f64, a: &[f64], b: &[f64]) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-gamma * d2).exp()
}

/// Fitted ν-one-class SVM. Only support vectors (α > 0) are kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneClassSvm {
    pub support_vectors: Vec<Vec<f64>>,
    pub alphas: Vec<f64>,
    pub rho: f64,
    pub gamma: f64,
    pub nu: f64,
    pub n_train: usize,
    pub iterations: usize,
    pub converged: bool,
}

impl OneClassSvm {
    pub fn dim(&self) -> usize {
        self.support_vectors.first().map_or(0, |v| v.len())
    }

    /// `Σ_i α_i k(x_i, x) − ρ`.
    pub fn decision(&self, x: &[f64]) -> f64 {
        self.kernel_sum(x) - self.rho
    }

    fn kernel_sum(&self, x: &[f64]) -> f64 {
        self.support_vectors
            .iter()
            .zip(&self.alphas)
            .map(|(sv, &a)| a * rbf(self.gamma, sv, x))
            .sum()
    }

    pub fn n_support(&self) -> usize {
        self.support_vectors.len()
    }
}

/// Solves `min ½ αᵀKα` s.t. `0 ≤ α_i ≤ 1/(νm)`, `Σα = 1` by pairwise
/// (maximal-violating-pair) updates with an analytic two-variable step.
pub fn fit_svm(points: &[Vec<f64>], nu: f64, gamma: Gamma, solver: SolverConfig) -> Result<OneClassSvm, AdError> {
    let m = points.len();
    if m < 2 {
        return Err(AdError::TooFewPoints(m));
    }
    if !(nu > 0.0 && nu <= 1.0) {
        return Err(AdError::InvalidParameter(format!("nu must be in (0, 1], got {nu}")));
    }
    let d = points[0].len();
    if let Some(p) = points.iter().find(|p| p.len() != d) {
        return Err(AdError::DimensionMismatch {
            expected: d,
            got: p.len(),
        });
    }
    if points.iter().all(|p| p == &points[0]) {
        return Err(AdError::DegenerateData);
    }
    let gamma = gamma.resolve(points);
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(AdError::InvalidParameter(format!("gamma must be positive, got {gamma}")));
    }

    let kernel: Vec<Vec<f64>> = (0..m)
        .map(|i| (0..m).map(|j| rbf(gamma, &points[i], &points[j])).collect())
        .collect();
    let upper = 1.0 / (nu * m as f64);

    // Feasible start: fill the first ⌊νm⌋ multipliers to the bound and put
    // the remainder on the next one.
    let mut alpha = vec![0.0; m];
    let mut remaining: f64 = 1.0;
    for a in alpha.iter_mut() {
        if remaining <= 0.0 {
            break;
        }
        let take = remaining.min(upper);
        *a = take;
        remaining -= take;
    }

    let mut grad: Vec<f64> = (0..m)
        .map(|i| (0..m).map(|j| kernel[i][j] * alpha[j]).sum())
        .collect();

    let mut iterations = 0;
    let mut converged = false;
    while iterations < solver.max_iterations {
        // i: may increase (α_i < C) with smallest gradient;
        // j: may decrease (α_j > 0) with largest gradient.
        let mut i_best = None;
        let mut j_best = None;
        for k in 0..m {
            if alpha[k] < upper && i_best.is_none_or(|i: usize| grad[k] < grad[i]) {
                i_best = Some(k);
            }
            if alpha[k] > 0.0 && j_best.is_none_or(|j: usize| grad[k] > grad[j]) {
                j_best = Some(k);
            }
        }
        let (Some(i), Some(j)) = (i_best, j_best) else {
            converged = true;
            break;
        };
        if grad[j] - grad[i] < solver.tolerance {
            converged = true;
            break;
        }
        let eta = (kernel[i][i] + kernel[j][j] - 2.0 * kernel[i][j]).max(1e-12);
        let step = ((grad[j] - grad[i]) / eta).min(upper - alpha[i]).min(alpha[j]);
        alpha[i] += step;
        alpha[j] -= step;
        if alpha[j] < 1e-16 {
            alpha[j] = 0.0;
        }
        if upper - alpha[i] < 1e-16 {
            alpha[i] = upper;
        }
        for (g, row) in grad.iter_mut().zip(&kernel) {
            *g += step * (row[i] - row[j]);
        }
        iterations += 1;
    }

    let support: Vec<usize> = (0..m).filter(|&k| alpha[k] > 0.0).collect();
    let support_vectors: Vec<Vec<f64>> = support.iter().map(|&k| points[k].clone()).collect();
    let alphas: Vec<f64> = support.iter().map(|&k| alpha[k]).collect();
    let mut svm = OneClassSvm {
        support_vectors,
        alphas,
        rho: 0.0,
        gamma,
        nu,
        n_train: m,
        iterations,
        converged,
    };

    // ρ from the decision function itself (same summation as prediction), so
    // free support vectors land on f ≥ 0 exactly. Without free vectors the
    // KKT interval midpoint is used.
    let sums: Vec<f64> = points.iter().map(|p| svm.kernel_sum(p)).collect();
    let free: Vec<f64> = (0..m)
        .filter(|&k| alpha[k] > 0.0 && alpha[k] < upper)
        .map(|k| sums[k])
        .collect();
    svm.rho = if let Some(min_free) = free.iter().copied().reduce(f64::min) {
        min_free
    } else {
        let lb = (0..m)
            .filter(|&k| alpha[k] >= upper)
            .map(|k| sums[k])
            .fold(f64::NEG_INFINITY, f64::max);
        let ub = (0..m)
            .filter(|&k| alpha[k] == 0.0)
            .map(|k| sums[k])
            .fold(f64::INFINITY, f64::min);
        match (lb.is_finite(), ub.is_finite()) {
            (true, true) => 0.5 * (lb + ub),
            (true, false) => lb,
            (false, true) => ub,
            (false, false) => 0.0,
        }
    };
    Ok(svm)
}

/// Fraction of training points with negative decision value.
pub fn outlier_fraction(svm: &OneClassSvm, points: &[Vec<f64>]) -> f64 {
    points.iter().filter(|p| svm.decision(p) < 0.0).count() as f64 / points.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    pub inside: bool,
    pub sum: i64,
    pub positive: usize,
}

/// One SVM per GNN plus the consensus rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdEnsemble {
    pub svms: Vec<OneClassSvm>,
    /// Positive votes must exceed this fraction of the ensemble.
    pub consensus: f64,
}

impl AdEnsemble {
    pub fn new(svms: Vec<OneClassSvm>) -> Self {
        AdEnsemble {
            svms,
            consensus: 0.5,
        }
    }

    pub fn len(&self) -> usize {
        self.svms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.svms.is_empty()
    }

    /// Votes with fingerprint `j` scored by SVM `j`.
    pub fn vote(&self, fingerprints: &[Fingerprint]) -> Result<Vote, AdError> {
        if fingerprints.len() != self.svms.len() {
            return Err(AdError::SizeMismatch {
                svms: self.svms.len(),
                models: fingerprints.len(),
            });
        }
        let signs = self
            .svms
            .iter()
            .zip(fingerprints)
            .map(|(svm, fp)| {
                if fp.0.len() != svm.dim() {
                    return Err(AdError::DimensionMismatch {
                        expected: svm.dim(),
                        got: fp.0.len(),
                    });
                }
                Ok(svm.decision(&fp.0) >= 0.0)
            })
            .collect::<Result<Vec<bool>, _>>()?;
        Ok(tally(&signs, self.consensus))
    }
}

/// Ensemble vote for one molecule; `fingerprints[j]` comes from GNN `j`.
pub fn ad_vote(fingerprints: &[Fingerprint], ad: &AdEnsemble) -> Result<Vote, AdError> {
    ad.vote(fingerprints)
}

/// Counts votes: +1 per positive member, −1 otherwise.
pub fn tally(positive: &[bool], consensus: f64) -> Vote {
    let k = positive.len();
    let pos = positive.iter().filter(|&&p| p).count();
    let sum = pos as i64 - (k - pos) as i64;
    let inside = if consensus == 0.5 {
        sum > 0
    } else {
        pos as f64 > consensus * k as f64
    };
    Vote {
        inside,
        sum,
        positive: pos,
    }
}

/// Fits one SVM per fingerprint set (one set per GNN).
pub fn fit_ensemble(per_model: &[Vec<Vec<f64>>], nu: f64, gamma: Gamma, solver: SolverConfig) -> Result<AdEnsemble, AdError> {
    let svms = per_model
        .iter()
        .map(|pts| fit_svm(pts, nu, gamma, solver))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(AdEnsemble::new(svms))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub gamma: Gamma,
    pub gamma_value: f64,
    pub nu: f64,
    pub n_support: usize,
    pub support_fraction: f64,
    pub outlier_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearch {
    pub cells: Vec<GridCell>,
    pub selected_gamma: Gamma,
    pub selected_gamma_value: f64,
    pub selected_nu: f64,
}

/// Relative support-vector change below which decreasing γ further is
/// considered to have plateaued.
pub const PLATEAU_TOLERANCE: f64 = 0.05;
pub const SELECTED_NU: f64 = 0.05;

/// Sweeps the γ × ν grid and applies the plateau rule at ν = 0.05 (or the
/// grid value closest to it): walking γ from large to small, pick the first γ
/// whose support-vector count is within 5% of the count at the next smaller γ.
pub fn grid_search_hyperparams(points: &[Vec<f64>], gammas: &[Gamma], nus: &[f64], solver: SolverConfig) -> Result<GridSearch, AdError> {
    if gammas.is_empty() || nus.is_empty() {
        return Err(AdError::InvalidParameter("empty grid".into()));
    }
    let mut cells = Vec::new();
    for &nu in nus {
        for &gamma in gammas {
            let svm = fit_svm(points, nu, gamma, solver)?;
            cells.push(GridCell {
                gamma,
                gamma_value: svm.gamma,
                nu,
                n_support: svm.n_support(),
                support_fraction: svm.n_support() as f64 / points.len() as f64,
                outlier_fraction: outlier_fraction(&svm, points),
            });
        }
    }
    let nu_sel = nus
        .iter()
        .copied()
        .min_by(|a, b| (a - SELECTED_NU).abs().total_cmp(&(b - SELECTED_NU).abs()))
        .unwrap();
    let mut column: Vec<&GridCell> = cells.iter().filter(|c| c.nu == nu_sel).collect();
    column.sort_by(|a, b| b.gamma_value.total_cmp(&a.gamma_value));
    let mut chosen = column[column.len() - 1];
    for w in column.windows(2) {
        let (here, smaller) = (w[0].n_support as f64, w[1].n_support as f64);
        if (here - smaller).abs() <= PLATEAU_TOLERANCE * here {
            chosen = w[0];
            break;
        }
    }
    Ok(GridSearch {
        selected_gamma: chosen.gamma,
        selected_gamma_value: chosen.gamma_value,
        selected_nu: nu_sel,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect()
    }

    #[test]
    fn dual_constraints_hold() {
        let pts = gaussian(80, 3, 1);
        let svm = fit_svm(&pts, 0.1, Gamma::Scale, SolverConfig::default()).unwrap();
        assert!(svm.converged);
        let sum: f64 = svm.alphas.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        let c = 1.0 / (0.1 * 80.0);
        assert!(svm.alphas.iter().all(|&a| a > 0.0 && a <= c + 1e-15));
    }

    #[test]
    fn nu_property_on_gaussian_cloud() {
        for seed in 0..10 {
            let pts = gaussian(100, 2, seed);
            let svm = fit_svm(&pts, 0.05, Gamma::Scale, SolverConfig::default()).unwrap();
            let outliers = pts.iter().filter(|p| svm.decision(p) < 0.0).count();
            assert!(outliers <= 7, "seed {seed}: {outliers}");
            assert!(svm.n_support() as f64 / 100.0 >= 0.05 - 0.02);
        }
    }

    #[test]
    fn centroid_inside_far_point_outside() {
        let pts: Vec<Vec<f64>> = gaussian(50, 2, 3)
            .into_iter()
            .map(|p| p.iter().map(|x| 0.01 * x).collect())
            .collect();
        let svm = fit_svm(&pts, 0.05, Gamma::Scale, SolverConfig::default()).unwrap();
        assert!(svm.decision(&[0.0, 0.0]) > 0.0);
        assert!(svm.decision(&[1.0, 1.0]) < 0.0);
    }

    #[test]
    fn nu_one_makes_everything_a_support_vector() {
        let pts = gaussian(40, 2, 4);
        let svm = fit_svm(&pts, 1.0, Gamma::Scale, SolverConfig::default()).unwrap();
        assert_eq!(svm.n_support(), 40);
    }

    #[test]
    fn degenerate_and_bad_inputs() {
        let same = vec![vec![1.0, 2.0]; 5];
        assert_eq!(
            fit_svm(&same, 0.05, Gamma::Scale, SolverConfig::default()),
            Err(AdError::DegenerateData)
        );
        assert_eq!(
            fit_svm(&same[..1], 0.05, Gamma::Scale, SolverConfig::default()),
            Err(AdError::TooFewPoints(1))
        );
        let pts = gaussian(5, 2, 0);
        assert!(fit_svm(&pts, 0.0, Gamma::Scale, SolverConfig::default()).is_err());
        assert!(fit_svm(&pts, 0.5, Gamma::Value(-1.0), SolverConfig::default()).is_err());
    }

    #[test]
    fn vote_arithmetic() {
        let mut v = vec![true; 31];
        v.extend(vec![false; 9]);
        assert_eq!(
            tally(&v, 0.5),
            Vote {
                inside: true,
                sum: 22,
                positive: 31
            }
        );
        let mut half = vec![true; 20];
        half.extend(vec![false; 20]);
        let t = tally(&half, 0.5);
        assert_eq!((t.inside, t.sum), (false, 0));
        assert_eq!(tally(&[true], 0.5).sum, 1);
        assert!(tally(&[true], 0.5).inside);
        // 80% consensus: 31/40 is not enough.
        assert!(!tally(&v, 0.8).inside);
    }

    #[test]
    fn flipping_one_vote_moves_sum_by_two() {
        let base: Vec<bool> = (0..40).map(|i| i % 3 != 0).collect();
        for k in 0..40 {
            let mut f = base.clone();
            f[k] = !f[k];
            assert_eq!((tally(&f, 0.5).sum - tally(&base, 0.5).sum).abs(), 2);
        }
    }

    #[test]
    fn grid_search_single_gamma_and_nu_column() {
        let pts = gaussian(60, 4, 9);
        let r = grid_search_hyperparams(&pts, &[Gamma::Value(0.1)], &DEFAULT_NU_GRID, SolverConfig::default()).unwrap();
        assert_eq!(r.selected_gamma, Gamma::Value(0.1));
        assert_eq!(r.selected_nu, 0.05);
        for c in &r.cells {
            assert!(c.support_fraction >= c.nu, "{c:?}");
        }
    }

    #[test]
    fn gamma_serialization() {
        assert_eq!(serde_json::to_string(&Gamma::Scale).unwrap(), "\"scale\"");
        assert_eq!(serde_json::to_string(&Gamma::Value(0.5)).unwrap(), "0.5");
        assert_eq!(serde_json::from_str::<Gamma>("0.001").unwrap(), Gamma::Value(0.001));
        assert!(serde_json::from_str::<Gamma>("\"auto\"").is_err());
    }

    #[test]
    fn vote_checks_dimensions() {
        let pts = gaussian(10, 2, 2);
        let ad = AdEnsemble::new(vec![fit_svm(&pts, 0.5, Gamma::Scale, SolverConfig::default()).unwrap()]);
        assert!(matches!(
            ad.vote(&[Fingerprint(vec![0.0; 3])]),
            Err(AdError::DimensionMismatch { .. })
        ));
        assert!(matches!(ad.vote(&[]), Err(AdError::SizeMismatch { .. })));
        assert!(ad.vote(&[Fingerprint(vec![0.0, 0.0])]).unwrap().inside);
    }
}
