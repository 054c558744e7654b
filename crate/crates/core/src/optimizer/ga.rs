//! Elitist real-valued genetic algorithm.

use crate::grammar::LatentBox;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sample_uniform, validate_bounds, HistoryEntry, Objective, OptimizerError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaConfig {
    pub population: usize,
    pub mutation_prob: f64,
    pub crossover_prob: f64,
    pub elite_ratio: f64,
    pub parents_portion: f64,
    /// Generations after the initial population; `None` runs until the
    /// objective stops accepting points.
    pub max_generations: Option<usize>,
}

impl Default for GaConfig {
    fn default() -> Self {
        GaConfig {
            population: 50,
            mutation_prob: 0.1,
            crossover_prob: 0.5,
            elite_ratio: 0.01,
            parents_portion: 0.3,
            max_generations: None,
        }
    }
}

impl GaConfig {
    pub fn elite_count(&self) -> usize {
        ((self.elite_ratio * self.population as f64).round() as usize).clamp(1, self.population)
    }

    pub fn parent_count(&self) -> usize {
        ((self.parents_portion * self.population as f64).round() as usize).clamp(1, self.population)
    }

    pub fn validate(&self) -> Result<(), OptimizerError> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(OptimizerError::InvalidConfig(format!("{name} must be in [0, 1], got {p}")))
            }
        };
        if self.population < 2 {
            return Err(OptimizerError::InvalidConfig("GA population must be at least 2".into()));
        }
        prob("mutation_prob", self.mutation_prob)?;
        prob("crossover_prob", self.crossover_prob)?;
        prob("elite_ratio", self.elite_ratio)?;
        prob("parents_portion", self.parents_portion)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaPopulation {
    pub individuals: Vec<Vec<f64>>,
    pub fitness: Vec<f64>,
    pub generation: usize,
}

fn rank_key(f: f64) -> f64 {
    if f.is_nan() {
        f64::NEG_INFINITY
    } else {
        f
    }
}

impl GaPopulation {
    /// Indices sorted by decreasing fitness; ties keep population order.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.individuals.len()).collect();
        idx.sort_by(|&a, &b| rank_key(self.fitness[b]).total_cmp(&rank_key(self.fitness[a])));
        idx
    }

    pub fn best(&self) -> Option<(&[f64], f64)> {
        self.ranking()
            .first()
            .map(|&i| (self.individuals[i].as_slice(), self.fitness[i]))
    }
}

/// Children for the next generation: parents drawn from the fittest
/// `parents_portion`, uniform crossover with probability `crossover_prob`
/// (otherwise a clone of the first parent), then per-gene uniform resampling
/// with probability `mutation_prob`.
pub fn ga_offspring<R: Rng>(pop: &GaPopulation, cfg: &GaConfig, bounds: &LatentBox, rng: &mut R) -> Vec<Vec<f64>> {
    let ranking = pop.ranking();
    let pool = &ranking[..cfg.parent_count().min(ranking.len())];
    let n_children = cfg.population - cfg.elite_count();
    (0..n_children)
        .map(|_| {
            let a = &pop.individuals[pool[rng.random_range(0..pool.len())]];
            let b = &pop.individuals[pool[rng.random_range(0..pool.len())]];
            let mut child = if rng.random_bool(cfg.crossover_prob) {
                a.iter()
                    .zip(b)
                    .map(|(&x, &y)| if rng.random_bool(0.5) { x } else { y })
                    .collect()
            } else {
                a.clone()
            };
            for (j, gene) in child.iter_mut().enumerate() {
                if rng.random_bool(cfg.mutation_prob) {
                    let (lo, hi) = (bounds.lower[j], bounds.upper[j]);
                    *gene = if hi > lo { rng.random_range(lo..=hi) } else { lo };
                }
            }
            child
        })
        .collect()
}

/// Elites carried over unchanged, followed by the evaluated children.
pub fn ga_replace(pop: &GaPopulation, cfg: &GaConfig, children: Vec<Vec<f64>>, fitness: Vec<f64>) -> GaPopulation {
    let ranking = pop.ranking();
    let mut individuals = Vec::with_capacity(cfg.population);
    let mut fit = Vec::with_capacity(cfg.population);
    for &i in &ranking[..cfg.elite_count()] {
        individuals.push(pop.individuals[i].clone());
        fit.push(pop.fitness[i]);
    }
    individuals.extend(children);
    fit.extend(fitness);
    GaPopulation {
        individuals,
        fitness: fit,
        generation: pop.generation + 1,
    }
}

/// One full generation with a plain fitness function.
pub fn ga_step<R: Rng>(
    pop: &GaPopulation,
    cfg: &GaConfig,
    mut fitness: impl FnMut(&[f64]) -> f64,
    bounds: &LatentBox,
    rng: &mut R,
) -> GaPopulation {
    let children = ga_offspring(pop, cfg, bounds, rng);
    let fit = children.iter().map(|c| fitness(c)).collect();
    ga_replace(pop, cfg, children, fit)
}

pub fn run_ga(
    objective: &mut dyn Objective,
    bounds: &LatentBox,
    cfg: &GaConfig,
    seed: u64,
) -> Result<Vec<HistoryEntry>, OptimizerError> {
    validate_bounds(bounds)?;
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut history = Vec::new();

    let initial: Vec<Vec<f64>> = (0..cfg.population).map(|_| sample_uniform(&mut rng, bounds)).collect();
    let Some(fitness) = evaluate_into(objective, &initial, 0, &mut history) else {
        return Ok(history);
    };
    let mut pop = GaPopulation {
        individuals: initial,
        fitness,
        generation: 0,
    };
    while cfg.max_generations.is_none_or(|g| pop.generation < g) && !objective.exhausted() {
        let children = ga_offspring(&pop, cfg, bounds, &mut rng);
        let Some(fitness) = evaluate_into(objective, &children, pop.generation + 1, &mut history) else {
            break;
        };
        pop = ga_replace(&pop, cfg, children, fitness);
    }
    Ok(history)
}

/// Appends evaluated points to the history; `None` when the objective
/// truncated the batch.
fn evaluate_into(
    objective: &mut dyn Objective,
    batch: &[Vec<f64>],
    round: usize,
    history: &mut Vec<HistoryEntry>,
) -> Option<Vec<f64>> {
    let evals = objective.evaluate(batch);
    for (z, e) in batch.iter().zip(&evals) {
        history.push(HistoryEntry {
            point: z.clone(),
            latent: z.clone(),
            value: e.value,
            penalized: e.penalized,
            round,
        });
    }
    (evals.len() == batch.len()).then(|| evals.iter().map(|e| e.value).collect())
}
