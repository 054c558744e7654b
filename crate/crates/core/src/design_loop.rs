//! The design loop: propose latent points, decode, screen with the
//! applicability domain, predict, score, and record.

use crate::ad::{AdEnsemble, Vote};
use crate::gnn::{average, GnnEnsemble, PropertyPrediction};
use crate::grammar::{FragmentGrammar, LatentBox};
use crate::molgraph::{MolecularGraph, ATOM_FEATURE_DIM};
use crate::optimizer::{self, Evaluation, HistoryEntry, Objective, OptimizerConfig, OptimizerError, PcaModel};
use crate::smiles::canonical_smiles;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::{mpsc, Arc};
use std::time::{Duration, Instant};
use thiserror::Error;

pub const RUN_CONFIG_VERSION: u32 = 1;
pub const DEFAULT_PENALTY: f64 = -1000.0;
pub const PROMISING_RON: f64 = 110.0;
pub const PROMISING_OS: f64 = 10.0;
pub const TOP_K: usize = 20;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DesignError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error("no corpus molecule is expressible by the grammar")]
    NoExpressibleMolecules,
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StopCriteria {
    pub max_unique: Option<usize>,
    pub max_total: Option<usize>,
    pub time_limit_secs: Option<f64>,
}

impl Default for StopCriteria {
    fn default() -> Self {
        StopCriteria {
            max_unique: Some(1000),
            max_total: Some(2000),
            time_limit_secs: Some(12.0 * 3600.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub stop: StopCriteria,
    pub bound_expansion: f64,
    pub decode_timeout_secs: f64,
    pub penalty: f64,
    pub ad_enabled: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: RUN_CONFIG_VERSION,
            seed: 0,
            optimizer: OptimizerConfig::default(),
            stop: StopCriteria::default(),
            bound_expansion: 0.2,
            decode_timeout_secs: 10.0,
            penalty: DEFAULT_PENALTY,
            ad_enabled: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), DesignError> {
        let bad = |msg: &str| Err(DesignError::Config(msg.into()));
        if self.version != RUN_CONFIG_VERSION {
            return Err(DesignError::Config(format!(
                "unsupported run config version {} (expected {RUN_CONFIG_VERSION})",
                self.version
            )));
        }
        if self.stop.max_unique == Some(0) || self.stop.max_total == Some(0) {
            return bad("stop limits must be positive");
        }
        if self.stop.time_limit_secs.is_some_and(|t| !(t > 0.0)) {
            return bad("time limit must be positive");
        }
        if self.stop.max_unique.is_none() && self.stop.max_total.is_none() && self.stop.time_limit_secs.is_none() {
            return bad("at least one stopping criterion is required");
        }
        if !(self.bound_expansion >= 0.0 && self.bound_expansion.is_finite()) {
            return bad("bound expansion must be a finite non-negative fraction");
        }
        if !(self.decode_timeout_secs > 0.0) {
            return bad("decode timeout must be positive");
        }
        if !self.penalty.is_finite() {
            return bad("penalty must be finite");
        }
        match &self.optimizer {
            OptimizerConfig::Bo(c) => c.validate()?,
            OptimizerConfig::Ga(c) => c.validate()?,
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub iteration: usize,
    /// Point in the optimizer's reduced space, when PCA is in use.
    pub latent_reduced: Option<Vec<f64>>,
    pub latent: Vec<f64>,
    pub smiles: Option<String>,
    pub predictions: Option<PropertyPrediction>,
    pub score: f64,
    pub in_ad: Option<bool>,
    pub vote_sum: Option<i64>,
    pub duplicate: bool,
    pub penalty_applied: bool,
    /// Machine-readable fault code for penalized evaluations that never
    /// reached the AD gate (e.g. `decode_timeout`).
    pub fault: Option<String>,
}

/// Everything a run needs besides its configuration.
#[derive(Debug, Clone)]
pub struct DesignContext {
    pub grammar: Arc<FragmentGrammar>,
    pub ensemble: GnnEnsemble,
    pub ad: Option<AdEnsemble>,
    /// Box every proposed latent is drawn from.
    pub bounds: LatentBox,
    /// Optional reduction for Bayesian optimization.
    pub pca: Option<PcaModel>,
}

impl DesignContext {
    pub fn check(&self, cfg: &RunConfig) -> Result<(), DesignError> {
        let dim = self.grammar.latent_dim();
        if self.bounds.dim() != dim {
            return Err(DesignError::CheckpointMismatch(format!(
                "bounds have {} dims, grammar expects {dim}",
                self.bounds.dim()
            )));
        }
        if self.ensemble.is_empty() {
            return Err(DesignError::CheckpointMismatch("GNN ensemble is empty".into()));
        }
        if let Some(m) = self.ensemble.models.iter().find(|m| m.architecture.input_dim != ATOM_FEATURE_DIM) {
            return Err(DesignError::CheckpointMismatch(format!(
                "GNN expects {} atom features, molecules provide {ATOM_FEATURE_DIM}",
                m.architecture.input_dim
            )));
        }
        if cfg.ad_enabled {
            let Some(ad) = &self.ad else {
                return Err(DesignError::CheckpointMismatch("AD enabled but checkpoint has no AD section".into()));
            };
            if ad.len() != self.ensemble.len() {
                return Err(DesignError::CheckpointMismatch(format!(
                    "{} SVMs for {} GNNs",
                    ad.len(),
                    self.ensemble.len()
                )));
            }
            for (svm, m) in ad.svms.iter().zip(&self.ensemble.models) {
                if svm.dim() != m.architecture.fingerprint_dim() {
                    return Err(DesignError::CheckpointMismatch(format!(
                        "SVM fingerprint dim {} vs GNN fingerprint dim {}",
                        svm.dim(),
                        m.architecture.fingerprint_dim()
                    )));
                }
            }
        }
        if let Some(p) = &self.pca {
            if p.input_dim() != dim {
                return Err(DesignError::CheckpointMismatch(format!(
                    "PCA input dim {} vs latent dim {dim}",
                    p.input_dim()
                )));
            }
        }
        Ok(())
    }
}

/// Per-dimension `[min − e·(max − min), max + e·(max − min)]`; constant
/// dimensions get `±0.5`.
pub fn bounds_from_latents(latents: &[Vec<f64>], expansion: f64) -> Option<LatentBox> {
    let d = latents.first()?.len();
    let mut lower = vec![f64::INFINITY; d];
    let mut upper = vec![f64::NEG_INFINITY; d];
    for z in latents {
        for j in 0..d {
            lower[j] = lower[j].min(z[j]);
            upper[j] = upper[j].max(z[j]);
        }
    }
    for j in 0..d {
        let span = upper[j] - lower[j];
        if span > 0.0 {
            lower[j] -= expansion * span;
            upper[j] += expansion * span;
        } else {
            lower[j] -= 0.5;
            upper[j] += 0.5;
        }
    }
    Some(LatentBox::new(lower, upper))
}

/// Encodes the corpus and expands its bounding box. Molecules the grammar
/// cannot express are skipped.
pub fn bounds_from_corpus(
    corpus: &[MolecularGraph],
    grammar: &FragmentGrammar,
    expansion: f64,
) -> Result<LatentBox, DesignError> {
    let latents = encode_corpus(corpus, grammar);
    bounds_from_latents(&latents, expansion).ok_or(DesignError::NoExpressibleMolecules)
}

pub fn encode_corpus(corpus: &[MolecularGraph], grammar: &FragmentGrammar) -> Vec<Vec<f64>> {
    let latents: Vec<Vec<f64>> = corpus.iter().filter_map(|g| grammar.encode(g).ok().map(|z| z.0)).collect();
    if latents.len() < corpus.len() {
        log::warn!(
            "{} of {} corpus molecules are not expressible by the grammar",
            corpus.len() - latents.len(),
            corpus.len()
        );
    }
    latents
}

/// Decodes on a worker thread, giving up after `timeout`.
pub fn decode_with_timeout(
    grammar: &Arc<FragmentGrammar>,
    z: &[f64],
    bounds: &LatentBox,
    timeout: Duration,
) -> Option<MolecularGraph> {
    let (tx, rx) = mpsc::channel();
    let (grammar, z, bounds) = (Arc::clone(grammar), z.to_vec(), bounds.clone());
    std::thread::spawn(move || {
        let _ = tx.send(grammar.decode(&z, &bounds));
    });
    match rx.recv_timeout(timeout) {
        Ok(Ok(g)) => Some(g),
        Ok(Err(e)) => {
            log::warn!("decode failed: {e}");
            None
        }
        Err(_) => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Assessment {
    prediction: Option<PropertyPrediction>,
    vote: Option<Vote>,
    fault: Option<String>,
}

fn assess(ctx: &DesignContext, cfg: &RunConfig, g: &MolecularGraph) -> Assessment {
    let outputs = match ctx.ensemble.forward_all(g) {
        Ok(o) => o,
        Err(e) => {
            return Assessment {
                prediction: None,
                vote: None,
                fault: Some(format!("prediction_failed: {e}")),
            }
        }
    };
    let vote = match (&ctx.ad, cfg.ad_enabled) {
        (Some(ad), true) => {
            let fps: Vec<_> = outputs.iter().map(|(fp, _)| fp.clone()).collect();
            match ad.vote(&fps) {
                Ok(v) => Some(v),
                Err(e) => {
                    return Assessment {
                        prediction: None,
                        vote: None,
                        fault: Some(format!("ad_failed: {e}")),
                    }
                }
            }
        }
        _ => None,
    };
    let prediction = if vote.is_none_or(|v| v.inside) {
        average(&outputs.into_iter().map(|(_, p)| p).collect::<Vec<_>>()).ok()
    } else {
        None
    };
    Assessment {
        prediction,
        vote,
        fault: None,
    }
}

fn make_record(z: &[f64], smiles: Option<String>, a: &Assessment, penalty: f64) -> RunRecord {
    let (score, penalty_applied) = match &a.prediction {
        Some(p) if a.fault.is_none() => (p.score(), false),
        _ => (penalty, true),
    };
    RunRecord {
        iteration: 0,
        latent_reduced: None,
        latent: z.to_vec(),
        smiles,
        predictions: if penalty_applied { None } else { a.prediction },
        score,
        in_ad: a.vote.map(|v| v.inside),
        vote_sum: a.vote.map(|v| v.sum),
        duplicate: false,
        penalty_applied,
        fault: a.fault.clone(),
    }
}

/// Scores one latent point in isolation (no duplicate bookkeeping).
pub fn evaluate_candidate(z: &[f64], ctx: &DesignContext, cfg: &RunConfig) -> RunRecord {
    let timeout = Duration::from_secs_f64(cfg.decode_timeout_secs);
    match decode_with_timeout(&ctx.grammar, z, &ctx.bounds, timeout) {
        Some(g) => make_record(z, Some(canonical_smiles(&g)), &assess(ctx, cfg, &g), cfg.penalty),
        None => make_record(z, None, &decode_timeout(), cfg.penalty),
    }
}

fn decode_timeout() -> Assessment {
    Assessment {
        prediction: None,
        vote: None,
        fault: Some("decode_timeout".into()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    UniqueLimit,
    TotalLimit,
    TimeLimit,
    OptimizerFinished,
}

struct LoopObjective<'a> {
    ctx: &'a DesignContext,
    cfg: &'a RunConfig,
    records: Vec<RunRecord>,
    seen: HashSet<String>,
    cache: HashMap<String, Assessment>,
    start: Instant,
    stop: Option<StopReason>,
}

impl LoopObjective<'_> {
    fn time_up(&self) -> bool {
        self.cfg
            .stop
            .time_limit_secs
            .is_some_and(|t| self.start.elapsed().as_secs_f64() >= t)
    }
}

impl Objective for LoopObjective<'_> {
    fn evaluate(&mut self, batch: &[Vec<f64>]) -> Vec<Evaluation> {
        if self.stop.is_some() {
            return Vec::new();
        }
        let timeout = Duration::from_secs_f64(self.cfg.decode_timeout_secs);
        let decoded: Vec<Option<(MolecularGraph, String)>> = batch
            .par_iter()
            .map(|z| {
                decode_with_timeout(&self.ctx.grammar, z, &self.ctx.bounds, timeout).map(|g| {
                    let s = canonical_smiles(&g);
                    (g, s)
                })
            })
            .collect();

        let mut fresh: BTreeMap<&str, &MolecularGraph> = BTreeMap::new();
        for (g, s) in decoded.iter().flatten() {
            if !self.cache.contains_key(s) {
                fresh.entry(s.as_str()).or_insert(g);
            }
        }
        let assessed: Vec<(String, Assessment)> = fresh
            .into_par_iter()
            .map(|(s, g)| (s.to_string(), assess(self.ctx, self.cfg, g)))
            .collect();
        self.cache.extend(assessed);

        let mut out = Vec::with_capacity(batch.len());
        for (z, d) in batch.iter().zip(decoded) {
            if self.time_up() {
                self.stop = Some(StopReason::TimeLimit);
                break;
            }
            let mut rec = match d {
                Some((_, s)) => {
                    let a = &self.cache[&s];
                    make_record(z, Some(s), a, self.cfg.penalty)
                }
                None => make_record(z, None, &decode_timeout(), self.cfg.penalty),
            };
            rec.iteration = self.records.len();
            if let Some(s) = &rec.smiles {
                rec.duplicate = !self.seen.insert(s.clone());
            }
            out.push(Evaluation {
                value: rec.score,
                penalized: rec.penalty_applied,
            });
            self.records.push(rec);
            if self.cfg.stop.max_unique.is_some_and(|m| self.seen.len() >= m) {
                self.stop = Some(StopReason::UniqueLimit);
            } else if self.cfg.stop.max_total.is_some_and(|m| self.records.len() >= m) {
                self.stop = Some(StopReason::TotalLimit);
            }
            if self.stop.is_some() {
                break;
            }
        }
        out
    }

    fn exhausted(&self) -> bool {
        self.stop.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub total: usize,
    pub unique: usize,
    pub duplicates: usize,
    pub penalized: usize,
    pub max_score: Option<f64>,
    pub best_smiles: Option<String>,
    pub mean_top20: Option<f64>,
    pub promising: usize,
    /// No non-penalized records.
    pub empty: bool,
}

pub fn is_promising(p: &PropertyPrediction) -> bool {
    p.ron > PROMISING_RON && p.os > PROMISING_OS
}

/// Best non-penalized record per canonical SMILES, highest score first
/// (ties by SMILES).
pub fn best_per_molecule(records: &[RunRecord]) -> Vec<&RunRecord> {
    let mut best: BTreeMap<&str, &RunRecord> = BTreeMap::new();
    for r in records.iter().filter(|r| !r.penalty_applied) {
        let Some(s) = r.smiles.as_deref() else { continue };
        best.entry(s)
            .and_modify(|b| {
                if r.score > b.score {
                    *b = r;
                }
            })
            .or_insert(r);
    }
    let mut v: Vec<&RunRecord> = best.into_values().collect();
    v.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.smiles.cmp(&b.smiles)));
    v
}

pub fn summarize(records: &[RunRecord]) -> RunSummary {
    let unique = records
        .iter()
        .filter_map(|r| r.smiles.as_deref())
        .collect::<HashSet<_>>()
        .len();
    let ranked = best_per_molecule(records);
    let top = &ranked[..ranked.len().min(TOP_K)];
    RunSummary {
        total: records.len(),
        unique,
        duplicates: records.iter().filter(|r| r.duplicate).count(),
        penalized: records.iter().filter(|r| r.penalty_applied).count(),
        max_score: ranked.first().map(|r| r.score),
        best_smiles: ranked.first().and_then(|r| r.smiles.clone()),
        mean_top20: (!top.is_empty()).then(|| top.iter().map(|r| r.score).sum::<f64>() / top.len() as f64),
        promising: ranked
            .iter()
            .filter(|r| r.predictions.as_ref().is_some_and(is_promising))
            .count(),
        empty: ranked.is_empty(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub records: Vec<RunRecord>,
    pub summary: RunSummary,
    pub stop_reason: StopReason,
    pub elapsed_secs: f64,
}

pub fn run(cfg: &RunConfig, ctx: &DesignContext) -> Result<RunOutcome, DesignError> {
    cfg.validate()?;
    ctx.check(cfg)?;
    let mut objective = LoopObjective {
        ctx,
        cfg,
        records: Vec::new(),
        seen: HashSet::new(),
        cache: HashMap::new(),
        start: Instant::now(),
        stop: None,
    };
    let history: Vec<HistoryEntry> = match &cfg.optimizer {
        OptimizerConfig::Bo(c) => optimizer::run_bo(&mut objective, &ctx.bounds, c, ctx.pca.as_ref(), cfg.seed)?,
        OptimizerConfig::Ga(c) => optimizer::run_ga(&mut objective, &ctx.bounds, c, cfg.seed)?,
    };
    let elapsed_secs = objective.start.elapsed().as_secs_f64();
    let stop_reason = objective.stop.unwrap_or(StopReason::OptimizerFinished);
    let mut records = objective.records;
    debug_assert_eq!(records.len(), history.len());
    if matches!(cfg.optimizer, OptimizerConfig::Bo(_)) && ctx.pca.is_some() {
        for (r, h) in records.iter_mut().zip(&history) {
            r.latent_reduced = Some(h.point.clone());
        }
    }
    let summary = summarize(&records);
    Ok(RunOutcome {
        records,
        summary,
        stop_reason,
        elapsed_secs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smiles::parse_smiles;

    fn rec(smiles: &str, ron: f64, mon: f64, penalized: bool) -> RunRecord {
        let p = PropertyPrediction::new(ron, mon, 0.0);
        RunRecord {
            iteration: 0,
            latent_reduced: None,
            latent: vec![],
            smiles: Some(smiles.into()),
            predictions: (!penalized).then_some(p),
            score: if penalized { DEFAULT_PENALTY } else { p.score() },
            in_ad: None,
            vote_sum: None,
            duplicate: false,
            penalty_applied: penalized,
            fault: None,
        }
    }

    #[test]
    fn bounds_rule() {
        let b = bounds_from_latents(&[vec![0.0, 3.0], vec![10.0, 3.0], vec![4.0, 3.0]], 0.2).unwrap();
        assert_eq!(b.lower, vec![-2.0, 2.5]);
        assert_eq!(b.upper, vec![12.0, 3.5]);
        let b = bounds_from_latents(&[vec![0.0], vec![10.0]], 0.0).unwrap();
        assert_eq!((b.lower[0], b.upper[0]), (0.0, 10.0));
        assert!(bounds_from_latents(&[], 0.2).is_none());
    }

    #[test]
    fn corpus_without_expressible_molecules() {
        let g = FragmentGrammar::default();
        let big = parse_smiles("CCCCCCCCCCCC").unwrap();
        assert_eq!(
            bounds_from_corpus(&[big], &g, 0.2),
            Err(DesignError::NoExpressibleMolecules)
        );
    }

    #[test]
    fn score_arithmetic() {
        let p = PropertyPrediction::new(116.0, 102.0, 0.0);
        assert_eq!(p.score(), 130.0);
        assert_eq!(p.score(), p.ron + p.os);
        let mtbe = PropertyPrediction::new(118.0, 118.0 - 17.0, 0.0);
        assert_eq!(mtbe.score(), 135.0);
    }

    #[test]
    fn summary_statistics() {
        let s = summarize(&[rec("A", 130.0, 130.0, false), rec("B", 120.0, 120.0, false), rec("C", 0.0, 0.0, true)]);
        assert_eq!(s.max_score, Some(130.0));
        assert_eq!(s.mean_top20, Some(125.0));
        assert_eq!(s.unique, 3);
        assert!(!s.empty);

        let s = summarize(&[rec("C", 0.0, 0.0, true)]);
        assert!(s.empty);
        assert_eq!(s.max_score, None);

        let many: Vec<RunRecord> = (0..25).map(|i| rec(&format!("M{i}"), i as f64, 0.0, false)).collect();
        let s = summarize(&many);
        let expect = (5..25).map(|i| 2.0 * i as f64).sum::<f64>() / 20.0;
        assert_eq!(s.mean_top20, Some(expect));
    }

    #[test]
    fn duplicates_use_best_score_per_molecule() {
        let mut a = rec("A", 10.0, 0.0, false);
        let mut b = rec("A", 12.0, 0.0, false);
        b.duplicate = true;
        a.iteration = 0;
        b.iteration = 1;
        let s = summarize(&[a, b, rec("B", 1.0, 0.0, false)]);
        assert_eq!(s.max_score, Some(24.0));
        assert_eq!(s.mean_top20, Some(13.0));
        assert_eq!(s.unique, 2);
        assert_eq!(s.duplicates, 1);
    }

    #[test]
    fn promising_is_strict() {
        assert!(is_promising(&PropertyPrediction::new(115.0, 101.0, 0.0)));
        assert!(!is_promising(&PropertyPrediction::new(110.0, 94.0, 0.0)));
        assert!(!is_promising(&PropertyPrediction::new(120.0, 110.0, 0.0)));
        let s = summarize(&[rec("MTBE", 115.0, 101.0, false), rec("C1CC1", 110.0, 94.0, false)]);
        assert_eq!(s.promising, 1);
    }

    #[test]
    fn config_validation() {
        assert!(RunConfig::default().validate().is_ok());
        let mut c = RunConfig::default();
        c.stop.max_total = Some(0);
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.bound_expansion = -0.1;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.version = 99;
        assert!(c.validate().is_err());
    }
}
