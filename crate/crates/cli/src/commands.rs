//! Subcommand implementations.

use camd_core::ad::{self, AdEnsemble};
use camd_core::design_loop::{self, DesignContext, DesignError, RunOutcome};
use camd_core::gnn::{GnnEnsemble, Labels, NUM_TASKS, TASK_NAMES};
use camd_core::grammar::{FragmentGrammar, GrammarConfig};
use camd_core::io::{self, AdSection, Checkpoint, GnnSection, IoError};
use camd_core::optimizer::{pca_fit, OptimizerConfig};
use camd_core::{parse_smiles, MolecularGraph};
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::config::{self, EnumerateConfig, FitAdConfig, ReportConfig, RunLoopConfig, TrainGnnConfig};
use crate::Common;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Runtime,
}

impl ErrorKind {
    pub fn exit_code(self) -> u8 {
        match self {
            ErrorKind::Config => 1,
            ErrorKind::Runtime => 2,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub code: &'static str,
    pub message: String,
}

impl CliError {
    pub fn config(code: &'static str, message: impl Into<String>) -> Self {
        CliError {
            kind: ErrorKind::Config,
            code,
            message: message.into(),
        }
    }

    pub fn runtime(code: &'static str, message: impl Into<String>) -> Self {
        CliError {
            kind: ErrorKind::Runtime,
            code,
            message: message.into(),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn input_error(code: &'static str, e: IoError) -> CliError {
    CliError::config(code, e.to_string())
}

fn output_error(e: IoError) -> CliError {
    CliError::runtime("OUTPUT_WRITE", e.to_string())
}

fn prepare_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::runtime("OUTPUT_WRITE", format!("{}: {e}", dir.display())))
}

/// Flag value (relative to the working directory) or config value (relative
/// to the config file).
fn pick_path(flag: Option<PathBuf>, from_config: Option<&PathBuf>, base: &Path, code: &'static str, what: &str) -> Result<PathBuf> {
    flag.or_else(|| from_config.map(|p| config::resolve(base, p)))
        .ok_or_else(|| CliError::config(code, format!("no {what} given (flag or config)")))
}

fn load_grammar(path: Option<&PathBuf>, base: &Path) -> Result<FragmentGrammar> {
    match path {
        None => Ok(FragmentGrammar::default()),
        Some(p) => {
            let p = config::resolve(base, p);
            let cfg: GrammarConfig = io::read_json(&p).map_err(|e| input_error("GRAMMAR_INVALID", e))?;
            FragmentGrammar::new(cfg).map_err(|e| CliError::config("GRAMMAR_INVALID", format!("{}: {e}", p.display())))
        }
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    io::load_checkpoint(path).map_err(|e| input_error("CHECKPOINT_INVALID", e))
}

fn require_gnn(c: &Checkpoint) -> Result<&GnnSection> {
    c.gnn
        .as_ref()
        .ok_or_else(|| CliError::config("CHECKPOINT_NO_GNN", "checkpoint missing GNN section"))
}

pub fn train_gnn(common: &Common, dataset: Option<PathBuf>, size: Option<usize>, epochs: Option<usize>) -> Result<()> {
    let (mut cfg, base) = config::load::<TrainGnnConfig>(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.train.seed = cfg.seed;
    if let Some(k) = size {
        cfg.ensemble_size = k;
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if cfg.ensemble_size == 0 {
        return Err(CliError::config("CONFIG_INVALID", "ensemble_size must be positive"));
    }
    let dataset_path = pick_path(dataset, cfg.dataset.as_ref(), &base, "DATASET_MISSING", "dataset")?;
    let grammar = load_grammar(cfg.grammar.as_ref(), &base)?;
    let ds = io::ingest_dataset(&dataset_path).map_err(|e| input_error("DATASET_INVALID", e))?;
    if !ds.rejected.is_empty() {
        log::warn!("{} dataset rows rejected", ds.rejected.len());
    }
    let data = ds.training_pairs();
    log::info!(
        "training {} GNNs on {} molecules for {} epochs",
        cfg.ensemble_size,
        data.len(),
        cfg.train.epochs
    );
    let mut ensemble = GnnEnsemble::new(cfg.architecture.clone(), cfg.ensemble_size, cfg.seed);
    let report = ensemble
        .train(&data, &cfg.train)
        .map_err(|e| CliError::runtime("TRAINING_FAILED", e.to_string()))?;
    log_training_error(&ensemble, &data);

    prepare_out(&common.out)?;
    let mut ckpt = Checkpoint::new(grammar.hash());
    ckpt.gnn = Some(GnnSection {
        ensemble,
        train_config: cfg.train.clone(),
        training_molecules: data.len(),
    });
    io::write_json(&common.out.join("checkpoint.json"), &ckpt).map_err(output_error)?;
    io::write_json(&common.out.join("loss_curves.json"), &report).map_err(output_error)?;
    Ok(())
}

fn log_training_error(ensemble: &GnnEnsemble, data: &[(MolecularGraph, Labels)]) {
    let mut abs = [0.0; NUM_TASKS];
    let mut n = [0usize; NUM_TASKS];
    for (g, l) in data {
        let Ok(p) = ensemble.predict(g) else { continue };
        let pred = [p.ron, p.mon, p.dcn];
        for t in 0..NUM_TASKS {
            if let Some(y) = l.0[t] {
                abs[t] += (pred[t] - y).abs();
                n[t] += 1;
            }
        }
    }
    for t in 0..NUM_TASKS {
        if n[t] > 0 {
            log::info!("train MAE {}: {:.4}", TASK_NAMES[t], abs[t] / n[t] as f64);
        }
    }
}

pub fn fit_ad(common: &Common, dataset: Option<PathBuf>, checkpoint: Option<PathBuf>) -> Result<()> {
    let (mut cfg, base) = config::load::<FitAdConfig>(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if !(cfg.consensus > 0.0 && cfg.consensus < 1.0) {
        return Err(CliError::config("CONFIG_INVALID", "consensus must be in (0, 1)"));
    }
    let ckpt_path = pick_path(checkpoint, cfg.checkpoint.as_ref(), &base, "CHECKPOINT_MISSING", "checkpoint")?;
    let mut ckpt = load_checkpoint(&ckpt_path)?;
    let gnn = require_gnn(&ckpt)?;
    let dataset_path = pick_path(dataset, cfg.dataset.as_ref(), &base, "DATASET_MISSING", "dataset")?;
    let ds = io::ingest_dataset(&dataset_path).map_err(|e| input_error("DATASET_INVALID", e))?;
    let graphs = ds.graphs();

    let per_model: Vec<Vec<Vec<f64>>> = gnn
        .ensemble
        .models
        .iter()
        .map(|m| {
            graphs
                .iter()
                .map(|g| m.forward(g).map(|(fp, _)| fp.0))
                .collect::<std::result::Result<Vec<_>, _>>()
        })
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| CliError::runtime("FINGERPRINT_FAILED", e.to_string()))?;

    let grid = if cfg.grid_search {
        Some(
            ad::grid_search_hyperparams(&per_model[0], &cfg.gamma_grid, &cfg.nu_grid, cfg.solver)
                .map_err(|e| ad_error(e))?,
        )
    } else {
        None
    };
    let gamma = match (&grid, cfg.use_grid_selection) {
        (Some(g), true) => g.selected_gamma,
        _ => cfg.gamma,
    };
    let mut ensemble = ad::fit_ensemble(&per_model, cfg.nu, gamma, cfg.solver).map_err(ad_error)?;
    ensemble.consensus = cfg.consensus;
    log_training_acceptance(&ensemble, &per_model);

    prepare_out(&common.out)?;
    if let Some(g) = &grid {
        io::write_json(&common.out.join("ad_grid.json"), g).map_err(output_error)?;
    }
    ckpt.ad = Some(AdSection {
        ensemble,
        nu: cfg.nu,
        gamma,
        grid,
    });
    io::write_json(&common.out.join("checkpoint.json"), &ckpt).map_err(output_error)?;
    Ok(())
}

fn ad_error(e: ad::AdError) -> CliError {
    match e {
        ad::AdError::InvalidParameter(_) => CliError::config("CONFIG_INVALID", e.to_string()),
        ad::AdError::DegenerateData => CliError::runtime("AD_DEGENERATE", e.to_string()),
        _ => CliError::runtime("AD_FIT_FAILED", e.to_string()),
    }
}

fn log_training_acceptance(ad: &AdEnsemble, per_model: &[Vec<Vec<f64>>]) {
    let n = per_model[0].len();
    let inside = (0..n)
        .filter(|&i| {
            let signs: Vec<bool> = ad.svms.iter().zip(per_model).map(|(s, fps)| s.decision(&fps[i]) >= 0.0).collect();
            ad::tally(&signs, ad.consensus).inside
        })
        .count();
    log::info!("AD accepts {inside} of {n} training molecules");
}

fn read_corpus(path: &Path) -> Result<Vec<MolecularGraph>> {
    let lines = io::read_smiles_list(path).map_err(|e| input_error("CORPUS_INVALID", e))?;
    let mut out = Vec::with_capacity(lines.len());
    for (line, s) in lines {
        match parse_smiles(&s) {
            Ok(g) => out.push(g),
            Err(e) => log::warn!("{}:{line}: skipping \"{s}\": {e}", path.display()),
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    summary: &'a design_loop::RunSummary,
    stop_reason: design_loop::StopReason,
    seed: u64,
    config: &'a RunLoopConfig,
    grammar_hash: &'a str,
}

#[derive(Serialize)]
struct Metadata {
    elapsed_secs: f64,
    records: usize,
}

pub fn run_loop(
    common: &Common,
    checkpoint: Option<PathBuf>,
    corpus: Option<PathBuf>,
    max_total: Option<usize>,
    max_unique: Option<usize>,
    time_limit: Option<f64>,
) -> Result<()> {
    let (mut cfg, base) = config::load::<RunLoopConfig>(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.run.seed = s;
    }
    if max_total.is_some() {
        cfg.run.stop.max_total = max_total;
    }
    if max_unique.is_some() {
        cfg.run.stop.max_unique = max_unique;
    }
    if time_limit.is_some() {
        cfg.run.stop.time_limit_secs = time_limit;
    }
    cfg.run
        .validate()
        .map_err(|e| CliError::config("CONFIG_INVALID", e.to_string()))?;

    let ckpt_path = pick_path(checkpoint, cfg.checkpoint.as_ref(), &base, "CHECKPOINT_MISSING", "checkpoint")?;
    let corpus_path = pick_path(corpus, cfg.corpus.as_ref(), &base, "CORPUS_MISSING", "corpus")?;
    let ckpt = load_checkpoint(&ckpt_path)?;
    let gnn = require_gnn(&ckpt)?;
    if cfg.run.ad_enabled && ckpt.ad.is_none() {
        return Err(CliError::config("CHECKPOINT_NO_AD", "checkpoint missing AD section"));
    }
    let grammar = load_grammar(cfg.grammar.as_ref(), &base)?;
    if grammar.hash() != ckpt.grammar_hash {
        return Err(CliError::config(
            "GRAMMAR_MISMATCH",
            "grammar differs from the one recorded in the checkpoint",
        ));
    }

    let corpus = read_corpus(&corpus_path)?;
    let bounds = design_loop::bounds_from_corpus(&corpus, &grammar, cfg.run.bound_expansion)
        .map_err(|e| CliError::config("CORPUS_NOT_EXPRESSIBLE", e.to_string()))?;
    let pca = match &cfg.run.optimizer {
        OptimizerConfig::Bo(bo) => {
            let latents = design_loop::encode_corpus(&corpus, &grammar);
            match pca_fit(&latents, bo.pca_target) {
                Ok(p) => {
                    log::info!("PCA: {} -> {} dims", p.input_dim(), p.reduced_dim());
                    Some(p)
                }
                Err(e) => {
                    log::warn!("PCA skipped: {e}");
                    None
                }
            }
        }
        OptimizerConfig::Ga(_) => None,
    };
    let ctx = DesignContext {
        grammar: Arc::new(grammar),
        ensemble: gnn.ensemble.clone(),
        ad: ckpt.ad.as_ref().map(|a| a.ensemble.clone()),
        bounds,
        pca,
    };
    let RunOutcome {
        records,
        summary,
        stop_reason,
        elapsed_secs,
    } = design_loop::run(&cfg.run, &ctx).map_err(|e| match e {
        DesignError::Optimizer(_) => CliError::runtime("OPTIMIZER_FAILED", e.to_string()),
        DesignError::CheckpointMismatch(_) => CliError::config("CHECKPOINT_MISMATCH", e.to_string()),
        _ => CliError::config("CONFIG_INVALID", e.to_string()),
    })?;
    log::info!(
        "{} records, {} unique, max score {:?}, stopped by {stop_reason:?}",
        summary.total,
        summary.unique,
        summary.max_score
    );

    prepare_out(&common.out)?;
    io::write_records(&common.out.join("records.ndjson"), &records).map_err(output_error)?;
    io::write_json(
        &common.out.join("summary.json"),
        &SummaryFile {
            summary: &summary,
            stop_reason,
            seed: cfg.run.seed,
            config: &cfg,
            grammar_hash: &ckpt.grammar_hash,
        },
    )
    .map_err(output_error)?;
    io::write_json(
        &common.out.join("metadata.json"),
        &Metadata {
            elapsed_secs,
            records: records.len(),
        },
    )
    .map_err(output_error)?;
    Ok(())
}

pub fn report(common: &Common, records: Option<PathBuf>) -> Result<()> {
    let (cfg, base) = config::load::<ReportConfig>(common.config.as_deref())?;
    let path = pick_path(records, cfg.records.as_ref(), &base, "RECORDS_MISSING", "records file")?;
    let records = io::read_records(&path).map_err(|e| input_error("RECORDS_INVALID", e))?;
    if records.is_empty() {
        return Err(CliError::config("RECORDS_INVALID", format!("{}: no records", path.display())));
    }
    let report = io::build_report(&records);
    prepare_out(&common.out)?;
    io::write_json(&common.out.join("report.json"), &report).map_err(output_error)?;

    let s = &report.summary;
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"));
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "max             {}", fmt(s.max_score));
    let _ = writeln!(out, "mean top 20     {}", fmt(s.mean_top20));
    let _ = writeln!(out, "# unique mol.   {}", s.unique);
    let _ = writeln!(out, "# promising mol. {}", s.promising);
    for p in &report.promising {
        let _ = writeln!(out, "  {}  ron {:.2}  os {:.2}  score {:.2}", p.smiles, p.ron, p.os, p.score);
    }
    Ok(())
}

pub fn enumerate(common: &Common) -> Result<()> {
    let (cfg, base) = config::load::<EnumerateConfig>(common.config.as_deref())?;
    let grammar = load_grammar(cfg.grammar.as_ref(), &base)?;
    let molecules = grammar
        .enumerate()
        .map_err(|e| CliError::config("GRAMMAR_TOO_LARGE", e.to_string()))?;
    prepare_out(&common.out)?;
    let path = common.out.join("molecules.csv");
    let write = || -> std::io::Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(&path)?);
        writeln!(w, "smiles,heavy_atoms,decision")?;
        for (smiles, (g, d)) in &molecules {
            let steps: Vec<String> = d.attachments.iter().map(|a| format!("{}@{}", a.fragment, a.site)).collect();
            writeln!(w, "{smiles},{},{}:{}", g.num_atoms(), d.scaffold, steps.join(";"))?;
        }
        w.flush()
    };
    write().map_err(|e| CliError::runtime("OUTPUT_WRITE", format!("{}: {e}", path.display())))?;
    log::info!("{} molecules written to {}", molecules.len(), path.display());
    Ok(())
}
