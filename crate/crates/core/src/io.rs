//! Files: property datasets (CSV), checkpoints, run records (NDJSON),
//! summaries and reports (JSON).

use crate::ad::{AdEnsemble, Gamma, GridSearch};
use crate::design_loop::{best_per_molecule, is_promising, summarize, RunRecord, RunSummary, PROMISING_OS, PROMISING_RON};
use crate::gnn::{GnnEnsemble, Labels, TrainConfig};
use crate::molgraph::MolecularGraph;
use crate::smiles::{canonical_smiles, parse_smiles};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const DATASET_HEADER: [&str; 4] = ["smiles", "ron", "mon", "dcn"];
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset header must be \"smiles,ron,mon,dcn\", found \"{found}\"")]
    HeaderMismatch { found: String },
    #[error("no valid dataset rows ({rejected} rejected)")]
    AllRowsInvalid { rejected: usize },
    #[error("malformed CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("{path}: invalid JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}:{line}: invalid record: {source}")]
    Record {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("unsupported checkpoint version {found} (expected {CHECKPOINT_VERSION})")]
    CheckpointVersion { found: u32 },
    #[error("checkpoint inconsistent: {0}")]
    CheckpointMismatch(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRow {
    /// 1-based line number in the source file.
    pub line: usize,
    pub smiles: String,
    pub canonical: String,
    pub graph: MolecularGraph,
    pub labels: Labels,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PropertyDataset {
    pub rows: Vec<DatasetRow>,
    pub rejected: Vec<RowError>,
}

impl PropertyDataset {
    pub fn training_pairs(&self) -> Vec<(MolecularGraph, Labels)> {
        self.rows.iter().map(|r| (r.graph.clone(), r.labels)).collect()
    }

    pub fn graphs(&self) -> Vec<MolecularGraph> {
        self.rows.iter().map(|r| r.graph.clone()).collect()
    }
}

fn parse_label(cell: &str, name: &str) -> Result<Option<f64>, String> {
    let cell = cell.trim();
    if cell.is_empty() {
        return Ok(None);
    }
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(format!("{name} value \"{cell}\" is not a finite number")),
    }
}

/// Reads a dataset. Invalid, unlabeled and duplicate rows are collected in
/// `rejected` with their line numbers; the file fails only when its header is
/// wrong or no row survives.
pub fn parse_dataset<R: Read>(reader: R) -> Result<PropertyDataset, IoError> {
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = csv.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != DATASET_HEADER {
        return Err(IoError::HeaderMismatch {
            found: header.iter().collect::<Vec<_>>().join(","),
        });
    }
    let mut ds = PropertyDataset::default();
    let mut seen: HashSet<String> = HashSet::new();
    for rec in csv.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let mut reject = |message: String| {
            log::warn!("dataset line {line}: {message}");
            ds.rejected.push(RowError { line, message });
        };
        if rec.len() != DATASET_HEADER.len() {
            reject(format!("expected 4 fields, found {}", rec.len()));
            continue;
        }
        let labels = (|| {
            Ok::<_, String>(Labels::new(
                parse_label(&rec[1], "ron")?,
                parse_label(&rec[2], "mon")?,
                parse_label(&rec[3], "dcn")?,
            ))
        })();
        let labels = match labels {
            Ok(l) => l,
            Err(m) => {
                reject(m);
                continue;
            }
        };
        let smiles = rec[0].to_string();
        if smiles.is_empty() {
            reject("empty SMILES".into());
            continue;
        }
        if labels.count() == 0 {
            reject("row has no labels".into());
            continue;
        }
        let graph = match parse_smiles(&smiles) {
            Ok(g) => g,
            Err(e) => {
                reject(format!("invalid SMILES \"{smiles}\": {e}"));
                continue;
            }
        };
        let canonical = canonical_smiles(&graph);
        if !seen.insert(canonical.clone()) {
            reject(format!("duplicate molecule {canonical}"));
            continue;
        }
        ds.rows.push(DatasetRow {
            line,
            smiles,
            canonical,
            graph,
            labels,
        });
    }
    if ds.rows.is_empty() {
        return Err(IoError::AllRowsInvalid {
            rejected: ds.rejected.len(),
        });
    }
    Ok(ds)
}

pub fn ingest_dataset(path: &Path) -> Result<PropertyDataset, IoError> {
    parse_dataset(File::open(path).map_err(io_err(path))?)
}

/// One SMILES per line; blank lines and `#` comments are skipped. A leading
/// dataset header is accepted and only its first column used.
pub fn read_smiles_list(path: &Path) -> Result<Vec<(usize, String)>, IoError> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let content = line.split('#').next().unwrap_or("");
        let first = content.split(',').next().unwrap_or("").trim();
        if first.is_empty() || (i == 0 && first == "smiles") {
            continue;
        }
        out.push((i + 1, first.to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GnnSection {
    pub ensemble: GnnEnsemble,
    pub train_config: TrainConfig,
    pub training_molecules: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdSection {
    pub ensemble: AdEnsemble,
    pub nu: f64,
    pub gamma: Gamma,
    pub grid: Option<GridSearch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub grammar_hash: String,
    pub gnn: Option<GnnSection>,
    pub ad: Option<AdSection>,
}

impl Checkpoint {
    pub fn new(grammar_hash: String) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            grammar_hash,
            gnn: None,
            ad: None,
        }
    }

    pub fn check(&self) -> Result<(), IoError> {
        if self.version != CHECKPOINT_VERSION {
            return Err(IoError::CheckpointVersion { found: self.version });
        }
        if let (Some(gnn), Some(ad)) = (&self.gnn, &self.ad) {
            if gnn.ensemble.len() != ad.ensemble.len() {
                return Err(IoError::CheckpointMismatch(format!(
                    "{} SVMs for {} GNNs",
                    ad.ensemble.len(),
                    gnn.ensemble.len()
                )));
            }
            for (k, (m, svm)) in gnn.ensemble.models.iter().zip(&ad.ensemble.svms).enumerate() {
                if m.architecture.fingerprint_dim() != svm.dim() {
                    return Err(IoError::CheckpointMismatch(format!(
                        "member {k}: fingerprint dim {} but SVM dim {}",
                        m.architecture.fingerprint_dim(),
                        svm.dim()
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let f = File::open(path).map_err(io_err(path))?;
    serde_json::from_reader(BufReader::new(f)).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let f = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    w.write_all(b"\n").map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, IoError> {
    let c: Checkpoint = read_json(path)?;
    c.check()?;
    Ok(c)
}

pub fn write_records(path: &Path, records: &[RunRecord]) -> Result<(), IoError> {
    let f = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|source| IoError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>, IoError> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| IoError::Record {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub smiles: String,
    pub ron: f64,
    pub os: f64,
    pub score: f64,
    pub vote_sum: Option<i64>,
    pub promising: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub ron: f64,
    pub os: f64,
}

/// Summary table plus plot data: RON vs OS of every distinct scored
/// molecule, with the promising region marked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub summary: RunSummary,
    pub thresholds: Thresholds,
    pub promising: Vec<ScatterPoint>,
    pub scatter: Vec<ScatterPoint>,
    pub penalized_outside_ad: usize,
}

pub fn build_report(records: &[RunRecord]) -> Report {
    let scatter: Vec<ScatterPoint> = best_per_molecule(records)
        .into_iter()
        .filter_map(|r| {
            let p = r.predictions.as_ref()?;
            Some(ScatterPoint {
                smiles: r.smiles.clone()?,
                ron: p.ron,
                os: p.os,
                score: r.score,
                vote_sum: r.vote_sum,
                promising: is_promising(p),
            })
        })
        .collect();
    Report {
        summary: summarize(records),
        thresholds: Thresholds {
            ron: PROMISING_RON,
            os: PROMISING_OS,
        },
        promising: scatter.iter().filter(|p| p.promising).cloned().collect(),
        penalized_outside_ad: records.iter().filter(|r| r.in_ad == Some(false)).count(),
        scatter,
    }
}
