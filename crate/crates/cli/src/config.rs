//! Versioned JSON configs for each subcommand.

use camd_core::ad::{Gamma, SolverConfig, DEFAULT_GAMMA_GRID, DEFAULT_NU_GRID};
use camd_core::design_loop::RunConfig;
use camd_core::gnn::{Architecture, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::commands::CliError;

pub const CONFIG_VERSION: u32 = 1;

pub trait Versioned {
    fn version(&self) -> u32;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainGnnConfig {
    pub version: u32,
    pub seed: u64,
    pub dataset: Option<PathBuf>,
    /// Grammar config file; the built-in grammar when omitted.
    pub grammar: Option<PathBuf>,
    pub ensemble_size: usize,
    pub architecture: Architecture,
    pub train: TrainConfig,
}

impl Default for TrainGnnConfig {
    fn default() -> Self {
        TrainGnnConfig {
            version: CONFIG_VERSION,
            seed: 0,
            dataset: None,
            grammar: None,
            ensemble_size: 40,
            architecture: Architecture::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitAdConfig {
    pub version: u32,
    pub seed: u64,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub nu: f64,
    pub gamma: Gamma,
    /// Sweep the grid on member 0's fingerprints and record the table.
    pub grid_search: bool,
    /// Fit with the γ selected by the sweep instead of `gamma`.
    pub use_grid_selection: bool,
    pub gamma_grid: Vec<Gamma>,
    pub nu_grid: Vec<f64>,
    pub consensus: f64,
    pub solver: SolverConfig,
}

impl Default for FitAdConfig {
    fn default() -> Self {
        FitAdConfig {
            version: CONFIG_VERSION,
            seed: 0,
            dataset: None,
            checkpoint: None,
            nu: 0.05,
            gamma: Gamma::Scale,
            grid_search: true,
            use_grid_selection: false,
            gamma_grid: DEFAULT_GAMMA_GRID.to_vec(),
            nu_grid: DEFAULT_NU_GRID.to_vec(),
            consensus: 0.5,
            solver: SolverConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunLoopConfig {
    pub version: u32,
    pub checkpoint: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub grammar: Option<PathBuf>,
    pub run: RunConfig,
}

impl Default for RunLoopConfig {
    fn default() -> Self {
        RunLoopConfig {
            version: CONFIG_VERSION,
            checkpoint: None,
            corpus: None,
            grammar: None,
            run: RunConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub version: u32,
    pub seed: u64,
    pub records: Option<PathBuf>,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            version: CONFIG_VERSION,
            seed: 0,
            records: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnumerateConfig {
    pub version: u32,
    pub seed: u64,
    pub grammar: Option<PathBuf>,
}

impl Default for EnumerateConfig {
    fn default() -> Self {
        EnumerateConfig {
            version: CONFIG_VERSION,
            seed: 0,
            grammar: None,
        }
    }
}

macro_rules! versioned {
    ($($t:ty),*) => {
        $(impl Versioned for $t {
            fn version(&self) -> u32 {
                self.version
            }
        })*
    };
}

versioned!(TrainGnnConfig, FitAdConfig, RunLoopConfig, ReportConfig, EnumerateConfig);

/// Reads a config, resolving relative paths inside it against the config
/// file's directory.
pub fn load<T: DeserializeOwned + Default + Versioned>(path: Option<&Path>) -> Result<(T, PathBuf), CliError> {
    let Some(path) = path else {
        return Ok((T::default(), PathBuf::from(".")));
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config("CONFIG_UNREADABLE", format!("{}: {e}", path.display())))?;
    let cfg: T = serde_json::from_str(&text)
        .map_err(|e| CliError::config("CONFIG_INVALID", format!("{}: {e}", path.display())))?;
    if cfg.version() != CONFIG_VERSION {
        return Err(CliError::config(
            "CONFIG_VERSION",
            format!("{}: unsupported config version {} (expected {CONFIG_VERSION})", path.display(), cfg.version()),
        ));
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    Ok((cfg, base))
}

pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
