//! Deployment configuration, loaded from a TOML file with sensible
//! defaults for every knob.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use radbench_core::strata::{EvalConfig, IntersectionMetric};
use radbench_core::taxonomy::{AgeBinning, LocationTaxonomy, BUILTIN_TAXONOMY_VERSION};

use crate::service::PlatformError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgeBinRow {
    pub lo: u16,
    /// Open-topped when absent.
    pub hi: Option<u16>,
    pub label: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PlatformConfig {
    /// Directory holding the record log and snapshots.
    pub data_dir: PathBuf,
    pub listen: String,
    /// Minimum cases per reported stratum cell.
    pub n_min: usize,
    /// k-anonymity audit threshold.
    pub k_anonymity: usize,
    /// Token required for operator endpoints (verify, dataset
    /// registration, privacy audit).
    pub operator_token: String,
    /// Custom `country,region,continent` table; the built-in table is
    /// used when absent.
    pub taxonomy_file: Option<PathBuf>,
    /// Label recorded in reports for a custom taxonomy file.
    pub taxonomy_version: Option<String>,
    /// Custom age bins; decade bins when absent.
    pub age_bins: Option<Vec<AgeBinRow>>,
    /// Write a snapshot every this many log records (0 disables).
    pub snapshot_every: usize,
}

impl Default for PlatformConfig {
    fn default() -> Self {
        PlatformConfig {
            data_dir: PathBuf::from("./radbench-data"),
            listen: "127.0.0.1:8080".to_string(),
            n_min: 30,
            k_anonymity: 5,
            operator_token: "operator-dev-token".to_string(),
            taxonomy_file: None,
            taxonomy_version: None,
            age_bins: None,
            snapshot_every: 64,
        }
    }
}

impl PlatformConfig {
    pub fn load(path: &Path) -> Result<Self, PlatformError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PlatformError::Config(format!("read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| PlatformError::Config(e.to_string()))
    }

    pub fn age_binning(&self) -> Result<AgeBinning, PlatformError> {
        match &self.age_bins {
            None => Ok(AgeBinning::decades()),
            Some(rows) => AgeBinning::new(
                rows.iter()
                    .map(|r| (r.lo, r.hi, r.label.clone()))
                    .collect(),
            )
            .map_err(|e| PlatformError::Config(e.to_string())),
        }
    }

    pub fn eval_config(&self) -> Result<EvalConfig, PlatformError> {
        EvalConfig::new(self.n_min, self.age_binning()?, IntersectionMetric::AucOnly)
            .map_err(|e| PlatformError::Config(e.to_string()))
    }

    pub fn taxonomy(&self) -> Result<LocationTaxonomy, PlatformError> {
        match &self.taxonomy_file {
            None => Ok(LocationTaxonomy::builtin().clone()),
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    PlatformError::Config(format!("read {}: {e}", path.display()))
                })?;
                let version = self
                    .taxonomy_version
                    .clone()
                    .unwrap_or_else(|| format!("custom:{}", path.display()));
                LocationTaxonomy::from_csv(&text, &version)
                    .map_err(|e| PlatformError::Config(e.to_string()))
            }
        }
    }
}

/// Version label reports carry when running on the built-in table.
pub fn builtin_taxonomy_version() -> &'static str {
    BUILTIN_TAXONOMY_VERSION
}
