//! Run configuration: one TOML file, every field optional, flags on top.

use std::path::Path;

use clonematch::dataset::{ColumnSpec, LoadOptions};
use clonematch::design::{BinMethod, TrimRule};
use clonematch::matching::MatchSpec;
use clonematch::propensity::FitOptions;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub fit: FitOptions,
    pub design: DesignConfig,
    pub matching: MatchSpec,
    pub compare: CompareConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub id_column: String,
    pub treatment_column: String,
    pub outcome_column: String,
    /// Declared covariates. When absent every other column is a covariate,
    /// numeric if all its values parse as numbers and categorical otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub covariates: Option<Vec<ColumnSpec>>,
}

impl Default for DataConfig {
    fn default() -> Self {
        let o = LoadOptions::default();
        DataConfig {
            id_column: o.id_column,
            treatment_column: o.treatment_column,
            outcome_column: o.outcome_column,
            covariates: None,
        }
    }
}

impl DataConfig {
    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            id_column: self.id_column.clone(),
            treatment_column: self.treatment_column.clone(),
            outcome_column: self.outcome_column.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DesignConfig {
    pub bins: usize,
    pub bin_method: BinMethod,
    pub threshold: f64,
    pub trim: TrimRule,
    pub override_balance: bool,
}

impl Default for DesignConfig {
    fn default() -> Self {
        DesignConfig {
            bins: 10,
            bin_method: BinMethod::Quantile,
            threshold: 0.1,
            trim: TrimRule::ArmOverlap,
            override_balance: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    /// Column holding the pre-period outcome, for before-after realized
    /// values when no truth file is given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_column: Option<String>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))
    }
}
