//! The whole design-then-analysis sequence in one call, for scripted runs
//! and simulation studies. Each stage is the same public operation the CLI
//! runs step by step.

use serde::{Deserialize, Serialize};

use crate::dataset::{release_escrow, Dataset};
use crate::design::{
    assign_bins, balance_report, freeze_design, trim_support, BinMethod, DesignIteration, DesignReport, TrimRule,
};
use crate::effects::{unit_effects, EffectTable};
use crate::error::Result;
use crate::matching::{match_units, MatchSet, MatchSpec};
use crate::propensity::{fit_propensity, score, FitOptions, PropensityModel, ScoreTable};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub fit: FitOptions,
    pub bins: usize,
    pub bin_method: BinMethod,
    pub threshold: f64,
    pub trim: TrimRule,
    pub matching: MatchSpec,
    pub override_balance: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            fit: FitOptions::default(),
            bins: 10,
            bin_method: BinMethod::Quantile,
            threshold: 0.1,
            trim: TrimRule::ArmOverlap,
            matching: MatchSpec::default(),
            override_balance: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub model: PropensityModel,
    pub scores: ScoreTable,
    pub design: DesignReport,
    pub matches: MatchSet,
    pub effects: EffectTable,
    /// The dataset with escrow released under `design`.
    pub dataset: Dataset,
}

/// Fit, bin, diagnose, trim, freeze, match, release and difference.
pub fn run_pipeline(ds: Dataset, cfg: &PipelineConfig) -> Result<PipelineRun> {
    let (design, scores, model) = design_only(&ds, cfg)?;
    let matches = match_units(&scores, &design, &cfg.matching)?;
    let dataset = release_escrow(ds, &design)?;
    let effects = unit_effects(&matches, &dataset)?;
    Ok(PipelineRun { model, scores, design, matches, effects, dataset })
}

/// The outcome-free half of the pipeline.
pub fn design_only(ds: &Dataset, cfg: &PipelineConfig) -> Result<(DesignReport, ScoreTable, PropensityModel)> {
    let model = fit_propensity(ds, &cfg.fit)?;
    let scores = score(&model, ds)?;
    let plan = assign_bins(&scores, cfg.bins, cfg.bin_method)?;
    let balance = balance_report(ds, &plan, cfg.threshold)?;
    let trim = trim_support(&scores, cfg.trim)?;
    let history = vec![DesignIteration::from_balance(&plan, &balance, "pipeline")];
    let design = freeze_design(&model, plan, balance, trim, cfg.override_balance, history)?;
    Ok((design, scores, model))
}
