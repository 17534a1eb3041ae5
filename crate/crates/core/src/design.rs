//! Study design on the linear propensity scale: stratification into bins,
//! within-bin covariate balance, trimming to common support, and freezing.
//!
//! Nothing here reads outcomes, so every operation runs on a sealed dataset.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::digest::json_digest;
use crate::error::{Error, Result};
use crate::propensity::{PropensityModel, ScoreTable};
use crate::stats::{self, lossless_f64, Histogram};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BinMethod {
    #[default]
    Quantile,
    FixedWidth,
    /// Edges supplied by the caller.
    Explicit,
}

impl std::str::FromStr for BinMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<BinMethod> {
        match s {
            "quantile" => Ok(BinMethod::Quantile),
            "fixed-width" => Ok(BinMethod::FixedWidth),
            other => Err(Error::Config(format!("unknown bin method {other:?}"))),
        }
    }
}

/// Bins over `lp`. Bin `b` is `[edges[b], edges[b+1])`, the last bin also
/// holding its upper edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinPlan {
    pub method: BinMethod,
    pub edges: Vec<f64>,
    pub unit_ids: Vec<String>,
    pub bins: Vec<usize>,
    pub model_digest: String,
    pub dataset_digest: String,
}

impl BinPlan {
    pub fn n_bins(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_bins()];
        for &b in &self.bins {
            c[b] += 1;
        }
        c
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["unit_id", "bin"])?;
        for (id, b) in self.unit_ids.iter().zip(&self.bins) {
            out.write_record([id.as_str(), &b.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn bin_of_id(&self) -> HashMap<&str, usize> {
        self.unit_ids.iter().map(String::as_str).zip(self.bins.iter().copied()).collect()
    }
}

pub fn assign_bins(scores: &ScoreTable, n_bins: usize, method: BinMethod) -> Result<BinPlan> {
    if n_bins == 0 {
        return Err(Error::Binning("need at least one bin".into()));
    }
    if scores.is_empty() {
        return Err(Error::Binning("no units to bin".into()));
    }
    let edges = match method {
        BinMethod::Quantile => quantile_edges(&scores.lp, n_bins)?,
        BinMethod::FixedWidth => {
            let (lo, hi) = stats::min_max(&scores.lp).expect("non-empty");
            if n_bins > 1 && !(hi > lo) {
                return Err(Error::Binning(format!(
                    "all linear propensities equal; {n_bins} bins impossible, use 1"
                )));
            }
            Histogram::grid(lo, hi, n_bins).edges
        }
        BinMethod::Explicit => {
            return Err(Error::Binning("explicit edges go through assign_bins_with_edges".into()));
        }
    };
    let mut plan = assign_bins_with_edges(scores, edges)?;
    plan.method = method;
    Ok(plan)
}

/// Bin with caller-supplied edges. Every unit must fall inside the range.
pub fn assign_bins_with_edges(scores: &ScoreTable, edges: Vec<f64>) -> Result<BinPlan> {
    let degenerate_single = edges.len() == 2 && edges[0] == edges[1];
    if edges.len() < 2 || (!degenerate_single && edges.windows(2).any(|w| !(w[0] < w[1]))) {
        return Err(Error::Binning("edges must be strictly increasing with at least two entries".into()));
    }
    let grid = Histogram { counts: vec![0; edges.len() - 1], edges };
    let mut bins = Vec::with_capacity(scores.len());
    for (id, &v) in scores.ids.iter().zip(&scores.lp) {
        let b = grid
            .bin_of(v)
            .ok_or_else(|| Error::Binning(format!("unit {id:?} with lp {v} lies outside the bin edges")))?;
        bins.push(b);
    }
    Ok(BinPlan {
        method: BinMethod::Explicit,
        edges: grid.edges,
        unit_ids: scores.ids.clone(),
        bins,
        model_digest: scores.model_digest.clone(),
        dataset_digest: scores.dataset_digest.clone(),
    })
}

/// Equal-count edges. Cuts are snapped to the nearest boundary between
/// distinct values so tied units always share a bin.
fn quantile_edges(lp: &[f64], n_bins: usize) -> Result<Vec<f64>> {
    let mut v = lp.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let boundaries: Vec<usize> = (1..n).filter(|&i| v[i - 1] < v[i]).collect();
    let distinct = boundaries.len() + 1;
    if distinct < n_bins {
        return Err(Error::Binning(format!(
            "only {distinct} distinct linear propensities for {n_bins} quantile bins; use at most {distinct} bins"
        )));
    }
    if n_bins == 1 {
        return Ok(vec![v[0], v[n - 1]]);
    }
    let mut edges = vec![v[0]];
    let mut next = 0usize;
    for b in 1..n_bins {
        let ideal = b * n / n_bins;
        let last = boundaries.len() - (n_bins - 1 - b) - 1;
        let mut best = next;
        for k in next..=last {
            let d = boundaries[k].abs_diff(ideal);
            if d < boundaries[best].abs_diff(ideal) {
                best = k;
            }
            if boundaries[k] >= ideal {
                break;
            }
        }
        let cut = boundaries[best];
        edges.push(v[cut - 1] + (v[cut] - v[cut - 1]) / 2.0);
        next = best + 1;
    }
    edges.push(v[n - 1]);
    Ok(edges)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceCell {
    pub bin: usize,
    pub covariate: String,
    pub n_treated: usize,
    pub n_control: usize,
    #[serde(with = "lossless_f64")]
    pub mean_treated: f64,
    #[serde(with = "lossless_f64")]
    pub mean_control: f64,
    #[serde(with = "lossless_f64")]
    pub pooled_sd: f64,
    #[serde(with = "lossless_f64")]
    pub smd: f64,
    /// False when the bin lacks one arm; such cells do not enter the verdict.
    pub assessed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverallBalance {
    pub covariate: String,
    #[serde(with = "lossless_f64")]
    pub mean_treated: f64,
    #[serde(with = "lossless_f64")]
    pub mean_control: f64,
    #[serde(with = "lossless_f64")]
    pub smd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub cells: Vec<BalanceCell>,
    pub overall: Vec<OverallBalance>,
    #[serde(with = "lossless_f64")]
    pub worst_abs_smd: f64,
    pub threshold: f64,
    pub balanced: bool,
    pub empty_arm_bins: Vec<usize>,
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subgroup: Option<String>,
    pub model_digest: String,
    pub dataset_digest: String,
}

impl BalanceReport {
    pub fn digest(&self) -> String {
        json_digest(self)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "bin", "covariate", "n_treated", "n_control", "mean_treated", "mean_control", "pooled_sd", "smd",
            "assessed",
        ])?;
        for c in &self.cells {
            out.write_record([
                c.bin.to_string(),
                c.covariate.clone(),
                c.n_treated.to_string(),
                c.n_control.to_string(),
                c.mean_treated.to_string(),
                c.mean_control.to_string(),
                c.pooled_sd.to_string(),
                c.smd.to_string(),
                c.assessed.to_string(),
            ])?;
        }
        for o in &self.overall {
            out.write_record([
                "all".to_string(),
                o.covariate.clone(),
                String::new(),
                String::new(),
                o.mean_treated.to_string(),
                o.mean_control.to_string(),
                String::new(),
                o.smd.to_string(),
                "false".to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Plain-text table: one row per bin with its worst covariate.
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>4} {:>8} {:>8} {:>9}  worst covariate", "bin", "treated", "control", "max|smd|");
        let mut bins: Vec<usize> = self.cells.iter().map(|c| c.bin).collect();
        bins.dedup();
        for b in bins {
            let cells: Vec<&BalanceCell> = self.cells.iter().filter(|c| c.bin == b).collect();
            let first = cells[0];
            let worst = cells
                .iter()
                .filter(|c| c.assessed)
                .max_by(|a, b| a.smd.abs().total_cmp(&b.smd.abs()));
            match worst {
                Some(w) => {
                    let _ = writeln!(
                        s,
                        "{:>4} {:>8} {:>8} {:>9.4}  {}",
                        b,
                        first.n_treated,
                        first.n_control,
                        w.smd.abs(),
                        w.covariate
                    );
                }
                None => {
                    let _ = writeln!(s, "{:>4} {:>8} {:>8} {:>9}  (empty arm)", b, first.n_treated, first.n_control, "-");
                }
            }
        }
        let _ = writeln!(
            s,
            "worst |smd| {:.4} vs threshold {} -> {}",
            self.worst_abs_smd,
            self.threshold,
            if self.balanced { "balanced" } else { "NOT balanced" }
        );
        s
    }
}

pub fn balance_report(ds: &Dataset, plan: &BinPlan, threshold: f64) -> Result<BalanceReport> {
    balance_for_members(ds, plan, threshold, None)
}

/// Balance restricted to a user-declared subgroup of units.
pub fn balance_report_subgroup(
    ds: &Dataset,
    plan: &BinPlan,
    threshold: f64,
    label: &str,
    member: impl Fn(&Dataset, usize) -> bool,
) -> Result<BalanceReport> {
    let keep: Vec<bool> = (0..ds.n_units()).map(|i| member(ds, i)).collect();
    let mut report = balance_for_members(ds, plan, threshold, Some(&keep))?;
    report.subgroup = Some(label.to_string());
    Ok(report)
}

fn balance_for_members(
    ds: &Dataset,
    plan: &BinPlan,
    threshold: f64,
    keep: Option<&[bool]>,
) -> Result<BalanceReport> {
    if plan.dataset_digest != ds.provenance() {
        return Err(Error::Provenance("bin plan was built on a different dataset".into()));
    }
    let n_bins = plan.n_bins();
    let names = ds.encoded_names();
    let width = ds.width();
    // members[b] = dataset row indices in bin b
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_bins];
    let mut all = Vec::with_capacity(plan.unit_ids.len());
    for (id, &b) in plan.unit_ids.iter().zip(&plan.bins) {
        let i = ds
            .index_of(id)
            .ok_or_else(|| Error::Provenance(format!("bin plan unit {id:?} is not in the dataset")))?;
        if keep.is_some_and(|k| !k[i]) {
            continue;
        }
        members[b].push(i);
        all.push(i);
    }
    if all.is_empty() {
        return Err(Error::EmptySelection("no units in the balance population".into()));
    }

    let z = ds.treatment();
    let column = |rows: &[usize], arm: u8, j: usize| -> Vec<f64> {
        rows.iter().filter(|&&i| z[i] == arm).map(|&i| ds.row(i)[j]).collect()
    };

    let per_bin: Vec<Vec<BalanceCell>> = (0..n_bins)
        .into_par_iter()
        .map(|b| {
            let rows = &members[b];
            (0..width)
                .map(|j| {
                    let t = column(rows, 1, j);
                    let c = column(rows, 0, j);
                    let assessed = !t.is_empty() && !c.is_empty();
                    let pooled = ((stats::sample_variance(&t) + stats::sample_variance(&c)) / 2.0).sqrt();
                    BalanceCell {
                        bin: b,
                        covariate: names[j].clone(),
                        n_treated: t.len(),
                        n_control: c.len(),
                        mean_treated: stats::mean(&t),
                        mean_control: stats::mean(&c),
                        pooled_sd: pooled,
                        smd: if assessed { stats::standardized_difference(&t, &c) } else { f64::NAN },
                        assessed,
                    }
                })
                .collect()
        })
        .collect();
    let cells: Vec<BalanceCell> = per_bin.into_iter().flatten().collect();

    let overall = (0..width)
        .map(|j| {
            let t = column(&all, 1, j);
            let c = column(&all, 0, j);
            let smd = if t.is_empty() || c.is_empty() { f64::NAN } else { stats::standardized_difference(&t, &c) };
            OverallBalance { covariate: names[j].clone(), mean_treated: stats::mean(&t), mean_control: stats::mean(&c), smd }
        })
        .collect();

    let mut empty_arm_bins = Vec::new();
    let mut warnings = Vec::new();
    for (b, rows) in members.iter().enumerate() {
        let t = rows.iter().filter(|&&i| z[i] == 1).count();
        let c = rows.len() - t;
        if t == 0 || c == 0 {
            empty_arm_bins.push(b);
            warnings.push(format!(
                "bin {b} has {t} treated and {c} control units; excluded from the balance verdict"
            ));
        }
    }

    let assessed: Vec<f64> = cells.iter().filter(|c| c.assessed).map(|c| c.smd.abs()).collect();
    let worst_abs_smd = assessed.iter().copied().fold(f64::NAN, |m, v| if m.is_nan() || v > m { v } else { m });
    let balanced = !assessed.is_empty() && assessed.iter().all(|&v| v <= threshold);
    if assessed.is_empty() {
        warnings.push("no bin contains both arms; balance cannot be assessed".into());
    }

    Ok(BalanceReport {
        cells,
        overall,
        worst_abs_smd,
        threshold,
        balanced,
        empty_arm_bins,
        warnings,
        subgroup: None,
        model_digest: plan.model_digest.clone(),
        dataset_digest: plan.dataset_digest.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum TrimRule {
    /// Keep `[max of arm minima, min of arm maxima]`.
    ArmOverlap,
    LpWindow { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrimReason {
    BelowSupport,
    AboveSupport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedUnit {
    pub unit_id: String,
    pub z: u8,
    pub lp: f64,
    pub reason: TrimReason,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TrimCounts {
    pub treated_below: usize,
    pub treated_above: usize,
    pub control_below: usize,
    pub control_above: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrimDecision {
    pub rule: TrimRule,
    pub support: (f64, f64),
    /// Retained unit ids in score-table order.
    pub retained: Vec<String>,
    pub dropped: Vec<DroppedUnit>,
    pub counts: TrimCounts,
    pub model_digest: String,
    pub dataset_digest: String,
}

impl TrimDecision {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["unit_id", "z", "lp", "reason"])?;
        for d in &self.dropped {
            let reason = match d.reason {
                TrimReason::BelowSupport => "below-support",
                TrimReason::AboveSupport => "above-support",
            };
            out.write_record([d.unit_id.clone(), d.z.to_string(), d.lp.to_string(), reason.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

pub fn trim_support(scores: &ScoreTable, rule: TrimRule) -> Result<TrimDecision> {
    let t = scores.arm_lp(1);
    let c = scores.arm_lp(0);
    let (Some((tmin, tmax)), Some((cmin, cmax))) = (stats::min_max(&t), stats::min_max(&c)) else {
        return Err(Error::Support("trimming needs both arms present".into()));
    };
    let (lo, hi) = match rule {
        TrimRule::ArmOverlap => (tmin.max(cmin), tmax.min(cmax)),
        TrimRule::LpWindow { lo, hi } => {
            if !(lo <= hi) {
                return Err(Error::Config(format!("lp window [{lo}, {hi}] is empty")));
            }
            (lo, hi)
        }
    };
    let mut retained = Vec::new();
    let mut dropped = Vec::new();
    let mut counts = TrimCounts::default();
    let mut kept = [0usize; 2];
    for i in 0..scores.len() {
        let v = scores.lp[i];
        let z = scores.z[i];
        let reason = if v < lo {
            Some(TrimReason::BelowSupport)
        } else if v > hi {
            Some(TrimReason::AboveSupport)
        } else {
            None
        };
        match reason {
            None => {
                kept[z as usize] += 1;
                retained.push(scores.ids[i].clone());
            }
            Some(r) => {
                match (z, r) {
                    (1, TrimReason::BelowSupport) => counts.treated_below += 1,
                    (1, TrimReason::AboveSupport) => counts.treated_above += 1,
                    (_, TrimReason::BelowSupport) => counts.control_below += 1,
                    (_, TrimReason::AboveSupport) => counts.control_above += 1,
                }
                dropped.push(DroppedUnit { unit_id: scores.ids[i].clone(), z, lp: v, reason: r });
            }
        }
    }
    if kept[0] == 0 || kept[1] == 0 {
        return Err(Error::Support(format!(
            "support [{lo}, {hi}] leaves {} treated and {} control units; the data cannot support a comparison",
            kept[1], kept[0]
        )));
    }
    Ok(TrimDecision {
        rule,
        support: (lo, hi),
        retained,
        dropped,
        counts,
        model_digest: scores.model_digest.clone(),
        dataset_digest: scores.dataset_digest.clone(),
    })
}

/// Restrict a score table to the units a trim retained.
pub fn retained_scores(scores: &ScoreTable, trim: &TrimDecision) -> ScoreTable {
    let keep: std::collections::HashSet<&str> = trim.retained.iter().map(String::as_str).collect();
    let idx: Vec<usize> = (0..scores.len()).filter(|&i| keep.contains(scores.ids[i].as_str())).collect();
    ScoreTable {
        ids: idx.iter().map(|&i| scores.ids[i].clone()).collect(),
        z: idx.iter().map(|&i| scores.z[i]).collect(),
        e: idx.iter().map(|&i| scores.e[i]).collect(),
        lp: idx.iter().map(|&i| scores.lp[i]).collect(),
        model_digest: scores.model_digest.clone(),
        dataset_digest: scores.dataset_digest.clone(),
    }
}

/// One pass of the fit / bin / diagnose loop, kept for the audit trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignIteration {
    pub model_digest: String,
    pub n_bins: usize,
    #[serde(with = "lossless_f64")]
    pub worst_abs_smd: f64,
    pub balanced: bool,
    #[serde(default)]
    pub note: String,
}

impl DesignIteration {
    pub fn from_balance(plan: &BinPlan, balance: &BalanceReport, note: &str) -> DesignIteration {
        DesignIteration {
            model_digest: balance.model_digest.clone(),
            n_bins: plan.n_bins(),
            worst_abs_smd: balance.worst_abs_smd,
            balanced: balance.balanced,
            note: note.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignReport {
    pub model_digest: String,
    pub dataset_digest: String,
    pub bin_plan: BinPlan,
    pub balance: BalanceReport,
    pub trim: TrimDecision,
    pub frozen: bool,
    pub override_balance: bool,
    pub history: Vec<DesignIteration>,
}

impl DesignReport {
    pub fn digest(&self) -> String {
        json_digest(self)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<DesignReport> {
        Ok(serde_json::from_str(text)?)
    }
}

pub fn freeze_design(
    model: &PropensityModel,
    plan: BinPlan,
    balance: BalanceReport,
    trim: TrimDecision,
    override_balance: bool,
    history: Vec<DesignIteration>,
) -> Result<DesignReport> {
    let model_digest = model.digest();
    let parts = [
        ("bin plan", &plan.model_digest, &plan.dataset_digest),
        ("balance report", &balance.model_digest, &balance.dataset_digest),
        ("trim decision", &trim.model_digest, &trim.dataset_digest),
    ];
    for (what, m, d) in parts {
        if *d != model.dataset_digest {
            return Err(Error::Provenance(format!("{what} refers to dataset {d}, model to {}", model.dataset_digest)));
        }
        if *m != model_digest {
            return Err(Error::Provenance(format!("{what} was built from a different propensity model")));
        }
    }
    if !balance.balanced && !override_balance {
        return Err(Error::DesignNotReady(format!(
            "worst within-bin |smd| is {} against threshold {}; refine the model or bins, or freeze with an \
             explicit balance override",
            balance.worst_abs_smd, balance.threshold
        )));
    }
    Ok(DesignReport {
        model_digest,
        dataset_digest: model.dataset_digest.clone(),
        bin_plan: plan,
        balance,
        trim,
        frozen: true,
        override_balance,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(lp: &[f64], z: &[u8]) -> ScoreTable {
        let ids = (0..lp.len()).map(|i| format!("u{i:02}")).collect();
        let mut t = ScoreTable::from_lp(ids, z.to_vec(), lp.to_vec());
        t.lp = lp.to_vec();
        t
    }

    #[test]
    fn quantile_bins_of_one_to_ten() {
        let lp: Vec<f64> = (1..=10).map(f64::from).collect();
        let plan = assign_bins(&table(&lp, &[0, 1, 0, 1, 0, 1, 0, 1, 0, 1]), 5, BinMethod::Quantile).unwrap();
        assert_eq!(plan.counts(), vec![2; 5]);
        assert_eq!(plan.bins, vec![0, 0, 1, 1, 2, 2, 3, 3, 4, 4]);
    }

    #[test]
    fn constant_lp_single_bin() {
        let plan = assign_bins(&table(&[0.3; 4], &[0, 1, 0, 1]), 1, BinMethod::Quantile).unwrap();
        assert_eq!(plan.counts(), vec![4]);
        assert!(matches!(assign_bins(&table(&[0.3; 4], &[0, 1, 0, 1]), 2, BinMethod::Quantile), Err(Error::Binning(_))));
    }

    #[test]
    fn ties_share_a_bin() {
        let lp = [1.0, 2.0, 2.0, 2.0, 3.0, 4.0];
        let plan = assign_bins(&table(&lp, &[0, 1, 0, 1, 0, 1]), 2, BinMethod::Quantile).unwrap();
        assert_eq!(plan.bins[1], plan.bins[2]);
        assert_eq!(plan.bins[2], plan.bins[3]);
        assert!(plan.edges.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn overlap_trim_hand_example() {
        let s = table(&[1.0, 2.0, 3.0, 2.0, 3.0, 4.0], &[1, 1, 1, 0, 0, 0]);
        let t = trim_support(&s, TrimRule::ArmOverlap).unwrap();
        assert_eq!(t.support, (2.0, 3.0));
        let dropped: Vec<(&str, u8)> = t.dropped.iter().map(|d| (d.unit_id.as_str(), d.z)).collect();
        assert_eq!(dropped, vec![("u00", 1), ("u05", 0)]);
        assert_eq!(t.counts.treated_below, 1);
        assert_eq!(t.counts.control_above, 1);
    }

    #[test]
    fn window_trim_drops_extremes() {
        let s = table(&[0.05, 0.2, 0.5, 0.6, 0.9, 1.3], &[0, 0, 1, 0, 1, 1]);
        let t = trim_support(&s, TrimRule::LpWindow { lo: 0.1, hi: 1.0 }).unwrap();
        let ids: Vec<&str> = t.dropped.iter().map(|d| d.unit_id.as_str()).collect();
        assert_eq!(ids, vec!["u00", "u05"]);
        assert!(matches!(
            trim_support(&s, TrimRule::LpWindow { lo: 1.0, hi: 2.0 }),
            Err(Error::Support(_))
        ));
    }
}
