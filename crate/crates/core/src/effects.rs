//! Unit-level effects from clone groups, targeting lists and decile
//! comparisons between lists.

use std::collections::{HashMap, HashSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::matching::{check_release, impute_clones, MatchSet};
use crate::stats;

/// One matched focal unit. `tau_hat` is always "treated minus untreated".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectRow {
    pub unit_id: String,
    pub z: u8,
    pub outcome: f64,
    pub counterfactual: f64,
    pub tau_hat: f64,
    pub k_used: usize,
}

impl EffectRow {
    pub fn new(unit_id: &str, z: u8, outcome: f64, counterfactual: f64, k_used: usize) -> EffectRow {
        let tau_hat = if z == 1 { outcome - counterfactual } else { counterfactual - outcome };
        EffectRow { unit_id: unit_id.to_string(), z, outcome, counterfactual, tau_hat, k_used }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectTable {
    pub rows: Vec<EffectRow>,
    /// Where the estimates came from: `clone-matching` for tables built by
    /// [`unit_effects`], a caller label for adjusted tables.
    pub source: String,
    pub design_digest: String,
}

impl EffectTable {
    /// Wrap externally refined estimates (for instance model-adjusted clone
    /// contrasts) so they flow through the same list and comparison code.
    pub fn from_rows(rows: Vec<EffectRow>, source: &str) -> Result<EffectTable> {
        let mut seen = HashSet::new();
        for r in &rows {
            if !seen.insert(r.unit_id.as_str()) {
                return Err(Error::InvalidData(format!("unit {:?} appears twice", r.unit_id)));
            }
            if !r.tau_hat.is_finite() {
                return Err(Error::InvalidData(format!("unit {:?} has a non-finite effect", r.unit_id)));
            }
        }
        Ok(EffectTable { rows, source: source.to_string(), design_digest: String::new() })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn arm(&self, z: u8) -> EffectTable {
        EffectTable {
            rows: self.rows.iter().filter(|r| r.z == z).cloned().collect(),
            source: self.source.clone(),
            design_digest: self.design_digest.clone(),
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["unit_id", "z", "outcome", "counterfactual", "tau_hat", "k_used"])?;
        for r in &self.rows {
            out.write_record([
                r.unit_id.clone(),
                r.z.to_string(),
                r.outcome.to_string(),
                r.counterfactual.to_string(),
                r.tau_hat.to_string(),
                r.k_used.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

pub fn unit_effects(ms: &MatchSet, ds: &Dataset) -> Result<EffectTable> {
    check_release(ms, ds)?;
    let imputed = impute_clones(ms, ds)?;
    let y = ds.outcomes()?;
    let rows = imputed
        .rows
        .iter()
        .map(|r| {
            let i = ds.index_of(&r.focal_id).expect("checked by impute_clones");
            EffectRow::new(&r.focal_id, r.focal_z, y[i], r.counterfactual, r.k_used)
        })
        .collect();
    Ok(EffectTable { rows, source: "clone-matching".into(), design_digest: ms.design_digest.clone() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub sd: f64,
    pub count: usize,
}

pub fn aggregate(effects: &EffectTable, subgroup: impl Fn(&EffectRow) -> bool) -> Result<Aggregate> {
    let values: Vec<f64> = effects.rows.iter().filter(|r| subgroup(r)).map(|r| r.tau_hat).collect();
    if values.is_empty() {
        return Err(Error::EmptySelection("subgroup selects no effect rows".into()));
    }
    Ok(Aggregate { mean: stats::mean(&values), sd: stats::sample_sd(&values), count: values.len() })
}

pub const TIE_BREAK: &str = "descending score, then ascending unit_id";

/// Units ordered by descending score, cut into (up to) ten near-equal groups
/// labelled 10 (top) down to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetList {
    pub name: String,
    pub unit_ids: Vec<String>,
    pub scores: Vec<f64>,
    pub deciles: Vec<u8>,
    pub n_groups: usize,
    pub tie_break: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl TargetList {
    pub fn from_scores(name: &str, ids: &[String], scores: &[f64]) -> Result<TargetList> {
        if ids.len() != scores.len() {
            return Err(Error::InvalidData("ids and scores differ in length".into()));
        }
        if ids.is_empty() {
            return Err(Error::EmptySelection("no units to rank".into()));
        }
        let mut order: Vec<usize> = (0..ids.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| ids[a].cmp(&ids[b])));
        let n = order.len();
        let n_groups = n.min(10);
        let deciles = (0..n).map(|i| (10 - i * n_groups / n) as u8).collect();
        let note = (n < 10).then(|| {
            format!("only {n} units: {n} singleton groups labelled 10 down to {}", 11 - n)
        });
        Ok(TargetList {
            name: name.to_string(),
            unit_ids: order.iter().map(|&i| ids[i].clone()).collect(),
            scores: order.iter().map(|&i| scores[i]).collect(),
            deciles,
            n_groups,
            tie_break: TIE_BREAK.into(),
            note,
        })
    }

    pub fn len(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unit_ids.is_empty()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["rank", "unit_id", "score", "decile"])?;
        for (i, id) in self.unit_ids.iter().enumerate() {
            out.write_record([(i + 1).to_string(), id.clone(), self.scores[i].to_string(), self.deciles[i].to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Rank the untreated focal units by their estimated effect of treatment,
/// i.e. imputed treated outcome minus observed outcome.
pub fn build_target_list(effects: &EffectTable) -> Result<TargetList> {
    let untreated: Vec<&EffectRow> = effects.rows.iter().filter(|r| r.z == 0).collect();
    if untreated.is_empty() {
        return Err(Error::EmptySelection("no untreated units with effect estimates".into()));
    }
    let ids: Vec<String> = untreated.iter().map(|r| r.unit_id.clone()).collect();
    let scores: Vec<f64> = untreated.iter().map(|r| r.tau_hat).collect();
    TargetList::from_scores("causal", &ids, &scores)
}

pub const REALIZED_BEFORE_AFTER: &str =
    "before-after change (outcome minus baseline); client metric, not a causal estimate";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecileRow {
    pub list: String,
    pub decile: u8,
    pub count: usize,
    pub mean_realized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecileComparison {
    pub rows: Vec<DecileRow>,
    pub realized_definition: String,
    pub population: usize,
}

impl DecileComparison {
    pub fn mean(&self, list: &str, decile: u8) -> Option<f64> {
        self.rows.iter().find(|r| r.list == list && r.decile == decile).map(|r| r.mean_realized)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["list", "decile", "count", "mean_realized"])?;
        for r in &self.rows {
            out.write_record([r.list.clone(), r.decile.to_string(), r.count.to_string(), r.mean_realized.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Long-format plot data: `decile,list,mean`.
    pub fn write_plot_data<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["decile", "list", "mean"])?;
        for r in &self.rows {
            out.write_record([r.decile.to_string(), r.list.clone(), r.mean_realized.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Mean realized effect per decile of each list. Both lists must rank the
/// same units and every unit needs a realized value.
pub fn compare_lists(
    a: &TargetList,
    b: &TargetList,
    realized: &HashMap<String, f64>,
    definition: &str,
) -> Result<DecileComparison> {
    let set_a: HashSet<&str> = a.unit_ids.iter().map(String::as_str).collect();
    let set_b: HashSet<&str> = b.unit_ids.iter().map(String::as_str).collect();
    if set_a != set_b || set_a.len() != a.len() || set_b.len() != b.len() {
        return Err(Error::Evaluation(format!(
            "lists {:?} and {:?} rank different populations",
            a.name, b.name
        )));
    }
    if a.name == b.name {
        return Err(Error::Evaluation("compared lists need distinct names".into()));
    }
    let mut rows = Vec::new();
    for list in [a, b] {
        let mut sums: HashMap<u8, (f64, usize)> = HashMap::new();
        for (id, &d) in list.unit_ids.iter().zip(&list.deciles) {
            let v = realized
                .get(id)
                .ok_or_else(|| Error::Evaluation(format!("no realized value for unit {id:?}")))?;
            let e = sums.entry(d).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
        let mut deciles: Vec<u8> = sums.keys().copied().collect();
        deciles.sort_unstable_by(|x, y| y.cmp(x));
        for d in deciles {
            let (s, c) = sums[&d];
            rows.push(DecileRow { list: list.name.clone(), decile: d, count: c, mean_realized: s / c as f64 });
        }
    }
    Ok(DecileComparison { rows, realized_definition: definition.to_string(), population: a.len() })
}
