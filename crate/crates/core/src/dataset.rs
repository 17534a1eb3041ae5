//! Unit-level observational data with the outcome column held in escrow.
//!
//! A [`Dataset`] is built from delimited text and is immutable afterwards.
//! Covariates and the intervention flag are freely readable; the outcome
//! column is sealed at load time and only becomes readable through
//! [`release_escrow`], which requires a frozen study design built on the same
//! source file. Every accessor that could expose outcome values checks the
//! seal, and the `Debug` output never prints them.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::design::DesignReport;
use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::stats::{self, Histogram};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    #[default]
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    #[serde(default)]
    pub kind: ColumnKind,
    /// Declared levels for a categorical column. When absent they are taken
    /// from the data. Either way they are stored sorted, and the first sorted
    /// level is the reference.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<String>>,
}

impl ColumnSpec {
    pub fn numeric(name: &str) -> ColumnSpec {
        ColumnSpec { name: name.to_string(), kind: ColumnKind::Numeric, levels: None }
    }

    pub fn categorical(name: &str) -> ColumnSpec {
        ColumnSpec { name: name.to_string(), kind: ColumnKind::Categorical, levels: None }
    }

    /// Width of this column after indicator expansion.
    pub fn encoded_width(&self) -> usize {
        match self.kind {
            ColumnKind::Numeric => 1,
            ColumnKind::Categorical => self.levels.as_ref().map_or(0, |l| l.len().saturating_sub(1)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CovariateSchema {
    pub columns: Vec<ColumnSpec>,
}

impl CovariateSchema {
    pub fn new(columns: Vec<ColumnSpec>) -> CovariateSchema {
        CovariateSchema { columns }
    }

    pub fn column(&self, name: &str) -> Option<&ColumnSpec> {
        self.columns.iter().find(|c| c.name == name)
    }

    /// Encoded column names: numeric columns keep their name, categorical
    /// columns become `name=level` for every non-reference level.
    pub fn encoded_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for col in &self.columns {
            match col.kind {
                ColumnKind::Numeric => names.push(col.name.clone()),
                ColumnKind::Categorical => {
                    for level in col.levels.iter().flatten().skip(1) {
                        names.push(format!("{}={}", col.name, level));
                    }
                }
            }
        }
        names
    }

    pub fn encoded_width(&self) -> usize {
        self.columns.iter().map(ColumnSpec::encoded_width).sum()
    }

    /// Offset of the first encoded column belonging to `name`.
    fn encoded_offset(&self, name: &str) -> Option<usize> {
        let mut offset = 0;
        for col in &self.columns {
            if col.name == name {
                return Some(offset);
            }
            offset += col.encoded_width();
        }
        None
    }
}

/// Names of the non-covariate columns in the input file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoadOptions {
    pub id_column: String,
    pub treatment_column: String,
    pub outcome_column: String,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            id_column: "unit_id".to_string(),
            treatment_column: "z".to_string(),
            outcome_column: "y".to_string(),
        }
    }
}

/// A data row dropped under the complete-case rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    /// 1-based data row number (header excluded).
    pub row_index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Treated,
    Control,
    All,
}

impl Group {
    pub fn admits(self, z: u8) -> bool {
        match self {
            Group::Treated => z == 1,
            Group::Control => z == 0,
            Group::All => true,
        }
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Group> {
        match s {
            "treated" => Ok(Group::Treated),
            "control" => Ok(Group::Control),
            "all" => Ok(Group::All),
            other => Err(Error::Config(format!("unknown group {other:?}"))),
        }
    }
}

/// Audit record written when escrow is lifted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EscrowRelease {
    pub design_digest: String,
    pub dataset_digest: String,
}

#[derive(Clone)]
struct Escrowed {
    values: Vec<f64>,
    release: Option<EscrowRelease>,
}

#[derive(Clone)]
pub struct Dataset {
    schema: CovariateSchema,
    encoded_names: Vec<String>,
    ids: Vec<String>,
    z: Vec<u8>,
    x: Vec<f64>,
    outcomes: Escrowed,
    provenance: String,
    rejections: Vec<Rejection>,
    id_index: HashMap<String, usize>,
}

impl fmt::Debug for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Dataset")
            .field("units", &self.ids.len())
            .field("encoded_names", &self.encoded_names)
            .field("sealed", &self.is_sealed())
            .field("provenance", &self.provenance)
            .field("rejections", &self.rejections.len())
            .finish_non_exhaustive()
    }
}

enum Cell {
    Missing(String),
    Value,
}

impl Dataset {
    /// Parse comma-separated text with a header row. `provenance` is the
    /// SHA-256 of `bytes`.
    pub fn from_csv_bytes(bytes: &[u8], schema: &CovariateSchema, opts: &LoadOptions) -> Result<Dataset> {
        let provenance = sha256_hex(bytes);
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
        let headers = reader.headers()?.clone();
        let find = |name: &str| -> Result<usize> {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Schema(format!("column {name:?} not found in header")))
        };
        let id_col = find(&opts.id_column)?;
        let z_col = find(&opts.treatment_column)?;
        let y_col = find(&opts.outcome_column)?;
        let cov_cols: Vec<usize> = schema.columns.iter().map(|c| find(&c.name)).collect::<Result<_>>()?;
        if schema.columns.is_empty() {
            return Err(Error::Schema("schema declares no covariates".into()));
        }

        let mut ids = Vec::new();
        let mut z = Vec::new();
        let mut y = Vec::new();
        let mut raw: Vec<Vec<RawCell>> = Vec::new();
        let mut rejections = Vec::new();

        for (i, record) in reader.records().enumerate() {
            let row = i + 1;
            let record = record?;
            let field = |c: usize| record.get(c).unwrap_or("").trim();

            let mut missing = Vec::new();
            let id = field(id_col);
            if id.is_empty() {
                missing.push(format!("missing {}", opts.id_column));
            }
            let zt = field(z_col);
            let zval = if zt.is_empty() {
                missing.push(format!("missing {}", opts.treatment_column));
                0
            } else {
                parse_binary(zt).ok_or_else(|| Error::Validation {
                    row,
                    message: format!("treatment value {zt:?} is not 0 or 1"),
                })?
            };
            let mut cells = Vec::with_capacity(cov_cols.len());
            for (spec, &c) in schema.columns.iter().zip(&cov_cols) {
                let text = field(c);
                match classify(text, spec, row)? {
                    (Cell::Missing(m), _) => {
                        missing.push(m);
                        cells.push(RawCell::Num(f64::NAN));
                    }
                    (Cell::Value, cell) => cells.push(cell),
                }
            }
            let yt = field(y_col);
            let yval = if yt.is_empty() {
                missing.push(format!("missing {}", opts.outcome_column));
                f64::NAN
            } else {
                parse_finite(yt).ok_or_else(|| Error::Validation {
                    row,
                    message: format!("outcome value {yt:?} is not a finite number"),
                })?
            };

            if !missing.is_empty() {
                rejections.push(Rejection { row_index: row, reason: missing.join("; ") });
                continue;
            }
            ids.push(id.to_string());
            z.push(zval);
            y.push(yval);
            raw.push(cells);
        }

        let mut id_index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if id_index.insert(id.clone(), i).is_some() {
                return Err(Error::InvalidData(format!("duplicate unit id {id:?}")));
            }
        }

        let mut resolved = schema.clone();
        for (j, col) in resolved.columns.iter_mut().enumerate() {
            if col.kind != ColumnKind::Categorical {
                continue;
            }
            let observed: BTreeSet<&str> = raw
                .iter()
                .map(|r| match &r[j] {
                    RawCell::Cat(s) => s.as_str(),
                    RawCell::Num(_) => unreachable!("categorical cell holds text"),
                })
                .collect();
            let levels: Vec<String> = match &col.levels {
                Some(declared) => {
                    let set: BTreeSet<String> = declared.iter().cloned().collect();
                    for level in &observed {
                        if !set.contains(*level) {
                            return Err(Error::InvalidData(format!(
                                "column {:?} has undeclared level {level:?}",
                                col.name
                            )));
                        }
                    }
                    set.into_iter().collect()
                }
                None => observed.iter().map(|s| s.to_string()).collect(),
            };
            if levels.is_empty() {
                return Err(Error::InvalidData(format!("column {:?} has no levels", col.name)));
            }
            col.levels = Some(levels);
        }

        let width = resolved.encoded_width();
        let mut x = Vec::with_capacity(raw.len() * width);
        for cells in &raw {
            for (col, cell) in resolved.columns.iter().zip(cells) {
                match (col.kind, cell) {
                    (ColumnKind::Numeric, RawCell::Num(v)) => x.push(*v),
                    (ColumnKind::Categorical, RawCell::Cat(s)) => {
                        let levels = col.levels.as_ref().expect("levels resolved above");
                        for level in &levels[1..] {
                            x.push(if level == s { 1.0 } else { 0.0 });
                        }
                    }
                    _ => unreachable!("cell kind follows column kind"),
                }
            }
        }

        let treated = z.iter().filter(|&&v| v == 1).count();
        if treated == 0 || treated == z.len() {
            return Err(Error::InvalidData(format!(
                "need units in both arms after complete-case filtering (treated {treated}, control {})",
                z.len() - treated
            )));
        }

        Ok(Dataset {
            encoded_names: resolved.encoded_names(),
            schema: resolved,
            ids,
            z,
            x,
            outcomes: Escrowed { values: y, release: None },
            provenance,
            rejections,
            id_index,
        })
    }

    pub fn n_units(&self) -> usize {
        self.ids.len()
    }

    pub fn schema(&self) -> &CovariateSchema {
        &self.schema
    }

    pub fn encoded_names(&self) -> &[String] {
        &self.encoded_names
    }

    pub fn width(&self) -> usize {
        self.encoded_names.len()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.id_index.get(id).copied()
    }

    pub fn treatment(&self) -> &[u8] {
        &self.z
    }

    /// Encoded covariate row of unit `i`.
    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.width();
        &self.x[i * w..(i + 1) * w]
    }

    /// Row-major encoded covariate matrix.
    pub fn matrix(&self) -> &[f64] {
        &self.x
    }

    /// Values of one encoded column.
    pub fn encoded_column(&self, name: &str) -> Result<Vec<f64>> {
        let j = self
            .encoded_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Schema(format!("unknown encoded column {name:?}")))?;
        let w = self.width();
        Ok((0..self.n_units()).map(|i| self.x[i * w + j]).collect())
    }

    /// Values of a numeric schema column.
    pub fn numeric_column(&self, name: &str) -> Result<Vec<f64>> {
        match self.schema.column(name) {
            Some(c) if c.kind == ColumnKind::Numeric => self.encoded_column(name),
            Some(_) => Err(Error::Schema(format!("column {name:?} is categorical"))),
            None => Err(Error::Schema(format!("unknown column {name:?}"))),
        }
    }

    /// Recover the level of a categorical column for every unit from its
    /// indicator encoding.
    pub fn decode_categorical(&self, name: &str) -> Result<Vec<String>> {
        let col = self
            .schema
            .column(name)
            .filter(|c| c.kind == ColumnKind::Categorical)
            .ok_or_else(|| Error::Schema(format!("{name:?} is not a categorical column")))?;
        let levels = col.levels.as_ref().expect("resolved at load");
        let offset = self.schema.encoded_offset(name).expect("column exists");
        let w = self.width();
        Ok((0..self.n_units())
            .map(|i| {
                let ind = &self.x[i * w + offset..i * w + offset + levels.len() - 1];
                match ind.iter().position(|&v| v == 1.0) {
                    Some(k) => levels[k + 1].clone(),
                    None => levels[0].clone(),
                }
            })
            .collect())
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn rejections(&self) -> &[Rejection] {
        &self.rejections
    }

    pub fn is_sealed(&self) -> bool {
        self.outcomes.release.is_none()
    }

    pub fn escrow_audit(&self) -> Option<&EscrowRelease> {
        self.outcomes.release.as_ref()
    }

    pub fn arm_counts(&self) -> (usize, usize) {
        let treated = self.z.iter().filter(|&&v| v == 1).count();
        (treated, self.z.len() - treated)
    }

    /// Outcome column; fails while escrow is sealed.
    pub fn outcomes(&self) -> Result<&[f64]> {
        match &self.outcomes.release {
            Some(_) => Ok(&self.outcomes.values),
            None => Err(Error::Escrow(
                "outcomes are sealed until escrow is released under a frozen design".into(),
            )),
        }
    }

    pub fn outcome(&self, i: usize) -> Result<f64> {
        Ok(self.outcomes()?[i])
    }

    /// Histogram summary of one schema column within an arm, on a grid
    /// spanning the column over all units.
    pub fn summarize_covariate(&self, column: &str, group: Group, bins: usize) -> Result<CovariateSummary> {
        let spec = self
            .schema
            .column(column)
            .ok_or_else(|| Error::Schema(format!("unknown column {column:?}")))?;
        let members: Vec<usize> = (0..self.n_units()).filter(|&i| group.admits(self.z[i])).collect();
        match spec.kind {
            ColumnKind::Numeric => {
                let all = self.encoded_column(column)?;
                let values: Vec<f64> = members.iter().map(|&i| all[i]).collect();
                // one grid for every group so arms can be compared bin by bin
                let (lo, hi) = stats::min_max(&all).unwrap_or((0.0, 0.0));
                let mut histogram = Histogram::grid(lo, hi, bins);
                histogram.add_all(&values);
                Ok(CovariateSummary {
                    column: column.to_string(),
                    group,
                    n: values.len(),
                    mean: Some(stats::mean(&values)),
                    sd: Some(if values.len() > 1 { stats::sample_sd(&values) } else { 0.0 }),
                    histogram,
                    levels: None,
                })
            }
            ColumnKind::Categorical => {
                let decoded = self.decode_categorical(column)?;
                let levels = spec.levels.clone().expect("resolved at load");
                let mut counts = vec![0usize; levels.len()];
                for &i in &members {
                    let k = levels.iter().position(|l| *l == decoded[i]).expect("decoded level");
                    counts[k] += 1;
                }
                let edges = (0..=levels.len()).map(|k| k as f64 - 0.5).collect();
                Ok(CovariateSummary {
                    column: column.to_string(),
                    group,
                    n: members.len(),
                    mean: None,
                    sd: None,
                    histogram: Histogram { edges, counts },
                    levels: Some(levels),
                })
            }
        }
    }
}

/// Distribution of one covariate within an arm. Categorical columns get one
/// bin per level and no moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSummary {
    pub column: String,
    pub group: Group,
    pub n: usize,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    pub histogram: Histogram,
    pub levels: Option<Vec<String>>,
}

enum RawCell {
    Num(f64),
    Cat(String),
}

fn classify(text: &str, spec: &ColumnSpec, row: usize) -> Result<(Cell, RawCell)> {
    if text.is_empty() {
        return Ok((Cell::Missing(format!("missing {}", spec.name)), RawCell::Num(f64::NAN)));
    }
    match spec.kind {
        ColumnKind::Numeric => {
            let v = parse_finite(text).ok_or_else(|| Error::Validation {
                row,
                message: format!("covariate {:?} value {text:?} is not a finite number", spec.name),
            })?;
            Ok((Cell::Value, RawCell::Num(v)))
        }
        ColumnKind::Categorical => Ok((Cell::Value, RawCell::Cat(text.to_string()))),
    }
}

fn parse_finite(text: &str) -> Option<f64> {
    text.parse::<f64>().ok().filter(|v| v.is_finite())
}

fn parse_binary(text: &str) -> Option<u8> {
    match text.parse::<f64>() {
        Ok(v) if v == 0.0 => Some(0),
        Ok(v) if v == 1.0 => Some(1),
        _ => None,
    }
}

pub fn load_dataset(path: &Path, schema: &CovariateSchema, opts: &LoadOptions) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    Dataset::from_csv_bytes(&bytes, schema, opts)
}

/// Lift escrow. The design must be frozen and built on this very file.
pub fn release_escrow(ds: Dataset, design: &DesignReport) -> Result<Dataset> {
    if !design.frozen {
        return Err(Error::Escrow("design is not frozen; outcomes stay sealed".into()));
    }
    let parts = [
        (&design.bin_plan.model_digest, &design.bin_plan.dataset_digest),
        (&design.balance.model_digest, &design.balance.dataset_digest),
        (&design.trim.model_digest, &design.trim.dataset_digest),
    ];
    if parts.iter().any(|(m, d)| **m != design.model_digest || **d != design.dataset_digest) {
        return Err(Error::Provenance("design parts refer to different models or datasets".into()));
    }
    if !design.balance.balanced && !design.override_balance {
        return Err(Error::Escrow("design is unbalanced and carries no balance override".into()));
    }
    if design.dataset_digest != ds.provenance {
        return Err(Error::Provenance(format!(
            "design was built on dataset {} but this dataset is {}",
            design.dataset_digest, ds.provenance
        )));
    }
    let mut ds = ds;
    ds.outcomes.release = Some(EscrowRelease {
        design_digest: design.digest(),
        dataset_digest: ds.provenance.clone(),
    });
    Ok(ds)
}

pub fn write_rejections<W: Write>(w: W, rejections: &[Rejection]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["row_index", "reason"])?;
    for r in rejections {
        out.write_record([r.row_index.to_string(), r.reason.clone()])?;
    }
    out.flush()?;
    Ok(())
}
