//! Synthetic observational populations with known unit-level effects.
//!
//! Each unit carries both potential outcomes; the exported dataset reveals
//! only `z * y1 + (1 - z) * y0`, and the truth file holds the rest.
//!
//! Randomness comes from ChaCha20 (`rand_chacha`), seeded with the config
//! seed, with unit `i` drawing from stream `i`. Output is therefore
//! independent of thread count and of how units are split into blocks.
//! Uniforms are `(next_u64 >> 11) * 2^-53`; normals use Box-Muller with
//! `u1 = 1 - U1`, `u2 = U2`, taking the cosine branch.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dataset::{ColumnKind, ColumnSpec, CovariateSchema, Dataset, LoadOptions};
use crate::effects::EffectTable;
use crate::error::{Error, Result};
use crate::linalg::ols_with_intercept;
use crate::stats;

pub const RNG_ALGORITHM: &str = "ChaCha20 (rand_chacha 0.9), one stream per unit";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "lowercase")]
pub enum Distribution {
    Normal { mean: f64, sd: f64 },
    Lognormal { meanlog: f64, sdlog: f64 },
    Uniform { lo: f64, hi: f64 },
    /// Integers `lo..=hi`, equally likely.
    Integer { lo: i64, hi: i64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericCovariate {
    pub name: String,
    #[serde(flatten)]
    pub dist: Distribution,
    /// Also emit `1 + floor(10 * Phi(q))` of the underlying standard normal
    /// draw under this name (normal and lognormal only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decile: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalCovariate {
    pub name: String,
    pub levels: Vec<String>,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quadratic {
    pub column: String,
    pub center: f64,
    pub coef: f64,
}

/// `intercept + sum coef * x`; keys are numeric column names or
/// `column=level` for categorical levels.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LinearTerms {
    pub intercept: f64,
    #[serde(default)]
    pub coefficients: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BaselineOutcome {
    #[serde(flatten)]
    pub linear: LinearTerms,
    #[serde(default)]
    pub quadratic: Vec<Quadratic>,
    pub noise_sd: f64,
}

/// `tau = intercept + slope * (column - center) + noise_sd * N(0,1)`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EffectSurface {
    pub intercept: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column: Option<String>,
    #[serde(default)]
    pub slope: f64,
    #[serde(default)]
    pub center: f64,
    #[serde(default)]
    pub noise_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub name: String,
    pub n: usize,
    pub seed: u64,
    #[serde(default = "default_prefix")]
    pub id_prefix: String,
    /// Covariate holding the pre-period value of the outcome, used by the
    /// before-after foil.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_column: Option<String>,
    #[serde(default)]
    pub numeric: Vec<NumericCovariate>,
    #[serde(default)]
    pub categorical: Vec<CategoricalCovariate>,
    pub assignment: LinearTerms,
    pub outcome: BaselineOutcome,
    pub effect: EffectSurface,
}

fn default_prefix() -> String {
    "u".into()
}

const SPECIALTIES: [&str; 6] = [
    "Cardiology",
    "Endocrinology",
    "Family Practice",
    "General Practice",
    "Internal Medicine",
    "OB/Gynecology",
];

fn coefs(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn specialty_terms(values: [f64; 6]) -> Vec<(String, f64)> {
    SPECIALTIES[1..].iter().zip(&values[1..]).map(|(s, v)| (format!("specialty={s}"), *v)).collect()
}

fn doctor_covariates(with_decile: bool) -> (Vec<NumericCovariate>, Vec<CategoricalCovariate>) {
    let numeric = vec![
        NumericCovariate {
            name: "scripts_t1".into(),
            dist: Distribution::Lognormal { meanlog: 2.0, sdlog: 0.6 },
            decile: with_decile.then(|| "rx_decile".to_string()),
        },
        NumericCovariate {
            name: "years_since_degree".into(),
            dist: Distribution::Normal { mean: 18.0, sd: 8.0 },
            decile: None,
        },
    ];
    let categorical = vec![CategoricalCovariate {
        name: "specialty".into(),
        levels: SPECIALTIES.iter().map(|s| s.to_string()).collect(),
        probs: vec![0.10, 0.05, 0.25, 0.20, 0.25, 0.15],
    }];
    (numeric, categorical)
}

fn doctor_outcome(quadratic: Vec<Quadratic>) -> BaselineOutcome {
    let mut c = coefs(&[("scripts_t1", 1.0), ("years_since_degree", 0.03)]);
    c.extend(specialty_terms([0.0, 0.5, 0.2, 0.1, 0.3, -0.4]));
    BaselineOutcome { linear: LinearTerms { intercept: 1.0, coefficients: c }, quadratic, noise_sd: 2.0 }
}

fn doctor_effect() -> EffectSurface {
    EffectSurface { intercept: 1.0, column: Some("scripts_t1".into()), slope: -0.3, center: 8.0, noise_sd: 0.0 }
}

fn doctor_assignment(intercept: f64, driver: &str, slope: f64) -> LinearTerms {
    let mut c = coefs(&[(driver, slope), ("years_since_degree", 0.01)]);
    c.extend(specialty_terms([0.0, 0.3, 0.2, 0.3, 0.1, -0.6]));
    LinearTerms { intercept, coefficients: c }
}

impl DgpConfig {
    pub const PRESETS: [&'static str; 5] = ["doctors", "ferrari", "misspecified", "balance", "randomized"];

    /// Shipped configurations.
    ///
    /// * `doctors`: 250,000 units; visits driven by the prescribing decile,
    ///   treated units write about 50% more baseline scripts; the effect
    ///   falls as baseline scripts rise.
    /// * `ferrari`: 20,000 units, about 3% visited; visits driven directly
    ///   by baseline scripts, so the heaviest prescribers (highest predicted
    ///   outcome) are the ones a visit helps least. The baseline outcome is
    ///   mildly convex in scripts, which a linear regression misses.
    /// * `misspecified`: as `ferrari` with a stronger quadratic and poorer
    ///   overlap, generated at 250,000.
    /// * `balance`: 50,000 units; assignment depends only on a ten-level
    ///   decile covariate, for checking within-bin balance under the true
    ///   propensity.
    /// * `randomized`: 20,000 units assigned by a fair coin.
    pub fn preset(name: &str) -> Result<DgpConfig> {
        let (numeric, categorical) = doctor_covariates(true);
        let cfg = match name {
            "doctors" => DgpConfig {
                name: name.into(),
                n: 250_000,
                seed: 1,
                id_prefix: default_prefix(),
                baseline_column: Some("scripts_t1".into()),
                numeric,
                categorical,
                assignment: doctor_assignment(-6.1, "rx_decile", 0.31),
                outcome: doctor_outcome(Vec::new()),
                effect: doctor_effect(),
            },
            "ferrari" | "misspecified" => {
                let (numeric, categorical) = doctor_covariates(false);
                let ferrari = name == "ferrari";
                DgpConfig {
                    name: name.into(),
                    n: if ferrari { 20_000 } else { 250_000 },
                    seed: 1,
                    id_prefix: default_prefix(),
                    baseline_column: Some("scripts_t1".into()),
                    numeric,
                    categorical,
                    assignment: if ferrari {
                        doctor_assignment(-4.5, "scripts_t1", 0.08)
                    } else {
                        doctor_assignment(-4.4, "scripts_t1", 0.10)
                    },
                    outcome: doctor_outcome(vec![Quadratic {
                        column: "scripts_t1".into(),
                        center: 8.0,
                        coef: if ferrari { 0.03 } else { 0.04 },
                    }]),
                    effect: doctor_effect(),
                }
            }
            "balance" => DgpConfig {
                name: name.into(),
                n: 50_000,
                seed: 1,
                id_prefix: default_prefix(),
                baseline_column: None,
                numeric: vec![
                    NumericCovariate { name: "rx_decile".into(), dist: Distribution::Integer { lo: 1, hi: 10 }, decile: None },
                    NumericCovariate {
                        name: "years_since_degree".into(),
                        dist: Distribution::Normal { mean: 18.0, sd: 8.0 },
                        decile: None,
                    },
                ],
                categorical: vec![CategoricalCovariate {
                    name: "region".into(),
                    levels: vec!["East".into(), "West".into()],
                    probs: vec![0.5, 0.5],
                }],
                assignment: LinearTerms { intercept: -0.88, coefficients: coefs(&[("rx_decile", 0.16)]) },
                outcome: BaselineOutcome {
                    linear: LinearTerms {
                        intercept: 1.0,
                        coefficients: coefs(&[("rx_decile", 1.0), ("years_since_degree", 0.03)]),
                    },
                    quadratic: Vec::new(),
                    noise_sd: 1.0,
                },
                effect: EffectSurface { intercept: 0.5, ..EffectSurface::default() },
            },
            "randomized" => DgpConfig {
                name: name.into(),
                n: 20_000,
                seed: 1,
                id_prefix: default_prefix(),
                baseline_column: Some("scripts_t1".into()),
                numeric,
                categorical,
                assignment: LinearTerms::default(),
                outcome: doctor_outcome(Vec::new()),
                effect: doctor_effect(),
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?}; choose one of {}",
                    DgpConfig::PRESETS.join(", ")
                )))
            }
        };
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<DgpConfig> {
        toml::from_str(text).map_err(|e| Error::Config(format!("bad simulator config: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot encode simulator config: {e}")))
    }

    pub fn with_seed(mut self, seed: u64) -> DgpConfig {
        self.seed = seed;
        self
    }

    pub fn with_n(mut self, n: usize) -> DgpConfig {
        self.n = n;
        self
    }

    /// Column names as they appear in the dataset, numeric (with derived
    /// deciles right after their source) then categorical.
    pub fn numeric_columns(&self) -> Vec<String> {
        let mut cols = Vec::new();
        for c in &self.numeric {
            cols.push(c.name.clone());
            if let Some(d) = &c.decile {
                cols.push(d.clone());
            }
        }
        cols
    }

    pub fn schema(&self) -> CovariateSchema {
        let mut columns: Vec<ColumnSpec> = self.numeric_columns().iter().map(|c| ColumnSpec::numeric(c)).collect();
        for c in &self.categorical {
            columns.push(ColumnSpec {
                name: c.name.clone(),
                kind: ColumnKind::Categorical,
                levels: Some(c.levels.clone()),
            });
        }
        CovariateSchema::new(columns)
    }

    fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config("population needs at least two units".into()));
        }
        let numeric = self.numeric_columns();
        for c in &self.numeric {
            let ok = match c.dist {
                Distribution::Normal { sd, .. } => sd >= 0.0,
                Distribution::Lognormal { sdlog, .. } => sdlog >= 0.0,
                Distribution::Uniform { lo, hi } => lo <= hi,
                Distribution::Integer { lo, hi } => lo <= hi,
            };
            if !ok {
                return Err(Error::Config(format!("bad distribution parameters for {:?}", c.name)));
            }
            if c.decile.is_some() && matches!(c.dist, Distribution::Uniform { .. } | Distribution::Integer { .. }) {
                return Err(Error::Config(format!("{:?}: deciles need a normal or lognormal draw", c.name)));
            }
        }
        for c in &self.categorical {
            let total: f64 = c.probs.iter().sum();
            if c.levels.is_empty()
                || c.levels.len() != c.probs.len()
                || c.probs.iter().any(|&p| !(p >= 0.0))
                || (total - 1.0).abs() > 1e-9
            {
                return Err(Error::Config(format!("{:?}: level probabilities must match levels and sum to 1", c.name)));
            }
        }
        let known = |key: &str| -> bool {
            if numeric.iter().any(|c| c == key) {
                return true;
            }
            match key.split_once('=') {
                Some((col, level)) => self.categorical.iter().any(|c| c.name == col && c.levels.iter().any(|l| l == level)),
                None => false,
            }
        };
        let keys = self
            .assignment
            .coefficients
            .keys()
            .chain(self.outcome.linear.coefficients.keys())
            .chain(self.outcome.quadratic.iter().map(|q| &q.column))
            .chain(self.effect.column.iter());
        for key in keys {
            if !known(key) {
                return Err(Error::Config(format!("unknown covariate term {key:?}")));
            }
        }
        if let Some(b) = &self.baseline_column {
            if !numeric.contains(b) {
                return Err(Error::Config(format!("baseline column {b:?} is not a numeric covariate")));
            }
        }
        Ok(())
    }
}

struct UnitRng(ChaCha20Rng);

impl UnitRng {
    fn new(seed: u64, stream: u64) -> UnitRng {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        UnitRng(rng)
    }

    fn uniform(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// Both potential outcomes and the true propensity for every unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    pub ids: Vec<String>,
    pub e_true: Vec<f64>,
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
    pub tau: Vec<f64>,
}

impl SyntheticTruth {
    pub fn index(&self) -> HashMap<&str, usize> {
        self.ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect()
    }

    pub fn tau_by_id(&self) -> HashMap<String, f64> {
        self.ids.iter().cloned().zip(self.tau.iter().copied()).collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["unit_id", "e_true", "y0", "y1", "tau_true"])?;
        for i in 0..self.ids.len() {
            out.write_record([
                self.ids[i].clone(),
                self.e_true[i].to_string(),
                self.y0[i].to_string(),
                self.y1[i].to_string(),
                self.tau[i].to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<SyntheticTruth> {
        let mut reader = csv::Reader::from_path(path)?;
        let mut t = SyntheticTruth { ids: Vec::new(), e_true: Vec::new(), y0: Vec::new(), y1: Vec::new(), tau: Vec::new() };
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            let num = |k: usize| -> Result<f64> {
                rec.get(k)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Validation { row: i + 1, message: "malformed truth row".into() })
            };
            t.ids.push(rec.get(0).unwrap_or_default().to_string());
            t.e_true.push(num(1)?);
            t.y0.push(num(2)?);
            t.y1.push(num(3)?);
            t.tau.push(num(4)?);
        }
        Ok(t)
    }
}

/// A generated population: covariates, assignment and both outcomes.
#[derive(Debug, Clone)]
pub struct Population {
    pub config: DgpConfig,
    pub ids: Vec<String>,
    /// Numeric columns in [`DgpConfig::numeric_columns`] order.
    pub numeric: Vec<Vec<f64>>,
    /// Level index per categorical column.
    pub categorical: Vec<Vec<usize>>,
    pub lp_true: Vec<f64>,
    pub e_true: Vec<f64>,
    pub z: Vec<u8>,
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
}

struct UnitDraw {
    numeric: Vec<f64>,
    categorical: Vec<usize>,
    lp: f64,
    e: f64,
    z: u8,
    y0: f64,
    y1: f64,
}

/// Compiled linear predictor over a unit's covariates.
struct Compiled {
    intercept: f64,
    numeric: Vec<(usize, f64)>,
    levels: Vec<(usize, usize, f64)>,
}

impl Compiled {
    fn new(terms: &LinearTerms, numeric_cols: &[String], cats: &[CategoricalCovariate]) -> Compiled {
        let mut numeric = Vec::new();
        let mut levels = Vec::new();
        for (key, &coef) in &terms.coefficients {
            if let Some(j) = numeric_cols.iter().position(|c| c == key) {
                numeric.push((j, coef));
            } else if let Some((col, level)) = key.split_once('=') {
                let c = cats.iter().position(|c| c.name == col).expect("validated");
                let l = cats[c].levels.iter().position(|l| l == level).expect("validated");
                levels.push((c, l, coef));
            }
        }
        Compiled { intercept: terms.intercept, numeric, levels }
    }

    fn eval(&self, x: &[f64], cat: &[usize]) -> f64 {
        let mut v = self.intercept;
        for &(j, b) in &self.numeric {
            v += b * x[j];
        }
        for &(c, l, b) in &self.levels {
            if cat[c] == l {
                v += b;
            }
        }
        v
    }
}

pub fn generate(cfg: &DgpConfig) -> Result<Population> {
    cfg.validate()?;
    let numeric_cols = cfg.numeric_columns();
    let assign = Compiled::new(&cfg.assignment, &numeric_cols, &cfg.categorical);
    let base = Compiled::new(&cfg.outcome.linear, &numeric_cols, &cfg.categorical);
    let quad: Vec<(usize, f64, f64)> = cfg
        .outcome
        .quadratic
        .iter()
        .map(|q| (numeric_cols.iter().position(|c| *c == q.column).expect("validated"), q.center, q.coef))
        .collect();
    let effect_col = cfg.effect.column.as_ref().map(|c| numeric_cols.iter().position(|n| n == c).expect("validated"));
    let std_normal = Normal::standard();
    let cum: Vec<Vec<f64>> = cfg
        .categorical
        .iter()
        .map(|c| {
            c.probs
                .iter()
                .scan(0.0, |acc, p| {
                    *acc += p;
                    Some(*acc)
                })
                .collect()
        })
        .collect();

    let draws: Vec<UnitDraw> = (0..cfg.n)
        .into_par_iter()
        .map(|i| {
            let mut rng = UnitRng::new(cfg.seed, i as u64);
            let mut x = Vec::with_capacity(numeric_cols.len());
            for c in &cfg.numeric {
                match c.dist {
                    Distribution::Normal { mean, sd } => {
                        let q = rng.normal();
                        x.push(mean + sd * q);
                        if c.decile.is_some() {
                            x.push(decile_of(&std_normal, q));
                        }
                    }
                    Distribution::Lognormal { meanlog, sdlog } => {
                        let q = rng.normal();
                        x.push((meanlog + sdlog * q).exp());
                        if c.decile.is_some() {
                            x.push(decile_of(&std_normal, q));
                        }
                    }
                    Distribution::Uniform { lo, hi } => x.push(lo + (hi - lo) * rng.uniform()),
                    Distribution::Integer { lo, hi } => {
                        let span = (hi - lo + 1) as f64;
                        let k = ((rng.uniform() * span).floor() as i64).min(hi - lo);
                        x.push((lo + k) as f64);
                    }
                }
            }
            let cat: Vec<usize> = cum
                .iter()
                .map(|c| {
                    let u = rng.uniform();
                    c.iter().position(|&p| u < p).unwrap_or(c.len() - 1)
                })
                .collect();
            let lp = assign.eval(&x, &cat);
            let e = 1.0 / (1.0 + (-lp).exp());
            let z = u8::from(rng.uniform() < e);
            let mut f = base.eval(&x, &cat);
            for &(j, center, coef) in &quad {
                f += coef * (x[j] - center) * (x[j] - center);
            }
            let y0 = f + cfg.outcome.noise_sd * rng.normal();
            let mut tau = cfg.effect.intercept;
            if let Some(j) = effect_col {
                tau += cfg.effect.slope * (x[j] - cfg.effect.center);
            }
            tau += cfg.effect.noise_sd * rng.normal();
            UnitDraw { numeric: x, categorical: cat, lp, e, z, y0, y1: y0 + tau }
        })
        .collect();

    let width = digits(cfg.n).max(7);
    let mut pop = Population {
        config: cfg.clone(),
        ids: (1..=cfg.n).map(|i| format!("{}{:0width$}", cfg.id_prefix, i)).collect(),
        numeric: vec![Vec::with_capacity(cfg.n); numeric_cols.len()],
        categorical: vec![Vec::with_capacity(cfg.n); cfg.categorical.len()],
        lp_true: Vec::with_capacity(cfg.n),
        e_true: Vec::with_capacity(cfg.n),
        z: Vec::with_capacity(cfg.n),
        y0: Vec::with_capacity(cfg.n),
        y1: Vec::with_capacity(cfg.n),
    };
    for d in draws {
        for (col, v) in pop.numeric.iter_mut().zip(d.numeric) {
            col.push(v);
        }
        for (col, v) in pop.categorical.iter_mut().zip(d.categorical) {
            col.push(v);
        }
        pop.lp_true.push(d.lp);
        pop.e_true.push(d.e);
        pop.z.push(d.z);
        pop.y0.push(d.y0);
        pop.y1.push(d.y1);
    }

    let mean_e = stats::mean(&pop.e_true);
    let treated = pop.z.iter().filter(|&&z| z == 1).count();
    if !(1e-4..=1.0 - 1e-4).contains(&mean_e) || treated == 0 || treated == cfg.n {
        return Err(Error::Config(format!(
            "degenerate assignment: mean true propensity {mean_e:.3e}, {treated} of {} treated",
            cfg.n
        )));
    }
    Ok(pop)
}

fn decile_of(std_normal: &Normal, q: f64) -> f64 {
    (1.0 + (10.0 * std_normal.cdf(q)).floor()).min(10.0)
}

fn digits(n: usize) -> usize {
    n.to_string().len()
}

impl Population {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn observed(&self, i: usize) -> f64 {
        if self.z[i] == 1 {
            self.y1[i]
        } else {
            self.y0[i]
        }
    }

    pub fn tau(&self) -> Vec<f64> {
        self.y1.iter().zip(&self.y0).map(|(a, b)| a - b).collect()
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        let j = self.config.numeric_columns().iter().position(|c| c == name)?;
        Some(&self.numeric[j])
    }

    pub fn truth(&self) -> SyntheticTruth {
        SyntheticTruth {
            ids: self.ids.clone(),
            e_true: self.e_true.clone(),
            y0: self.y0.clone(),
            y1: self.y1.clone(),
            tau: self.tau(),
        }
    }

    /// Dataset file: `unit_id`, covariates, `z`, `y`.
    pub fn write_dataset_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let numeric_cols = self.config.numeric_columns();
        let mut header = vec!["unit_id".to_string()];
        header.extend(numeric_cols.iter().cloned());
        header.extend(self.config.categorical.iter().map(|c| c.name.clone()));
        header.push("z".into());
        header.push("y".into());
        out.write_record(&header)?;
        let mut rec = Vec::with_capacity(header.len());
        for i in 0..self.len() {
            rec.clear();
            rec.push(self.ids[i].clone());
            for col in &self.numeric {
                rec.push(col[i].to_string());
            }
            for (c, col) in self.config.categorical.iter().zip(&self.categorical) {
                rec.push(c.levels[col[i]].clone());
            }
            rec.push(self.z[i].to_string());
            rec.push(self.observed(i).to_string());
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn dataset_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_dataset_csv(&mut buf)?;
        Ok(buf)
    }

    /// Load the exported file as a sealed dataset.
    pub fn to_dataset(&self) -> Result<Dataset> {
        Dataset::from_csv_bytes(&self.dataset_bytes()?, &self.config.schema(), &LoadOptions::default())
    }

    pub fn metadata(&self) -> GenerationMetadata {
        GenerationMetadata {
            rng: RNG_ALGORITHM.into(),
            seed: self.config.seed,
            n: self.len(),
            treated: self.z.iter().filter(|&&z| z == 1).count(),
            config: self.config.clone(),
        }
    }

    /// Simple random sample of `m` units without replacement, kept in
    /// population order.
    pub fn subsample(&self, m: usize, seed: u64) -> Result<Population> {
        if m == 0 || m > self.len() {
            return Err(Error::Config(format!("cannot draw {m} of {} units", self.len())));
        }
        let idx = sample_indices(self.len(), m, seed);
        let pick = |v: &Vec<f64>| idx.iter().map(|&i| v[i]).collect::<Vec<f64>>();
        let treated = idx.iter().filter(|&&i| self.z[i] == 1).count();
        if treated == 0 || treated == m {
            return Err(Error::Config("subsample contains a single arm".into()));
        }
        let mut config = self.config.clone();
        config.n = m;
        Ok(Population {
            config,
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            numeric: self.numeric.iter().map(pick).collect(),
            categorical: self.categorical.iter().map(|c| idx.iter().map(|&i| c[i]).collect()).collect(),
            lp_true: pick(&self.lp_true),
            e_true: pick(&self.e_true),
            z: idx.iter().map(|&i| self.z[i]).collect(),
            y0: pick(&self.y0),
            y1: pick(&self.y1),
        })
    }
}

/// Partial Fisher-Yates on a ChaCha20 stream reserved for sampling; the
/// chosen indices are returned sorted.
pub fn sample_indices(n: usize, m: usize, seed: u64) -> Vec<usize> {
    let mut rng = UnitRng::new(seed, u64::MAX);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in 0..m {
        let span = (n - i) as f64;
        let j = i + ((rng.uniform() * span) as usize).min(n - i - 1);
        perm.swap(i, j);
    }
    let mut out = perm[..m].to_vec();
    out.sort_unstable();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationMetadata {
    pub rng: String,
    pub seed: u64,
    pub n: usize,
    pub treated: usize,
    pub config: DgpConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeforeAfter {
    pub per_unit: Vec<f64>,
    pub mean_treated: f64,
    pub mean_control: f64,
    pub mean_all: f64,
}

/// Outcome minus baseline per unit. A change in time, not a causal effect.
pub fn naive_before_after(ds: &Dataset, baseline_column: &str) -> Result<BeforeAfter> {
    let base = ds.numeric_column(baseline_column)?;
    let y = ds.outcomes()?;
    let per_unit: Vec<f64> = y.iter().zip(&base).map(|(a, b)| a - b).collect();
    let arm = |z: u8| -> Vec<f64> {
        per_unit.iter().zip(ds.treatment()).filter(|(_, &t)| t == z).map(|(v, _)| *v).collect()
    };
    Ok(BeforeAfter {
        mean_treated: stats::mean(&arm(1)),
        mean_control: stats::mean(&arm(0)),
        mean_all: stats::mean(&per_unit),
        per_unit,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub z_coefficient: f64,
}

/// Least squares of the outcome on the encoded covariates and `z`; the
/// coefficient of `z` is the usual regression-adjusted effect.
pub fn naive_regression(ds: &Dataset) -> Result<RegressionFit> {
    let y = ds.outcomes()?;
    let p = ds.width();
    let mut x = Vec::with_capacity(ds.n_units() * (p + 1));
    for i in 0..ds.n_units() {
        x.extend_from_slice(ds.row(i));
        x.push(ds.treatment()[i] as f64);
    }
    let beta = ols_with_intercept(&x, p + 1, y)
        .ok_or_else(|| Error::Singular("regression design matrix is rank deficient".into()))?;
    let mut names = vec!["(intercept)".to_string()];
    names.extend(ds.encoded_names().iter().cloned());
    names.push("z".into());
    Ok(RegressionFit { z_coefficient: beta[p + 1], names, coefficients: beta })
}

pub fn difference_in_means(ds: &Dataset) -> Result<f64> {
    let y = ds.outcomes()?;
    let arm = |z: u8| -> Vec<f64> { y.iter().zip(ds.treatment()).filter(|(_, &t)| t == z).map(|(v, _)| *v).collect() };
    Ok(stats::mean(&arm(1)) - stats::mean(&arm(0)))
}

/// The "traditional" targeting score: predicted outcome from a least-squares
/// fit of the outcome on covariates alone, ignoring the intervention.
pub fn predictive_scores(ds: &Dataset) -> Result<Vec<f64>> {
    let y = ds.outcomes()?;
    let beta = ols_with_intercept(ds.matrix(), ds.width(), y)
        .ok_or_else(|| Error::Singular("predictive design matrix is rank deficient".into()))?;
    Ok((0..ds.n_units())
        .map(|i| beta[0] + beta[1..].iter().zip(ds.row(i)).map(|(b, v)| b * v).sum::<f64>())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub n_effects: usize,
    pub n_treated: usize,
    /// Mean estimated effect over treated focal units.
    pub att_estimate: f64,
    /// Mean true effect over the same treated focal units.
    pub att_true: f64,
    pub att_bias: f64,
    /// Mean of (estimate - truth) over every row.
    pub mean_bias: f64,
    /// Root mean squared unit-level error over every row.
    pub unit_rmse: f64,
    /// Spearman correlation of estimated and true unit effects.
    pub rank_correlation: f64,
}

pub fn evaluate_run(effects: &EffectTable, truth: &SyntheticTruth) -> Result<Evaluation> {
    if effects.is_empty() {
        return Err(Error::Evaluation("no effect estimates to evaluate".into()));
    }
    let index = truth.index();
    let mut est = Vec::with_capacity(effects.len());
    let mut tru = Vec::with_capacity(effects.len());
    let mut est_t = Vec::new();
    let mut tru_t = Vec::new();
    for r in &effects.rows {
        let i = *index
            .get(r.unit_id.as_str())
            .ok_or_else(|| Error::Evaluation(format!("unit {:?} is not in the truth file", r.unit_id)))?;
        est.push(r.tau_hat);
        tru.push(truth.tau[i]);
        if r.z == 1 {
            est_t.push(r.tau_hat);
            tru_t.push(truth.tau[i]);
        }
    }
    let errors: Vec<f64> = est.iter().zip(&tru).map(|(a, b)| a - b).collect();
    let att_estimate = stats::mean(&est_t);
    let att_true = stats::mean(&tru_t);
    Ok(Evaluation {
        n_effects: est.len(),
        n_treated: est_t.len(),
        att_estimate,
        att_true,
        att_bias: att_estimate - att_true,
        mean_bias: stats::mean(&errors),
        unit_rmse: (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt(),
        rank_correlation: stats::spearman(&est, &tru),
    })
}
