//! One function per subcommand. Each reads its inputs from the run
//! directory through digest checks, writes artifacts under `<step>/` and
//! appends a manifest record.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use clonematch::dataset::{
    load_dataset, release_escrow, write_rejections, ColumnKind, ColumnSpec, CovariateSchema, Dataset, Group,
    LoadOptions,
};
use clonematch::design::{
    assign_bins, balance_report, freeze_design, trim_support, BalanceReport, BinPlan, DesignIteration, DesignReport,
    TrimDecision,
};
use clonematch::digest::sha256_hex;
use clonematch::effects::{
    aggregate, build_target_list, compare_lists, unit_effects, EffectTable, TargetList, REALIZED_BEFORE_AFTER,
};
use clonematch::matching::{match_units, validate_match_set, MatchSet};
use clonematch::propensity::{fit_propensity, score, score_histograms, PropensityModel, ScoreTable};
use clonematch::simulate::{evaluate_run, generate, naive_before_after, predictive_scores, DgpConfig, SyntheticTruth};
use clonematch::Error;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::{Run, StepWriter, DESIGN_STEPS};

const SUMMARY_BINS: usize = 20;

/// What `load` recorded about the input file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub path: PathBuf,
    pub sha256: String,
    pub schema: CovariateSchema,
    pub options: LoadOptions,
}

pub struct Ctx<'a> {
    pub run: &'a mut Run,
    pub cfg: &'a RunConfig,
}

impl Ctx<'_> {
    fn config_value(&self) -> Value {
        serde_json::to_value(self.cfg).unwrap_or(Value::Null)
    }

    fn commit(&mut self, w: StepWriter) -> Result<Value, CliError> {
        let config = self.config_value();
        let rec = self.run.commit(w, config)?;
        Ok(json!({ "step": rec.step, "outputs": rec.outputs, "summary": rec.summary }))
    }

    fn guard_design(&self, step: &str) -> Result<(), CliError> {
        if DESIGN_STEPS.contains(&step) && self.run.frozen() {
            return Err(CliError::Frozen(format!(
                "the design is frozen; {step} would change it after the fact. Start a new run directory"
            )));
        }
        Ok(())
    }

    fn dataset(&self) -> Result<(Dataset, DatasetRecord), CliError> {
        let rec: DatasetRecord = self.run.artifact_json("load", "dataset.json")?;
        let ds = load_dataset(&rec.path, &rec.schema, &rec.options)?;
        if ds.provenance() != rec.sha256 {
            return Err(Error::Provenance(format!(
                "{} changed since load (sha256 {} now, {} recorded)",
                rec.path.display(),
                ds.provenance(),
                rec.sha256
            ))
            .into());
        }
        Ok((ds, rec))
    }

    fn model(&self) -> Result<PropensityModel, CliError> {
        let bytes = self.run.artifact("fit", "model.json")?;
        Ok(PropensityModel::from_json(&String::from_utf8_lossy(&bytes))?)
    }

    fn scores(&self, ds: &Dataset) -> Result<(PropensityModel, ScoreTable), CliError> {
        let model = self.model()?;
        let scores = score(&model, ds)?;
        Ok((model, scores))
    }

    fn design(&self) -> Result<DesignReport, CliError> {
        let bytes = self.run.artifact("freeze", "design.json")?;
        Ok(DesignReport::from_json(&String::from_utf8_lossy(&bytes))?)
    }
}

/// Covariate schema from the header: every column other than id, treatment
/// and outcome, numeric when all non-empty values parse as numbers.
pub fn infer_schema(path: &Path, opts: &LoadOptions) -> Result<CovariateSchema, CliError> {
    let mut reader = csv::Reader::from_path(path).map_err(Error::Csv)?;
    let header: Vec<String> = reader.headers().map_err(Error::Csv)?.iter().map(str::to_string).collect();
    let reserved = [&opts.id_column, &opts.treatment_column, &opts.outcome_column];
    let cols: Vec<usize> = (0..header.len()).filter(|&i| !reserved.contains(&&header[i])).collect();
    let mut numeric = vec![true; header.len()];
    for rec in reader.records() {
        let rec = rec.map_err(Error::Csv)?;
        for &c in &cols {
            let v = rec.get(c).unwrap_or("").trim();
            if !v.is_empty() && v.parse::<f64>().is_err() {
                numeric[c] = false;
            }
        }
    }
    Ok(CovariateSchema::new(
        cols.iter()
            .map(|&c| if numeric[c] { ColumnSpec::numeric(&header[c]) } else { ColumnSpec::categorical(&header[c]) })
            .collect(),
    ))
}

pub fn load(ctx: &mut Ctx, data: &Path) -> Result<Value, CliError> {
    ctx.guard_design("load")?;
    let opts = ctx.cfg.data.load_options();
    let schema = match &ctx.cfg.data.covariates {
        Some(cols) => CovariateSchema::new(cols.clone()),
        None => infer_schema(data, &opts)?,
    };
    let ds = load_dataset(data, &schema, &opts)?;
    let path = fs::canonicalize(data)?;
    let rec = DatasetRecord { path: path.clone(), sha256: ds.provenance().to_string(), schema, options: opts };

    let mut w = ctx.run.begin("load")?;
    w.input(&path.display().to_string(), ds.provenance());
    w.write_json(ctx.run, "dataset.json", &rec)?;
    w.write_with(ctx.run, "rejections.csv", |b| write_rejections(b, ds.rejections()))?;
    let mut covariates = Vec::new();
    for col in &ds.schema().columns {
        for group in [Group::Treated, Group::Control] {
            covariates.push(ds.summarize_covariate(&col.name, group, SUMMARY_BINS)?);
        }
    }
    w.write_json(ctx.run, "covariates.json", &covariates)?;
    let (treated, control) = ds.arm_counts();
    w.summary = json!({
        "units": ds.n_units(),
        "treated": treated,
        "control": control,
        "rejected": ds.rejections().len(),
        "covariates": ds.schema().columns.iter().map(|c| json!({
            "name": c.name,
            "kind": match c.kind { ColumnKind::Numeric => "numeric", ColumnKind::Categorical => "categorical" },
        })).collect::<Vec<_>>(),
        "sha256": ds.provenance(),
    });
    ctx.commit(w)
}

pub fn fit(ctx: &mut Ctx) -> Result<Value, CliError> {
    ctx.guard_design("fit")?;
    ctx.run.require("fit")?;
    let (ds, _) = ctx.dataset()?;
    let model = fit_propensity(&ds, &ctx.cfg.fit)?;
    let scores = score(&model, &ds)?;
    let hist = score_histograms(&scores, SUMMARY_BINS);

    let mut w = ctx.run.begin("fit")?;
    w.upstream(ctx.run, "load", "dataset.json")?;
    w.write(ctx.run, "model.json", model.to_json()?.as_bytes())?;
    w.write_with(ctx.run, "scores.csv", |b| scores.write_csv(b))?;
    w.write_with(ctx.run, "lp_histogram.csv", |b| write_histogram(b, &hist))?;
    if !model.converged {
        eprintln!("{}", json!({ "warning": "propensity fit did not converge", "message": model.message }));
    }
    w.summary = json!({
        "converged": model.converged,
        "iterations": model.iterations,
        "final_gradient_norm": model.final_gradient_norm,
        "log_likelihood": model.log_likelihood,
        "message": model.message,
        "model_digest": model.digest(),
    });
    ctx.commit(w)
}

fn write_histogram(b: &mut Vec<u8>, h: &clonematch::propensity::PairedHistogram) -> clonematch::Result<()> {
    let mut out = csv::Writer::from_writer(b);
    out.write_record(["lo", "hi", "treated", "control"])?;
    for i in 0..h.treated.counts.len() {
        out.write_record([
            h.treated.edges[i].to_string(),
            h.treated.edges[i + 1].to_string(),
            h.treated.counts[i].to_string(),
            h.control.counts[i].to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn bin(ctx: &mut Ctx) -> Result<Value, CliError> {
    ctx.guard_design("bin")?;
    ctx.run.require("bin")?;
    let (ds, _) = ctx.dataset()?;
    let (_, scores) = ctx.scores(&ds)?;
    let plan = assign_bins(&scores, ctx.cfg.design.bins, ctx.cfg.design.bin_method)?;

    let mut w = ctx.run.begin("bin")?;
    w.upstream(ctx.run, "fit", "model.json")?;
    w.write_json(ctx.run, "bin_plan.json", &plan)?;
    w.write_with(ctx.run, "bins.csv", |b| plan.write_csv(b))?;
    w.summary = json!({ "method": plan.method, "edges": plan.edges, "counts": plan.counts() });
    ctx.commit(w)
}

pub fn balance(ctx: &mut Ctx) -> Result<Value, CliError> {
    ctx.guard_design("balance")?;
    ctx.run.require("balance")?;
    let (ds, _) = ctx.dataset()?;
    let plan: BinPlan = ctx.run.artifact_json("bin", "bin_plan.json")?;
    let report = balance_report(&ds, &plan, ctx.cfg.design.threshold)?;
    let table = report.render_table();

    let mut w = ctx.run.begin("balance")?;
    w.upstream(ctx.run, "bin", "bin_plan.json")?;
    w.write_json(ctx.run, "balance.json", &report)?;
    w.write_with(ctx.run, "balance.csv", |b| report.write_csv(b))?;
    w.write(ctx.run, "balance.txt", table.as_bytes())?;
    eprint!("{table}");
    let note = if report.balanced { "balanced" } else { "unbalanced" };
    w.summary = serde_json::to_value(DesignIteration::from_balance(&plan, &report, note))?;
    ctx.commit(w)
}

pub fn trim(ctx: &mut Ctx) -> Result<Value, CliError> {
    ctx.guard_design("trim")?;
    ctx.run.require("trim")?;
    let (ds, _) = ctx.dataset()?;
    let (_, scores) = ctx.scores(&ds)?;
    let decision = trim_support(&scores, ctx.cfg.design.trim)?;

    let mut w = ctx.run.begin("trim")?;
    w.upstream(ctx.run, "fit", "model.json")?;
    w.write_json(ctx.run, "trim.json", &decision)?;
    w.write_with(ctx.run, "dropped.csv", |b| decision.write_csv(b))?;
    w.summary = json!({
        "support": [decision.support.0, decision.support.1],
        "retained": decision.retained.len(),
        "dropped": decision.counts,
    });
    ctx.commit(w)
}

pub fn freeze(ctx: &mut Ctx) -> Result<Value, CliError> {
    ctx.guard_design("freeze")?;
    ctx.run.require("freeze")?;
    let model = ctx.model()?;
    let plan: BinPlan = ctx.run.artifact_json("bin", "bin_plan.json")?;
    let report: BalanceReport = ctx.run.artifact_json("balance", "balance.json")?;
    let decision: TrimDecision = ctx.run.artifact_json("trim", "trim.json")?;
    let history = ctx
        .run
        .manifest
        .records("balance")
        .filter_map(|r| serde_json::from_value::<DesignIteration>(r.summary.clone()).ok())
        .collect();
    let design = freeze_design(&model, plan, report, decision, ctx.cfg.design.override_balance, history)?;

    let mut w = ctx.run.begin("freeze")?;
    for (step, name) in [("fit", "model.json"), ("bin", "bin_plan.json"), ("balance", "balance.json"), ("trim", "trim.json")] {
        w.upstream(ctx.run, step, name)?;
    }
    w.write(ctx.run, "design.json", design.to_json()?.as_bytes())?;
    w.summary = json!({
        "design_digest": design.digest(),
        "balanced": design.balance.balanced,
        "override_balance": design.override_balance,
        "iterations": design.history.len(),
    });
    ctx.commit(w)
}

pub fn matching(ctx: &mut Ctx) -> Result<Value, CliError> {
    ctx.run.require("match")?;
    let (ds, _) = ctx.dataset()?;
    let (_, scores) = ctx.scores(&ds)?;
    let design = ctx.design()?;
    let ms = match_units(&scores, &design, &ctx.cfg.matching)?;
    validate_match_set(&ms, &scores)?;

    let mut w = ctx.run.begin("match")?;
    w.upstream(ctx.run, "freeze", "design.json")?;
    w.write_json(ctx.run, "matches.json", &ms)?;
    w.write_with(ctx.run, "matches.csv", |b| ms.write_csv(b))?;
    w.write_with(ctx.run, "unmatched.csv", |b| ms.write_unmatched_csv(b))?;
    w.summary = json!({
        "groups": ms.groups.len(),
        "pairs": ms.n_pairs(),
        "unmatched": ms.unmatched.len(),
        "spec": ms.spec,
    });
    ctx.commit(w)
}

/// Lift escrow under the frozen design. Records a `release` step.
fn release(ctx: &mut Ctx) -> Result<Dataset, CliError> {
    if ctx.run.manifest.current("freeze").is_none() {
        return Err(Error::Escrow("no frozen design in this run; outcomes stay sealed".into()).into());
    }
    ctx.run.require("release")?;
    let (ds, _) = ctx.dataset()?;
    let design = ctx.design()?;
    let ds = release_escrow(ds, &design)?;
    let audit = ds.escrow_audit().cloned();

    let mut w = ctx.run.begin("release")?;
    w.upstream(ctx.run, "freeze", "design.json")?;
    w.upstream(ctx.run, "match", "matches.json")?;
    w.write_json(ctx.run, "release.json", &audit)?;
    w.summary = serde_json::to_value(&audit)?;
    ctx.commit(w)?;
    Ok(ds)
}

pub fn effects(ctx: &mut Ctx) -> Result<Value, CliError> {
    let ds = release(ctx)?;
    let ms: MatchSet = ctx.run.artifact_json("match", "matches.json")?;
    let table = unit_effects(&ms, &ds)?;
    let att = aggregate(&table, |r| r.z == 1).ok();
    let atc = aggregate(&table, |r| r.z == 0).ok();

    let mut w = ctx.run.begin("effects")?;
    w.upstream(ctx.run, "match", "matches.json")?;
    w.upstream(ctx.run, "release", "release.json")?;
    w.write_json(ctx.run, "effects.json", &table)?;
    w.write_with(ctx.run, "effects.csv", |b| table.write_csv(b))?;
    w.summary = json!({ "rows": table.len(), "att": att, "atc": atc });
    ctx.commit(w)
}

pub fn rank(ctx: &mut Ctx) -> Result<Value, CliError> {
    ctx.run.require("rank")?;
    let table: EffectTable = ctx.run.artifact_json("effects", "effects.json")?;
    let list = build_target_list(&table)?;

    let mut w = ctx.run.begin("rank")?;
    w.upstream(ctx.run, "effects", "effects.json")?;
    w.write_json(ctx.run, "target_list.json", &list)?;
    w.write_with(ctx.run, "target_list.csv", |b| list.write_csv(b))?;
    w.summary = json!({ "units": list.len(), "list": list.name });
    ctx.commit(w)
}

pub fn compare(ctx: &mut Ctx, truth: Option<&Path>) -> Result<Value, CliError> {
    ctx.run.require("compare")?;
    let causal: TargetList = ctx.run.artifact_json("rank", "target_list.json")?;
    // the predictive list and before-after values need outcomes; the design
    // is frozen and matched, so this read goes through the same escrow check
    let (ds, _) = ctx.dataset()?;
    let ds = release_escrow(ds, &ctx.design()?)?;
    let predicted = predictive_scores(&ds)?;
    let mut ids = Vec::with_capacity(causal.len());
    let mut scores = Vec::with_capacity(causal.len());
    for id in &causal.unit_ids {
        let i = ds.index_of(id).ok_or_else(|| Error::Evaluation(format!("unit {id:?} is not in the dataset")))?;
        ids.push(id.clone());
        scores.push(predicted[i]);
    }
    let predictive = TargetList::from_scores("predictive", &ids, &scores)?;

    let mut w = ctx.run.begin("compare")?;
    w.upstream(ctx.run, "rank", "target_list.json")?;
    let (realized, definition): (HashMap<String, f64>, String) = match (truth, &ctx.cfg.compare.baseline_column) {
        (Some(path), _) => {
            let bytes = fs::read(path)?;
            w.input(&path.display().to_string(), &sha256_hex(&bytes));
            (SyntheticTruth::read_csv(path)?.tau_by_id(), "true unit effect from the simulation truth file".into())
        }
        (None, Some(col)) => {
            let ba = naive_before_after(&ds, col)?;
            (ds.ids().iter().cloned().zip(ba.per_unit).collect(), REALIZED_BEFORE_AFTER.into())
        }
        (None, None) => {
            return Err(CliError::Usage(
                "compare needs realized values: pass --truth or set a baseline column".into(),
            ))
        }
    };
    let cmp = compare_lists(&causal, &predictive, &realized, &definition)?;
    w.write_json(ctx.run, "predictive_list.json", &predictive)?;
    w.write_with(ctx.run, "predictive_list.csv", |b| predictive.write_csv(b))?;
    w.write_json(ctx.run, "comparison.json", &cmp)?;
    w.write_with(ctx.run, "comparison.csv", |b| cmp.write_csv(b))?;
    w.write_with(ctx.run, "plot_data.csv", |b| cmp.write_plot_data(b))?;
    w.summary = json!({
        "realized_definition": cmp.realized_definition,
        "population": cmp.population,
        "top_decile": { "causal": cmp.mean("causal", 10), "predictive": cmp.mean("predictive", 10) },
        "bottom_decile": { "causal": cmp.mean("causal", 1), "predictive": cmp.mean("predictive", 1) },
    });
    ctx.commit(w)
}

pub fn evaluate(ctx: &mut Ctx, truth: &Path) -> Result<Value, CliError> {
    ctx.run.require("evaluate")?;
    let table: EffectTable = ctx.run.artifact_json("effects", "effects.json")?;
    let bytes = fs::read(truth)?;
    let ev = evaluate_run(&table, &SyntheticTruth::read_csv(truth)?)?;

    let mut w = ctx.run.begin("evaluate")?;
    w.upstream(ctx.run, "effects", "effects.json")?;
    w.input(&truth.display().to_string(), &sha256_hex(&bytes));
    w.write_json(ctx.run, "evaluation.json", &ev)?;
    w.summary = serde_json::to_value(&ev)?;
    ctx.commit(w)
}

pub fn simulate(cfg: DgpConfig, out: &Path) -> Result<Value, CliError> {
    let pop = generate(&cfg)?;
    fs::create_dir_all(out)?;
    let data = pop.dataset_bytes()?;
    fs::write(out.join("data.csv"), &data)?;
    let mut truth = Vec::new();
    pop.truth().write_csv(&mut truth)?;
    fs::write(out.join("truth.csv"), &truth)?;
    let meta = pop.metadata();
    let mut meta_bytes = serde_json::to_vec_pretty(&meta)?;
    meta_bytes.push(b'\n');
    fs::write(out.join("metadata.json"), &meta_bytes)?;
    fs::write(out.join("dgp.toml"), cfg.to_toml()?)?;
    Ok(json!({
        "step": "simulate",
        "out": out.display().to_string(),
        "units": meta.n,
        "treated": meta.treated,
        "seed": meta.seed,
        "rng": meta.rng,
        "data_sha256": sha256_hex(&data),
        "truth_sha256": sha256_hex(&truth),
    }))
}
