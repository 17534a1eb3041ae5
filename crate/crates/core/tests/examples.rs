//! Worked examples with hand-computed or independently recomputed answers.

use std::collections::{BTreeMap, HashMap};

use clonematch::dataset::{load_dataset, release_escrow, ColumnSpec, CovariateSchema, Dataset, Group, LoadOptions};
use clonematch::design::{
    assign_bins, assign_bins_with_edges, balance_report, freeze_design, trim_support, BinMethod, DesignIteration,
    DesignReport, TrimRule,
};
use clonematch::effects::{aggregate, compare_lists, unit_effects, EffectRow, EffectTable, TargetList};
use clonematch::matching::{
    impute_clones, CloneGroup, Direction, MatchSet, MatchSpec, Unmatched, UnmatchedReason,
};
use clonematch::pipeline::{design_only, run_pipeline, PipelineConfig};
use clonematch::propensity::{fit_logistic, fit_propensity, logit, score, score_histograms, FitOptions, ScoreTable};
use clonematch::simulate::{
    evaluate_run, generate, naive_before_after, naive_regression, BaselineOutcome, DgpConfig, Distribution,
    EffectSurface, LinearTerms, NumericCovariate, SyntheticTruth,
};
use clonematch::{stats, Error};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

/// `unit_id,z,y,x` rows.
fn small_dataset(rows: &[(&str, u8, f64, f64)]) -> Dataset {
    let mut csv = String::from("unit_id,z,y,x\n");
    for (id, z, y, x) in rows {
        csv.push_str(&format!("{id},{z},{y},{x}\n"));
    }
    let schema = CovariateSchema::new(vec![ColumnSpec::numeric("x")]);
    Dataset::from_csv_bytes(csv.as_bytes(), &schema, &LoadOptions::default()).unwrap()
}

fn one_bin_config() -> PipelineConfig {
    PipelineConfig { bins: 1, override_balance: true, ..PipelineConfig::default() }
}

fn released(ds: Dataset) -> (Dataset, DesignReport) {
    let (design, _, _) = design_only(&ds, &one_bin_config()).unwrap();
    (release_escrow(ds, &design).unwrap(), design)
}

fn terms(intercept: f64, pairs: &[(&str, f64)]) -> LinearTerms {
    LinearTerms { intercept, coefficients: pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect::<BTreeMap<_, _>>() }
}

fn one_covariate_config(n: usize, seed: u64) -> DgpConfig {
    DgpConfig {
        name: "hand".into(),
        n,
        seed,
        id_prefix: "u".into(),
        baseline_column: None,
        numeric: vec![NumericCovariate {
            name: "x".into(),
            dist: Distribution::Uniform { lo: 0.0, hi: 10.0 },
            decile: None,
        }],
        categorical: Vec::new(),
        assignment: terms(-1.0, &[("x", 0.3)]),
        outcome: BaselineOutcome { linear: terms(2.0, &[("x", 0.5)]), quadratic: Vec::new(), noise_sd: 1.0 },
        effect: EffectSurface { intercept: 1.0, column: Some("x".into()), slope: 0.2, center: 5.0, noise_sd: 0.0 },
    }
}

#[test]
fn hand_seeded_population_matches_formulas() {
    let (pop, seed) = (0..50u64)
        .find_map(|s| generate(&one_covariate_config(4, s)).ok().map(|p| (p, s)))
        .expect("some seed gives both arms");
    let bytes = pop.dataset_bytes().unwrap();
    let mut reader = csv::Reader::from_reader(bytes.as_slice());
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 4);
    for (i, row) in rows.iter().enumerate() {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut u = || (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        let x = 10.0 * u();
        let e = 1.0 / (1.0 + (1.0 - 0.3 * x).exp());
        let z = (u() < e) as u8;
        let (a, b) = (1.0 - u(), u());
        let noise = (-2.0 * a.ln()).sqrt() * (std::f64::consts::TAU * b).cos();
        let y0 = 2.0 + 0.5 * x + noise;
        let y1 = y0 + 1.0 + 0.2 * (x - 5.0);
        let observed = z as f64 * y1 + (1 - z) as f64 * y0;

        assert_eq!(&row[0], format!("u{:07}", i + 1));
        assert!(close(row[1].parse().unwrap(), x, 1e-12));
        assert_eq!(row[2].parse::<u8>().unwrap(), z);
        assert!(close(row[3].parse().unwrap(), observed, 1e-12), "row {i}");
    }
}

#[test]
fn exported_outcome_is_the_revealed_potential_outcome() {
    let pop = generate(&DgpConfig::preset("ferrari").unwrap().with_n(3_000)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    let truth_path = dir.path().join("truth.csv");
    pop.write_dataset_csv(std::fs::File::create(&data).unwrap()).unwrap();
    pop.truth().write_csv(std::fs::File::create(&truth_path).unwrap()).unwrap();

    let ds = load_dataset(&data, &pop.config.schema(), &LoadOptions::default()).unwrap();
    let (ds, _) = released(ds);
    let truth = SyntheticTruth::read_csv(&truth_path).unwrap();
    let index = truth.index();
    for (i, id) in ds.ids().iter().enumerate() {
        let t = index[id.as_str()];
        let want = if ds.treatment()[i] == 1 { truth.y1[t] } else { truth.y0[t] };
        assert_eq!(ds.outcome(i).unwrap(), want, "unit {id}");
        assert!(close(truth.tau[t], truth.y1[t] - truth.y0[t], 1e-12));
    }
}

#[test]
fn large_synthetic_file_keeps_its_count() {
    let pop = generate(&DgpConfig::preset("doctors").unwrap()).unwrap();
    let ds = pop.to_dataset().unwrap();
    assert_eq!(ds.n_units(), 250_000);
    assert!(ds.rejections().is_empty());

    // treated doctors write about half again as many baseline scripts
    let t = ds.summarize_covariate("scripts_t1", Group::Treated, 20).unwrap();
    let c = ds.summarize_covariate("scripts_t1", Group::Control, 20).unwrap();
    let ratio = t.mean.unwrap() / c.mean.unwrap();
    assert!((1.4..1.6).contains(&ratio), "ratio {ratio}");
    assert_eq!(t.n + c.n, 250_000);
}

#[test]
fn release_requires_the_design_of_this_file() {
    let rows = [("a", 1, 5.0, 1.0), ("b", 0, 2.0, 2.0), ("c", 1, 4.0, 3.0), ("d", 0, 1.0, 0.5), ("e", 0, 3.0, 2.5)];
    let ds = small_dataset(&rows);
    let (design, _, _) = design_only(&ds, &one_bin_config()).unwrap();

    let other = small_dataset(&[("a", 1, 5.0, 1.0), ("b", 0, 2.0, 2.0), ("c", 1, 4.0, 3.0), ("d", 0, 9.0, 0.5)]);
    assert!(matches!(release_escrow(other, &design), Err(Error::Provenance(_))));

    assert!(matches!(ds.outcomes(), Err(Error::Escrow(_))));
    let open = release_escrow(ds, &design).unwrap();
    assert_eq!(open.outcomes().unwrap(), &[5.0, 2.0, 4.0, 1.0, 3.0]);
    assert_eq!(open.escrow_audit().unwrap().design_digest, design.digest());
}

#[test]
fn imputation_and_effects_by_hand() {
    // a: treated, outcome 15, one clone with 15 (no effect)
    // b: treated, outcome 5, one clone with 1 (effect 4)
    // c: treated, outcome 7, clones 2, 4, 6 (counterfactual 4)
    // d: control, outcome 1, one treated clone with 5 (effect 4)
    // f: treated, unmatched
    let rows = [
        ("a", 1, 15.0, 1.0),
        ("b", 1, 5.0, 2.0),
        ("c", 1, 7.0, 3.0),
        ("f", 1, 9.0, 2.5),
        ("p", 0, 15.0, 1.2),
        ("q", 0, 1.0, 2.2),
        ("r", 0, 2.0, 2.8),
        ("s", 0, 4.0, 2.9),
        ("t", 0, 6.0, 3.1),
        ("d", 0, 1.0, 1.9),
    ];
    let ds = small_dataset(&rows);
    let (ds, design) = released(ds);
    let group = |i: usize, focal: &str, z: u8, clones: &[&str]| CloneGroup {
        group_index: i,
        focal_id: focal.into(),
        focal_z: z,
        focal_lp: 0.0,
        clone_ids: clones.iter().map(|c| c.to_string()).collect(),
        distances: vec![0.0; clones.len()],
    };
    let ms = MatchSet {
        spec: MatchSpec { k: 3, direction: Direction::Both, ..MatchSpec::default() },
        caliper: None,
        groups: vec![
            group(0, "a", 1, &["p"]),
            group(1, "b", 1, &["q"]),
            group(2, "c", 1, &["r", "s", "t"]),
            group(3, "d", 0, &["b"]),
        ],
        unmatched: vec![Unmatched { focal_id: "f".into(), focal_z: 1, reason: UnmatchedReason::Caliper }],
        total_distance: 0.0,
        design_digest: design.digest(),
        dataset_digest: ds.provenance().to_string(),
    };
    let imp = impute_clones(&ms, &ds).unwrap();
    let cf: Vec<f64> = imp.rows.iter().map(|r| r.counterfactual).collect();
    assert_eq!(cf, vec![15.0, 1.0, 4.0, 5.0]);
    assert_eq!(imp.excluded, vec!["f".to_string()]);

    let eff = unit_effects(&ms, &ds).unwrap();
    let tau: Vec<(&str, f64)> = eff.rows.iter().map(|r| (r.unit_id.as_str(), r.tau_hat)).collect();
    assert_eq!(tau, vec![("a", 0.0), ("b", 4.0), ("c", 3.0), ("d", 4.0)]);
    assert!(eff.rows.iter().all(|r| r.unit_id != "f"));

    let treated = aggregate(&eff, |r| r.z == 1).unwrap();
    let manual: Vec<f64> = eff.rows.iter().filter(|r| r.z == 1).map(|r| r.tau_hat).collect();
    assert!(close(treated.mean, stats::mean(&manual), 1e-15));
    assert!(close(treated.sd, stats::sample_sd(&manual), 1e-15));
    assert_eq!(treated.count, 3);
}

#[test]
fn treated_effect_decomposes_into_outcomes_minus_clone_means() {
    let pop = generate(&DgpConfig::preset("ferrari").unwrap().with_n(4_000).with_seed(5)).unwrap();
    let mut cfg = one_bin_config();
    cfg.matching.k = 4;
    let run = run_pipeline(pop.to_dataset().unwrap(), &cfg).unwrap();
    let y = run.dataset.outcomes().unwrap();
    let at = |id: &str| y[run.dataset.index_of(id).unwrap()];

    let groups: Vec<&CloneGroup> = run.matches.groups_for(1).collect();
    let focal_mean = groups.iter().map(|g| at(&g.focal_id)).sum::<f64>() / groups.len() as f64;
    // each clone outcome carries weight 1/(group size) within its group
    let clone_mean = groups
        .iter()
        .map(|g| g.clone_ids.iter().map(|c| at(c) / g.clone_ids.len() as f64).sum::<f64>())
        .sum::<f64>()
        / groups.len() as f64;
    let att = aggregate(&run.effects, |r| r.z == 1).unwrap().mean;
    assert!(close(att, focal_mean - clone_mean, 1e-9), "{att} vs {}", focal_mean - clone_mean);
}

#[test]
fn hand_bin_smd() {
    let rows = [("t1", 1, 0.0, 2.0), ("t2", 1, 0.0, 4.0), ("c1", 0, 0.0, 1.0), ("c2", 0, 0.0, 3.0)];
    let ds = small_dataset(&rows);
    let mut scores = ScoreTable::from_lp(ds.ids().to_vec(), ds.treatment().to_vec(), vec![0.0; 4]);
    scores.dataset_digest = ds.provenance().to_string();
    let plan = assign_bins_with_edges(&scores, vec![-1.0, 1.0]).unwrap();
    let rep = balance_report(&ds, &plan, 0.1).unwrap();
    assert_eq!(rep.cells.len(), 1);
    assert!(close(rep.cells[0].smd, 1.0 / 2.0f64.sqrt(), 1e-12));
    assert!(!rep.balanced);

    let same = [("t1", 1, 0.0, 2.0), ("t2", 1, 0.0, 4.0), ("c1", 0, 0.0, 2.0), ("c2", 0, 0.0, 4.0)];
    let ds = small_dataset(&same);
    scores.dataset_digest = ds.provenance().to_string();
    let plan = assign_bins_with_edges(&scores, vec![-1.0, 1.0]).unwrap();
    let rep = balance_report(&ds, &plan, 0.1).unwrap();
    assert!(rep.cells.iter().all(|c| c.smd == 0.0));
    assert!(rep.balanced);
}

#[test]
fn binning_on_fitted_scores_reduces_confounder_imbalance() {
    let pop = generate(&DgpConfig::preset("balance").unwrap().with_n(20_000)).unwrap();
    let ds = pop.to_dataset().unwrap();
    let model = fit_propensity(&ds, &FitOptions::default()).unwrap();
    let scores = score(&model, &ds).unwrap();
    let plan = assign_bins(&scores, 10, BinMethod::Quantile).unwrap();
    let rep = balance_report(&ds, &plan, 0.1).unwrap();
    let overall = rep.overall.iter().find(|o| o.covariate == "rx_decile").unwrap().smd.abs();
    let mut checked = 0;
    for c in rep.cells.iter().filter(|c| c.covariate == "rx_decile" && c.n_treated >= 30 && c.n_control >= 30) {
        assert!(c.smd.abs() < overall, "bin {}: {} vs {overall}", c.bin, c.smd);
        checked += 1;
    }
    assert!(checked >= 8);
}

#[test]
fn probability_bin_maps_through_the_logit() {
    // e from 0.005 to 0.6; the top bin [logit 0.5, logit 0.6] is closed
    let e: Vec<f64> = (1..=120).map(|i| i as f64 / 200.0).collect();
    let ids: Vec<String> = (0..e.len()).map(|i| format!("u{i:03}")).collect();
    let z: Vec<u8> = (0..e.len()).map(|i| (i % 2) as u8).collect();
    let scores = ScoreTable::from_lp(ids, z, e.iter().map(|&p| logit(p)).collect());
    let (lo, hi) = stats::min_max(&scores.lp).unwrap();
    let plan = assign_bins_with_edges(&scores, vec![lo, logit(0.5), hi.max(logit(0.6))]).unwrap();
    for (i, &b) in plan.bins.iter().enumerate() {
        assert_eq!(b == 1, (0.5..=0.6).contains(&e[i]), "e = {}", e[i]);
    }
    assert_eq!(plan.counts()[1], 21);
}

#[test]
fn identical_ranges_trim_nothing() {
    let lp = vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0];
    let ids = (0..6).map(|i| format!("u{i}")).collect();
    let scores = ScoreTable::from_lp(ids, vec![1, 1, 1, 0, 0, 0], lp);
    let trim = trim_support(&scores, TrimRule::ArmOverlap).unwrap();
    assert!(trim.dropped.is_empty());
    assert_eq!(trim.retained.len(), 6);
}

#[test]
fn freezing_follows_the_balance_verdict() {
    let pop = generate(&DgpConfig::preset("balance").unwrap().with_n(5_000)).unwrap();
    let ds = pop.to_dataset().unwrap();
    let model = fit_propensity(&ds, &FitOptions::default()).unwrap();
    let scores = score(&model, &ds).unwrap();
    let trim = trim_support(&scores, TrimRule::ArmOverlap).unwrap();

    // one bin leaves the confounder as imbalanced as the raw data
    let plan = assign_bins(&scores, 1, BinMethod::Quantile).unwrap();
    let rep = balance_report(&ds, &plan, 0.1).unwrap();
    assert!(rep.worst_abs_smd > 0.4);
    let history = vec![DesignIteration::from_balance(&plan, &rep, "one bin")];
    let refused = freeze_design(&model, plan.clone(), rep.clone(), trim.clone(), false, history.clone());
    assert!(matches!(refused, Err(Error::DesignNotReady(_))));
    let forced = freeze_design(&model, plan, rep, trim.clone(), true, history).unwrap();
    assert!(forced.frozen && forced.override_balance);

    // arms with the same covariate values balance in any binning
    let same = [("t1", 1, 0.0, 2.0), ("t2", 1, 0.0, 4.0), ("c1", 0, 0.0, 2.0), ("c2", 0, 0.0, 4.0)];
    let ds = small_dataset(&same);
    let model = fit_propensity(&ds, &FitOptions::default()).unwrap();
    let scores = score(&model, &ds).unwrap();
    let plan = assign_bins(&scores, 1, BinMethod::Quantile).unwrap();
    let rep = balance_report(&ds, &plan, 0.1).unwrap();
    let trim = trim_support(&scores, TrimRule::ArmOverlap).unwrap();
    assert!(rep.balanced);
    let frozen = freeze_design(&model, plan, rep, trim, false, Vec::new()).unwrap();
    assert!(frozen.frozen && !frozen.override_balance);
}

#[test]
fn fair_coin_fits_to_zero() {
    let n = 20_000;
    let x: Vec<f64> = (0..n).map(|i| ((i / 2) % 7) as f64).collect();
    let z: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    let fit = fit_logistic(&x, &z, 1, &FitOptions::default()).unwrap();
    assert!(fit.coefficients.iter().all(|b| b.abs() < 1e-8), "{:?}", fit.coefficients);
}

#[test]
fn six_row_fit_beats_coarse_grid() {
    let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    let z = [0u8, 1, 0, 1, 1, 0];
    let fit = fit_logistic(&x, &z, 1, &FitOptions { ridge_lambda: 0.0, ..FitOptions::default() }).unwrap();
    let ll = |a: f64, b: f64| -> f64 {
        x.iter()
            .zip(z)
            .map(|(&xi, zi)| {
                let p = 1.0 / (1.0 + (-(a + b * xi)).exp());
                if zi == 1 { p.ln() } else { (1.0 - p).ln() }
            })
            .sum()
    };
    let achieved = ll(fit.coefficients[0], fit.coefficients[1]);
    for i in 0..=100 {
        for j in 0..=100 {
            let (a, b) = (-5.0 + 0.1 * i as f64, -5.0 + 0.1 * j as f64);
            assert!(achieved >= ll(a, b) - 1e-12);
        }
    }
}

#[test]
fn score_histograms_by_arm() {
    let ids: Vec<String> = (0..6).map(|i| format!("u{i}")).collect();
    let same = ScoreTable::from_lp(ids.clone(), vec![1, 1, 1, 0, 0, 0], vec![0.1, 0.5, 0.9, 0.1, 0.5, 0.9]);
    let h = score_histograms(&same, 4);
    assert_eq!(h.treated, h.control);

    let lone = ScoreTable::from_lp(ids, vec![1, 0, 0, 0, 0, 0], vec![0.3, 0.1, 0.5, 0.9, 0.2, 0.4]);
    let h = score_histograms(&lone, 4);
    assert_eq!(h.treated.total(), 1);
    assert_eq!(h.control.total(), 5);

    let pop = generate(&DgpConfig::preset("ferrari").unwrap().with_n(5_000)).unwrap();
    let ds = pop.to_dataset().unwrap();
    let scores = score(&fit_propensity(&ds, &FitOptions::default()).unwrap(), &ds).unwrap();
    assert!(stats::mean(&scores.arm_lp(1)) > stats::mean(&scores.arm_lp(0)));
}

#[test]
fn identical_lists_give_identical_decile_means() {
    let ids: Vec<String> = (0..30).map(|i| format!("u{i:02}")).collect();
    let s: Vec<f64> = (0..30).map(|i| ((i * 7) % 11) as f64).collect();
    let a = TargetList::from_scores("a", &ids, &s).unwrap();
    let b = TargetList::from_scores("b", &ids, &s).unwrap();
    let realized: HashMap<String, f64> = ids.iter().enumerate().map(|(i, id)| (id.clone(), i as f64)).collect();
    let cmp = compare_lists(&a, &b, &realized, "index").unwrap();
    for d in 1..=10 {
        assert_eq!(cmp.mean("a", d), cmp.mean("b", d));
    }
}

#[test]
fn twenty_unit_decile_tally() {
    // u01 has the highest score on list a and the lowest on list b; the
    // realized value of u_i is i
    let ids: Vec<String> = (1..=20).map(|i| format!("u{i:02}")).collect();
    let up: Vec<f64> = (1..=20).map(|i| (21 - i) as f64).collect();
    let down: Vec<f64> = (1..=20).map(|i| i as f64).collect();
    let a = TargetList::from_scores("a", &ids, &up).unwrap();
    let b = TargetList::from_scores("b", &ids, &down).unwrap();
    let realized: HashMap<String, f64> = (1..=20).map(|i| (format!("u{i:02}"), i as f64)).collect();
    let cmp = compare_lists(&a, &b, &realized, "index").unwrap();
    // decile d of a holds u(21-2d) and u(22-2d); of b, u(2d-1) and u(2d)
    for d in 1..=10u8 {
        let d_f = d as f64;
        assert_eq!(cmp.mean("a", d), Some(21.5 - 2.0 * d_f));
        assert_eq!(cmp.mean("b", d), Some(2.0 * d_f - 0.5));
    }
    assert!(cmp.rows.iter().all(|r| r.count == 2));
}

#[test]
fn before_after_of_the_two_doctors() {
    let schema = CovariateSchema::new(vec![ColumnSpec::numeric("baseline")]);
    let csv = "unit_id,z,y,baseline\nA,1,15,10\nB,1,5,1\nC,0,3,2\nD,0,4,12\nE,0,2,6\n";
    let ds = Dataset::from_csv_bytes(csv.as_bytes(), &schema, &LoadOptions::default()).unwrap();
    let (ds, _) = released(ds);
    let ba = naive_before_after(&ds, "baseline").unwrap();
    assert_eq!(&ba.per_unit[..2], &[5.0, 4.0]);
    assert_eq!(ba.mean_treated, 4.5);
}

fn constant_effect_config(n: usize, seed: u64) -> DgpConfig {
    let mut cfg = one_covariate_config(n, seed);
    cfg.baseline_column = Some("x".into());
    cfg.effect = EffectSurface { intercept: 2.0, ..EffectSurface::default() };
    cfg
}

#[test]
fn without_a_time_trend_before_after_is_the_effect() {
    let mut cfg = constant_effect_config(2_000, 3);
    cfg.outcome = BaselineOutcome { linear: terms(0.0, &[("x", 1.0)]), quadratic: Vec::new(), noise_sd: 0.0 };
    let pop = generate(&cfg).unwrap();
    let (ds, _) = released(pop.to_dataset().unwrap());
    let ba = naive_before_after(&ds, "x").unwrap();
    assert!(close(ba.mean_treated, 2.0, 1e-9));
}

#[test]
fn correct_linear_specification_recovers_constant_effect() {
    let pop = generate(&constant_effect_config(20_000, 4)).unwrap();
    let (ds, _) = released(pop.to_dataset().unwrap());
    let fit = naive_regression(&ds).unwrap();
    assert!(close(fit.z_coefficient, 2.0, 0.1), "{}", fit.z_coefficient);
}

#[test]
fn evaluation_of_perfect_and_shifted_estimates() {
    let pop = generate(&DgpConfig::preset("ferrari").unwrap().with_n(500)).unwrap();
    let truth = pop.truth();
    let table = |shift: f64| {
        let rows = (0..pop.len())
            .map(|i| {
                let (outcome, cf) = if pop.z[i] == 1 { (pop.y1[i], pop.y0[i]) } else { (pop.y0[i], pop.y1[i]) };
                let mut r = EffectRow::new(&pop.ids[i], pop.z[i], outcome, cf, 1);
                r.tau_hat += shift;
                r
            })
            .collect();
        EffectTable::from_rows(rows, "truth").unwrap()
    };
    let ev = evaluate_run(&table(0.0), &truth).unwrap();
    assert!(ev.att_bias.abs() < 1e-12 && ev.unit_rmse < 1e-12);
    assert!(close(ev.rank_correlation, 1.0, 1e-12));
    let ev = evaluate_run(&table(0.75), &truth).unwrap();
    assert!(close(ev.att_bias, 0.75, 1e-9) && close(ev.mean_bias, 0.75, 1e-9));
    assert!(close(ev.rank_correlation, 1.0, 1e-12));
}

#[test]
fn fair_coin_assignment_is_balanced_and_agrees_with_truth() {
    let mut matched = Vec::new();
    let mut dim = Vec::new();
    let mut truth_att = Vec::new();
    for seed in 0..10u64 {
        let pop = generate(&DgpConfig::preset("randomized").unwrap().with_n(10_000).with_seed(seed)).unwrap();
        let share = pop.z.iter().filter(|&&z| z == 1).count() as f64 / pop.len() as f64;
        assert!(close(share, 0.5, 3.0 * (0.25f64 / 10_000.0).sqrt()), "share {share}");
        let ds = pop.to_dataset().unwrap();
        let scripts = ds.numeric_column("scripts_t1").unwrap();
        let arm = |z: u8| -> Vec<f64> { (0..ds.n_units()).filter(|&i| ds.treatment()[i] == z).map(|i| scripts[i]).collect() };
        assert!(stats::standardized_difference(&arm(1), &arm(0)).abs() < 0.06);

        let mut cfg = one_bin_config();
        cfg.matching.direction = Direction::TreatedFocal;
        let tau = pop.tau();
        let run = run_pipeline(ds, &cfg).unwrap();
        matched.push(aggregate(&run.effects, |r| r.z == 1).unwrap().mean);
        dim.push(clonematch::simulate::difference_in_means(&run.dataset).unwrap());
        truth_att.push(stats::mean(&(0..pop.len()).filter(|&i| pop.z[i] == 1).map(|i| tau[i]).collect::<Vec<_>>()));
    }
    let se = |v: &[f64]| stats::sample_sd(v) / (v.len() as f64).sqrt();
    let t = stats::mean(&truth_att);
    assert!((stats::mean(&matched) - t).abs() <= 3.0 * se(&matched).max(se(&truth_att)));
    assert!((stats::mean(&dim) - t).abs() <= 3.0 * se(&dim).max(se(&truth_att)));
}

#[test]
fn ferrari_matching_beats_regression() {
    let (mut m, mut r) = (Vec::new(), Vec::new());
    for seed in 0..20u64 {
        let pop = generate(&DgpConfig::preset("ferrari").unwrap().with_seed(seed)).unwrap();
        let truth = pop.truth();
        let mut cfg = one_bin_config();
        cfg.bins = 10;
        cfg.matching.direction = Direction::TreatedFocal;
        let run = run_pipeline(pop.to_dataset().unwrap(), &cfg).unwrap();
        let ev = evaluate_run(&run.effects, &truth).unwrap();
        m.push(ev.att_bias);
        r.push(naive_regression(&run.dataset).unwrap().z_coefficient - ev.att_true);
    }
    let bias = |v: &[f64]| stats::mean(v).abs();
    assert!(bias(&m) < bias(&r), "matched {} regression {}", bias(&m), bias(&r));
}
