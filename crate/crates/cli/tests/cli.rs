use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const DESIGN: [&str; 6] = ["fit", "bin", "balance", "trim", "freeze", "match"];

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_clonematch"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin().args(args).current_dir(dir).output().expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> Value {
    let out = run(args, dir);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

fn error_record(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().rev().find(|l| l.starts_with('{')).expect("json error record");
    serde_json::from_str(line).unwrap()
}

fn simulate(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let out = dir.join("sim");
    ok(
        &["simulate", "--preset", "doctors", "--n", &n.to_string(), "--seed", &seed.to_string(), "--out", "sim"],
        dir,
    );
    out
}

/// load through match, with flags that let the small doctors sample freeze.
fn design(dir: &Path, run_dir: &str, data: &Path) {
    ok(&["load", "--run-dir", run_dir, "--data", data.to_str().unwrap()], dir);
    for step in DESIGN {
        ok(&[step, "--run-dir", run_dir, "--override-balance", "--bins", "5"], dir);
    }
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn fit_before_load_names_load() {
    let t = TempDir::new().unwrap();
    let out = run(&["fit"], t.path());
    assert_eq!(out.status.code(), Some(3));
    let rec = error_record(&out);
    assert_eq!(rec["missing_prerequisite"], "load");
    assert_eq!(rec["exit_code"], 3);
}

#[test]
fn effects_before_freeze_is_an_escrow_violation() {
    let t = TempDir::new().unwrap();
    let data = simulate(t.path(), 600, 1).join("data.csv");
    assert_eq!(run(&["effects"], t.path()).status.code(), Some(5));
    ok(&["load", "--data", data.to_str().unwrap()], t.path());
    ok(&["fit"], t.path());
    let out = run(&["effects"], t.path());
    assert_eq!(out.status.code(), Some(5));
    assert_eq!(error_record(&out)["error"], "escrow-violation");
}

#[test]
fn full_pipeline_on_doctors_is_checked_against_truth() {
    let t = TempDir::new().unwrap();
    let sim = simulate(t.path(), 4000, 7);
    design(t.path(), "run", &sim.join("data.csv"));
    let effects = ok(&["effects"], t.path());
    assert!(effects["summary"]["rows"].as_u64().unwrap() > 0);
    ok(&["rank"], t.path());
    let truth = sim.join("truth.csv");
    let cmp = ok(&["compare", "--truth", truth.to_str().unwrap()], t.path());
    assert_eq!(cmp["summary"]["realized_definition"], "true unit effect from the simulation truth file");
    let ev = ok(&["evaluate", "--truth", truth.to_str().unwrap()], t.path());
    let s = &ev["summary"];
    assert_eq!(s["n_effects"], effects["summary"]["rows"]);
    assert!(s["unit_rmse"].as_f64().unwrap().is_finite());

    let run_dir = t.path().join("run");
    for f in [
        "balance/balance.txt",
        "balance/balance.csv",
        "match/matches.csv",
        "effects/effects.csv",
        "rank/target_list.csv",
        "compare/plot_data.csv",
        "evaluate/evaluation.json",
    ] {
        assert!(run_dir.join(f).is_file(), "missing {f}");
    }
    let table = fs::read_to_string(run_dir.join("balance/balance.txt")).unwrap();
    assert!(table.contains("rx_decile"));

    let manifest: Value = serde_json::from_slice(&fs::read(run_dir.join("manifest.json")).unwrap()).unwrap();
    let steps: Vec<&str> = manifest["steps"].as_array().unwrap().iter().map(|r| r["step"].as_str().unwrap()).collect();
    assert_eq!(
        steps,
        ["load", "fit", "bin", "balance", "trim", "freeze", "match", "release", "effects", "rank", "compare", "evaluate"]
    );
    for r in manifest["steps"].as_array().unwrap() {
        // load ran before any --bins flag; every later step inherits it
        let bins = if r["step"] == "load" { 10 } else { 5 };
        assert_eq!(r["config"]["design"]["bins"], bins);
        assert!(r["finished_unix"].as_u64() >= r["started_unix"].as_u64());
    }
}

#[test]
fn replay_reproduces_every_artifact() {
    let t = TempDir::new().unwrap();
    let sim = simulate(t.path(), 3000, 11);
    let data = sim.join("data.csv");
    for run_dir in ["a", "b"] {
        design(t.path(), run_dir, &data);
        ok(&["effects", "--run-dir", run_dir], t.path());
        ok(&["rank", "--run-dir", run_dir], t.path());
    }
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    let names = files(&a);
    assert_eq!(names, files(&b));
    for f in names.iter().filter(|f| !f.ends_with("manifest.json")) {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{} differs", f.display());
    }
}

#[test]
fn outcomes_do_not_reach_design_artifacts() {
    let t = TempDir::new().unwrap();
    let sim = simulate(t.path(), 2000, 5);
    let data = sim.join("data.csv");
    let shifted = t.path().join("shifted.csv");
    let mut reader = csv::Reader::from_path(&data).unwrap();
    let headers = reader.headers().unwrap().clone();
    let y = headers.iter().position(|h| h == "y").unwrap();
    let mut writer = csv::Writer::from_path(&shifted).unwrap();
    writer.write_record(&headers).unwrap();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.unwrap();
        let row: Vec<String> = rec
            .iter()
            .enumerate()
            .map(|(c, v)| if c == y { format!("{}", (i * 7919 % 1000) as f64 - 500.0) } else { v.to_string() })
            .collect();
        writer.write_record(&row).unwrap();
    }
    writer.flush().unwrap();

    design(t.path(), "orig", &data);
    design(t.path(), "shift", &shifted);
    let (a, b) = (t.path().join("orig"), t.path().join("shift"));
    let csvs: Vec<PathBuf> = files(&a)
        .into_iter()
        .filter(|f| f.extension().is_some_and(|e| e == "csv" || e == "txt"))
        .collect();
    assert!(csvs.len() >= 8);
    for f in &csvs {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{} depends on outcomes", f.display());
    }
}

#[test]
fn tampered_artifacts_and_data_are_refused() {
    let t = TempDir::new().unwrap();
    let sim = simulate(t.path(), 1500, 2);
    let data = t.path().join("data.csv");
    fs::copy(sim.join("data.csv"), &data).unwrap();
    ok(&["load", "--data", "data.csv"], t.path());
    ok(&["fit"], t.path());

    let model = t.path().join("run/fit/model.json");
    let original = fs::read(&model).unwrap();
    let mut edited = original.clone();
    edited.extend_from_slice(b" ");
    fs::write(&model, &edited).unwrap();
    let out = run(&["bin"], t.path());
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(error_record(&out)["error"], "provenance");
    fs::write(&model, &original).unwrap();
    ok(&["bin"], t.path());

    let mut bytes = fs::read(&data).unwrap();
    bytes.extend_from_slice(b"\n");
    fs::write(&data, &bytes).unwrap();
    assert_eq!(run(&["balance"], t.path()).status.code(), Some(4));
}

#[test]
fn reruns_make_downstream_steps_stale() {
    let t = TempDir::new().unwrap();
    let data = simulate(t.path(), 1500, 3).join("data.csv");
    ok(&["load", "--data", data.to_str().unwrap()], t.path());
    ok(&["fit"], t.path());
    ok(&["bin"], t.path());
    ok(&["fit", "--ridge", "0.01"], t.path());
    let out = run(&["balance"], t.path());
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_record(&out)["missing_prerequisite"], "bin");
    ok(&["bin"], t.path());
    ok(&["balance"], t.path());
}

#[test]
fn unbalanced_designs_need_an_override_and_frozen_designs_stay_frozen() {
    let t = TempDir::new().unwrap();
    let data = simulate(t.path(), 3000, 4).join("data.csv");
    ok(&["load", "--data", data.to_str().unwrap()], t.path());
    for step in ["fit", "bin", "balance", "trim"] {
        ok(&[step, "--bins", "1"], t.path());
    }
    let out = run(&["freeze"], t.path());
    assert_eq!(out.status.code(), Some(6));
    assert_eq!(error_record(&out)["error"], "design-not-ready");
    let frozen = ok(&["freeze", "--override-balance"], t.path());
    assert_eq!(frozen["summary"]["override_balance"], true);
    for step in ["fit", "bin", "balance", "trim", "freeze"] {
        assert_eq!(run(&[step], t.path()).status.code(), Some(6), "{step}");
    }
    assert_eq!(run(&["load", "--data", data.to_str().unwrap()], t.path()).status.code(), Some(6));
}

#[test]
fn config_file_with_flag_overrides() {
    let t = TempDir::new().unwrap();
    let data = simulate(t.path(), 1500, 6).join("data.csv");
    fs::write(
        t.path().join("cfg.toml"),
        "[design]\nbins = 4\nthreshold = 0.2\n\n[matching]\nk = 3\nmethod = \"optimal\"\n",
    )
    .unwrap();
    ok(&["load", "--config", "cfg.toml", "--data", data.to_str().unwrap()], t.path());
    ok(&["fit"], t.path());
    let b = ok(&["bin", "--bins", "6"], t.path());
    assert_eq!(b["summary"]["counts"].as_array().unwrap().len(), 6);
    let manifest: Value = serde_json::from_slice(&fs::read(t.path().join("run/manifest.json")).unwrap()).unwrap();
    let cfg = &manifest["steps"][2]["config"];
    assert_eq!(cfg["design"]["bins"], 6);
    assert_eq!(cfg["design"]["threshold"], 0.2);
    assert_eq!(cfg["matching"]["k"], 3);
    assert_eq!(cfg["matching"]["method"], "optimal");

    fs::write(t.path().join("bad.toml"), "[design]\nbinz = 4\n").unwrap();
    assert_eq!(run(&["fit", "--config", "bad.toml"], t.path()).status.code(), Some(2));
    assert_eq!(run(&["match", "--k", "0"], t.path()).status.code(), Some(2));
}

#[test]
fn compare_with_before_after_is_labelled_non_causal() {
    let t = TempDir::new().unwrap();
    let data = simulate(t.path(), 3000, 8).join("data.csv");
    design(t.path(), "run", &data);
    ok(&["effects"], t.path());
    ok(&["rank"], t.path());
    assert_eq!(run(&["compare"], t.path()).status.code(), Some(2));
    let cmp = ok(&["compare", "--baseline", "scripts_t1"], t.path());
    assert!(cmp["summary"]["realized_definition"].as_str().unwrap().contains("not a causal estimate"));
}

#[test]
fn help_documents_exit_codes() {
    let out = bin().arg("--help").output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    for code in ["3  missing prerequisite", "4  provenance", "5  escrow"] {
        assert!(text.contains(code), "{code}");
    }
}

#[test]
fn simulation_is_reproducible_from_its_seed() {
    let t = TempDir::new().unwrap();
    let a = ok(&["simulate", "--preset", "ferrari", "--n", "500", "--seed", "9", "--out", "a"], t.path());
    let b = ok(&["simulate", "--preset", "ferrari", "--n", "500", "--seed", "9", "--out", "b"], t.path());
    assert_eq!(a["data_sha256"], b["data_sha256"]);
    for f in ["data.csv", "truth.csv", "metadata.json", "dgp.toml"] {
        assert_eq!(fs::read(t.path().join("a").join(f)).unwrap(), fs::read(t.path().join("b").join(f)).unwrap());
    }
    let c = ok(&["simulate", "--dgp", "a/dgp.toml", "--out", "c"], t.path());
    assert_eq!(a["data_sha256"], c["data_sha256"]);
}
