use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fedtate_core::domain::{OutcomeKind, SiteDataset};
use fedtate_core::ensemble::Penalty;
use fedtate_core::pipeline::PipelineConfig;
use fedtate_core::pooled::run_pooled;
use fedtate_core::simulation::{generate_replication, Density, DgpConfig, Specification};
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fedtate"));
    c.env_remove("FEDTATE_SEED");
    c
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data")
}

const QUICK: &[&str] = &["--K", "3", "--reps", "3", "--lambda-grid", "0,0.1,1", "--set", "splits=2"];

fn simulate(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec!["simulate", "--out", out];
    args.extend_from_slice(QUICK);
    args.extend_from_slice(extra);
    run(&args, dir)
}

#[test]
fn simulate_writes_five_estimator_rows() {
    let dir = tempfile::tempdir().unwrap();
    let o = simulate(dir.path(), "run", &["--spec", "I", "--density", "sparse", "--P", "2", "--seed", "7"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let metrics = std::fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "estimator,bias,rmse,coverage,ci_length,n_fail");
    assert_eq!(lines.len(), 6);
    let reps = std::fs::read_to_string(dir.path().join("run/replications.csv")).unwrap();
    assert_eq!(reps.lines().count(), 1 + 3 * 5);
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["config"]["spec"], "I");
    assert!(manifest["git_describe"].is_string());
}

#[test]
fn simulate_is_idempotent_apart_from_the_timestamp() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        assert_eq!(code(&simulate(dir.path(), out, &["--seed", "11"])), 0);
    }
    for f in ["metrics.csv", "replications.csv"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
    let strip = |p: &str| {
        let mut v: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join(p)).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("created_at").expect("timestamp field");
        v
    };
    assert_eq!(strip("a/manifest.json"), strip("b/manifest.json"));
}

#[test]
fn zero_reps_is_a_validation_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["simulate", "--reps", "0", "--out", "x"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("reps"));
    assert!(!dir.path().join("x").exists());
}

#[test]
fn bad_config_file_reports_line_and_key() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("study.conf"), "spec = II\nK = 4\nlamda_grid = 0,1\n").unwrap();
    let o = run(&["simulate", "--config", "study.conf", "--print-config"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("study.conf:3"), "{}", stderr(&o));
    assert!(stderr(&o).contains("lamda_grid"));

    std::fs::write(dir.path().join("study.conf"), "spec = VI\n").unwrap();
    let o = run(&["simulate", "--config", "study.conf", "--reps", "1"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("spec"));
}

#[test]
fn print_config_shows_precedence() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("study.conf"), "# desk run\nspec = III\nK = 4\nreps = 50\n").unwrap();
    let o = bin()
        .args(["simulate", "--config", "study.conf", "--reps", "9", "--print-config"])
        .env("FEDTATE_SEED", "123")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    for line in ["spec = III", "K = 4", "reps = 9", "seed = 123", "density = sparse"] {
        assert!(text.lines().any(|l| l == line), "missing {line:?} in\n{text}");
    }

    let o = bin()
        .args(["simulate", "--seed", "5", "--print-config"])
        .env("FEDTATE_SEED", "123")
        .output()
        .unwrap();
    assert!(stdout(&o).lines().any(|l| l == "seed = 5"));

    // The printed settings load back unchanged.
    std::fs::write(dir.path().join("echo.conf"), &text).unwrap();
    let again = run(&["simulate", "--config", "echo.conf", "--print-config"], dir.path());
    assert_eq!(stdout(&again), text);
}

fn write_sites_csv(path: &Path, sites: &[&SiteDataset]) {
    let p = sites[0].p();
    let mut s = String::from("site_id,a,y");
    for j in 1..=p {
        s.push_str(&format!(",x{j}"));
    }
    s.push('\n');
    for ds in sites {
        for i in 0..ds.n() {
            s.push_str(&format!("{},{},{}", ds.site_id, ds.treatment[i], ds.outcome[i]));
            for j in 0..p {
                s.push_str(&format!(",{}", ds.covariates[(i, j)]));
            }
            s.push('\n');
        }
    }
    std::fs::write(path, s).unwrap();
}

fn toy_study() -> (SiteDataset, Vec<SiteDataset>) {
    let cfg = DgpConfig::new(3, 2, Density::Sparse, Specification::I, 3);
    let g = generate_replication(&cfg, 0).unwrap();
    (g.target, g.sources)
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(std::fs::read_to_string(path).unwrap().trim()).unwrap()
}

fn longest_array(v: &Value) -> usize {
    match v {
        Value::Array(a) => a.iter().map(longest_array).max().unwrap_or(0).max(a.len()),
        Value::Object(m) => m.values().map(longest_array).max().unwrap_or(0),
        _ => 0,
    }
}

#[test]
fn estimate_matches_the_pooled_pipeline() {
    let (target, sources) = toy_study();
    let dir = tempfile::tempdir().unwrap();
    let refs: Vec<&SiteDataset> = std::iter::once(&target).chain(sources.iter().take(1)).collect();
    write_sites_csv(&dir.path().join("sites.csv"), &refs);

    let o = run(&["estimate", "sites.csv", "--target", &target.site_id, "--out", "msgs"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = dir.path().join("msgs");
    let reply = format!("reply_{}.ndjson", sources[0].site_id);
    for f in ["broadcast.ndjson", "target_summary.ndjson", reply.as_str(), "result.ndjson", "summary.txt"] {
        assert!(out.join(f).exists(), "{f} missing");
    }

    let cfg = PipelineConfig::for_kind(OutcomeKind::Continuous, Penalty::L1);
    let pooled = run_pooled(&target, &sources[..1], &cfg).unwrap();
    let result = read_json(&out.join("result.ndjson"));
    let value = result["tate"]["value"].as_f64().unwrap();
    let se = result["tate"]["se"].as_f64().unwrap();
    assert!((value - pooled.tate.value).abs() <= 1e-10 * pooled.tate.value.abs());
    assert!((se - pooled.tate.se).abs() <= 1e-10 * pooled.tate.se);

    let summary = std::fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.contains(&format!("TATE estimate: {:.6}", pooled.tate.value)));
    for arm in ["treated", "control"] {
        let block = summary.split(&format!("{arm} arm")).nth(1).unwrap();
        let total: f64 = block
            .lines()
            .skip(1)
            .take_while(|l| l.trim_start().starts_with("eta "))
            .map(|l| l.split_whitespace().last().unwrap().parse::<f64>().unwrap())
            .sum();
        assert!((total - 1.0).abs() < 1e-5, "{arm}: weights sum to {total}");
    }
}

#[test]
fn estimate_messages_hold_no_patient_rows() {
    let (target, sources) = toy_study();
    let dir = tempfile::tempdir().unwrap();
    let refs: Vec<&SiteDataset> = std::iter::once(&target).chain(sources.iter()).collect();
    write_sites_csv(&dir.path().join("sites.csv"), &refs);
    let o = run(&["estimate", "sites.csv", "--target", &target.site_id, "--out", "msgs"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let smallest = refs.iter().map(|d| d.n()).min().unwrap();
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir.path().join("msgs")).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        if name.ends_with(".ndjson") {
            let v = read_json(&path);
            assert!(longest_array(&v) < smallest, "{name} holds an array as long as a site");
        }
        names.push(name);
    }
    // Nothing lands beside the input.
    let beside: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(beside.len(), 2);
    assert_eq!(names.len(), 4 + sources.len());
}

#[test]
fn estimate_rejects_bad_inputs() {
    let (target, sources) = toy_study();
    let dir = tempfile::tempdir().unwrap();
    write_sites_csv(&dir.path().join("sites.csv"), &[&target, &sources[0]]);

    let o = run(&["estimate", "sites.csv", "--target", "nowhere", "--out", "m"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nowhere"));

    let o = run(&["estimate", "sites.csv", "--out", "m"], dir.path());
    assert_eq!(code(&o), 2);

    std::fs::write(dir.path().join("bad.csv"), "site,a,y,x1\nT,1,2.0,0.5\n").unwrap();
    let o = run(&["estimate", "bad.csv", "--target", "T", "--out", "m"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 1"), "{}", stderr(&o));

    let o = run(&["estimate", "sites.csv", "--target", &target.site_id, "--penalty", "l3"], dir.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn report_matches_the_frozen_table() {
    let d = data_dir();
    let o = bin().args(["report", "spec_ii", "spec_i/metrics.csv"]).current_dir(&d).output().unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let golden = std::fs::read_to_string(d.join("report_golden.md")).unwrap();
    assert_eq!(stdout(&o), golden);
}

#[test]
fn report_merges_without_losing_rows() {
    let d = data_dir();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("rep");
    let o = bin()
        .args(["report", "spec_i", "spec_ii", "--out"])
        .arg(&out)
        .current_dir(&d)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let md = std::fs::read_to_string(out.join("report.md")).unwrap();
    assert_eq!(md.lines().count(), 2 + 3 + 5);
    let long = std::fs::read_to_string(out.join("report_long.csv")).unwrap();
    assert_eq!(long.lines().count(), 1 + 5 * 8);
    assert_eq!(long.lines().next().unwrap(), "spec,density,K,P,estimator,metric,value");

    // A lone file without a manifest passes through in its own order.
    let lone = dir.path().join("lone");
    std::fs::create_dir(&lone).unwrap();
    std::fs::copy(d.join("spec_ii/metrics.csv"), lone.join("metrics.csv")).unwrap();
    let o = run(&["report", "lone"], dir.path());
    assert_eq!(code(&o), 0);
    let rows: Vec<String> = stdout(&o).lines().skip(2).map(|l| l.split(" | ").nth(4).unwrap().to_string()).collect();
    assert_eq!(rows, ["Target-Only", "SS (naive)", "SS", "GLOBAL-l2", "GLOBAL-l1"]);
    assert!(stdout(&o).lines().nth(2).unwrap().starts_with("| - | - | - | - |"));
}

#[test]
fn report_rejects_malformed_metrics() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("metrics.csv"), "estimator,bias\nSS,0.1\n").unwrap();
    let o = run(&["report", "metrics.csv"], dir.path());
    assert_eq!(code(&o), 2);
    let o = run(&["report", "missing.csv"], dir.path());
    assert_eq!(code(&o), 2);
}
