//! Merges metrics files into one table.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::fs::File;
use std::path::{Path, PathBuf};

use serde_json::Value;

use fedtate_core::simulation::{read_metrics_csv, Estimator, MetricsRow, Specification};

use crate::{CliError, ReportArgs};

/// Study settings read from the manifest next to a metrics file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StudyLabel {
    pub spec: Option<String>,
    pub density: Option<String>,
    pub k: Option<usize>,
    pub p: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelledRow {
    pub label: StudyLabel,
    pub row: MetricsRow,
}

fn metrics_path(input: &Path) -> PathBuf {
    if input.is_dir() {
        input.join("metrics.csv")
    } else {
        input.to_path_buf()
    }
}

fn read_label(metrics: &Path) -> Result<StudyLabel, CliError> {
    let manifest = metrics.with_file_name("manifest.json");
    if !manifest.exists() {
        return Ok(StudyLabel::default());
    }
    let bad = |m: String| CliError::validation(format!("{}: {m}", manifest.display()));
    let text = std::fs::read_to_string(&manifest).map_err(|e| bad(e.to_string()))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    let cfg = v.get("config").ok_or_else(|| bad("no config section".into()))?;
    let text_of = |k: &str| cfg.get(k).and_then(Value::as_str).map(str::to_string);
    let number = |k: &str| -> Result<Option<usize>, CliError> {
        text_of(k)
            .map(|s| s.parse().map_err(|_| bad(format!("{k} is not a count: {s:?}"))))
            .transpose()
    };
    Ok(StudyLabel {
        spec: text_of("spec"),
        density: text_of("density"),
        k: number("K")?,
        p: number("P")?,
    })
}

pub fn load(inputs: &[PathBuf]) -> Result<Vec<LabelledRow>, CliError> {
    let mut rows = Vec::new();
    for input in inputs {
        let path = metrics_path(input);
        let file = File::open(&path).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
        let metrics = read_metrics_csv(file).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
        let label = read_label(&path)?;
        rows.extend(metrics.into_iter().map(|row| LabelledRow { label: label.clone(), row }));
    }
    Ok(rows)
}

fn spec_rank(s: &Option<String>) -> (usize, String) {
    match s {
        Some(v) => match v.parse::<Specification>() {
            Ok(sp) => (Specification::ALL.iter().position(|x| *x == sp).unwrap_or(0), String::new()),
            Err(_) => (Specification::ALL.len(), v.clone()),
        },
        None => (usize::MAX, String::new()),
    }
}

/// Known estimators in their usual order, then any others by name.
fn estimator_rank(name: &str) -> (usize, &str) {
    const ORDER: [Estimator; 6] = [
        Estimator::TargetOnly,
        Estimator::SsNaive,
        Estimator::Ss,
        Estimator::GlobalL2,
        Estimator::GlobalL1,
        Estimator::FixedEffects,
    ];
    match ORDER.iter().position(|e| e.name() == name) {
        Some(i) => (i, ""),
        None => (ORDER.len(), name),
    }
}

fn compare(a: &LabelledRow, b: &LabelledRow) -> Ordering {
    spec_rank(&a.label.spec)
        .cmp(&spec_rank(&b.label.spec))
        .then(a.label.k.unwrap_or(usize::MAX).cmp(&b.label.k.unwrap_or(usize::MAX)))
        .then(estimator_rank(&a.row.estimator).cmp(&estimator_rank(&b.row.estimator)))
}

/// Stable, so rows that tie keep their input order.
pub fn sort(rows: &mut [LabelledRow]) {
    rows.sort_by(compare);
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "-".to_string(), T::to_string)
}

pub fn markdown(rows: &[LabelledRow]) -> String {
    let mut s = String::new();
    s.push_str("| Spec | Density | K | P | Estimator | Bias | RMSE | Coverage (%) | CI length | Failures |\n");
    s.push_str("|---|---|---:|---:|---|---:|---:|---:|---:|---:|\n");
    for r in rows {
        let m = &r.row;
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {:.4} | {:.4} | {:.4} | {:.4} | {} |",
            opt(&r.label.spec),
            opt(&r.label.density),
            opt(&r.label.k),
            opt(&r.label.p),
            m.estimator,
            m.bias,
            m.rmse,
            m.coverage,
            m.ci_length,
            m.n_fail
        );
    }
    s
}

/// One `(study, estimator, metric, value)` row per metric.
pub fn long_csv(rows: &[LabelledRow]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CliError::validation(e.to_string());
    w.write_record(["spec", "density", "K", "P", "estimator", "metric", "value"]).map_err(err)?;
    for r in rows {
        let m = &r.row;
        let metrics = [
            ("bias", m.bias),
            ("rmse", m.rmse),
            ("coverage", m.coverage),
            ("ci_length", m.ci_length),
            ("n_fail", m.n_fail as f64),
        ];
        for (name, value) in metrics {
            w.write_record([
                opt(&r.label.spec),
                opt(&r.label.density),
                opt(&r.label.k),
                opt(&r.label.p),
                m.estimator.clone(),
                name.to_string(),
                value.to_string(),
            ])
            .map_err(err)?;
        }
    }
    Ok(String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8 csv"))
}

pub fn run(a: &ReportArgs) -> Result<(), CliError> {
    let mut rows = load(&a.inputs)?;
    sort(&mut rows);
    let md = markdown(&rows);
    match &a.out {
        None => print!("{md}"),
        Some(dir) => {
            std::fs::create_dir_all(dir)
                .map_err(|e| CliError::validation(format!("output directory {} is not writable: {e}", dir.display())))?;
            let write = |name: &str, text: &str| {
                let path = dir.join(name);
                std::fs::write(&path, text).map_err(|e| CliError::io(&path.display().to_string(), e))
            };
            write("report.md", &md)?;
            write("report_long.csv", &long_csv(&rows)?)?;
        }
    }
    Ok(())
}
