use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::json;

use fedtate_core::domain::{load_sites_csv, OutcomeKind, TreatmentArm};
use fedtate_core::federation::{
    aggregate, read_ndjson, run_source_round, run_target_round, write_ndjson, ProcessingResult, SourceReply,
    TargetBroadcast, TargetSummary,
};
use fedtate_core::simulation::{run_study, write_metrics_csv, write_replications_csv};

use crate::config::{Settings, Source, ESTIMATE_KEYS, SEED_ENV, SIMULATE_KEYS};
use crate::{CliError, Common, EstimateArgs, SimulateArgs};

fn apply_common(s: &mut Settings, c: &Common) -> Result<(), CliError> {
    if let Some(path) = &c.config {
        s.load_file(path)?;
    }
    for pair in &c.overrides {
        s.set_pair(pair)?;
    }
    if let Some(seed) = c.seed {
        s.set("seed", &seed.to_string(), Source::Flag)?;
    }
    if let Some(w) = c.workers {
        s.set("workers", &w.to_string(), Source::Flag)?;
    }
    if let Some(g) = &c.lambda_grid {
        s.set("lambda_grid", g, Source::Flag)?;
    }
    s.apply_env_seed(std::env::var(SEED_ENV).ok())
}

fn set_opt(s: &mut Settings, key: &str, v: Option<String>) -> Result<(), CliError> {
    match v {
        Some(v) => s.set(key, &v, Source::Flag),
        None => Ok(()),
    }
}

fn prepare_out(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::validation(format!("output directory {} is not writable: {e}", dir.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(&path.display().to_string(), e))
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    match workers {
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w)
                .build()
                .map_err(|e| CliError::validation(format!("key workers: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

pub fn simulate(a: &SimulateArgs) -> Result<(), CliError> {
    let mut s = Settings::new(SIMULATE_KEYS);
    apply_common(&mut s, &a.common)?;
    set_opt(&mut s, "spec", a.spec.clone())?;
    set_opt(&mut s, "density", a.density.clone())?;
    set_opt(&mut s, "K", a.k.map(|v| v.to_string()))?;
    set_opt(&mut s, "P", a.p.map(|v| v.to_string()))?;
    set_opt(&mut s, "reps", a.reps.map(|v| v.to_string()))?;
    if a.common.print_config {
        print!("{}", s.render());
        return Ok(());
    }
    let study = s.study()?;
    let out = &a.common.out;
    prepare_out(out)?;
    let result = run_study(&study).map_err(CliError::from_core)?;

    write_metrics_csv(create(&out.join("metrics.csv"))?, &result.metrics).map_err(CliError::from_core)?;
    write_replications_csv(create(&out.join("replications.csv"))?, &result.replications).map_err(CliError::from_core)?;
    let created = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let manifest = json!({
        "command": "simulate",
        "config": s.as_map(),
        "created_at": format!("unix:{created}"),
        "git_describe": git_describe(),
        "seed": study.dgp.seed,
        "truth": result.truth,
        "version": env!("CARGO_PKG_VERSION"),
    });
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    let path = out.join("manifest.json");
    std::fs::write(&path, text).map_err(|e| CliError::io(&path.display().to_string(), e))?;

    for row in &result.metrics {
        println!(
            "{:<12} bias {:.4}  rmse {:.4}  coverage {:.1}%  ci length {:.4}  failures {}",
            row.estimator, row.bias, row.rmse, row.coverage, row.ci_length, row.n_fail
        );
    }
    Ok(())
}

/// File-name-safe form of a site id.
fn file_stem(site: &str) -> String {
    site.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

pub fn estimate(a: &EstimateArgs) -> Result<(), CliError> {
    let mut s = Settings::new(ESTIMATE_KEYS);
    apply_common(&mut s, &a.common)?;
    set_opt(&mut s, "target", a.target.clone())?;
    set_opt(&mut s, "penalty", a.penalty.clone())?;
    set_opt(&mut s, "outcome", a.outcome.clone())?;
    if a.common.print_config {
        print!("{}", s.render());
        return Ok(());
    }
    let cfg = s.pipeline()?;
    let workers = s.workers()?;
    let target_id = s.get("target").to_string();
    if target_id.is_empty() {
        return Err(CliError::validation("no target site given (use --target or target = ...)"));
    }
    let kind = if s.get("outcome") == "binary" {
        OutcomeKind::Binary
    } else {
        OutcomeKind::Continuous
    };
    let sites = load_sites_csv(&a.data, kind).map_err(CliError::from_core)?;
    let Some(target) = sites.iter().find(|d| d.site_id == target_id) else {
        let ids: Vec<&str> = sites.iter().map(|d| d.site_id.as_str()).collect();
        return Err(CliError::validation(format!(
            "target site {target_id:?} not in {} (sites: {})",
            a.data.display(),
            ids.join(", ")
        )));
    };
    let sources: Vec<_> = sites.iter().filter(|d| d.site_id != target_id).collect();
    let out = &a.common.out;
    prepare_out(out)?;

    let core = |e| CliError::from_core(e);
    let broadcast_path = out.join("broadcast.ndjson");
    let summary_path = out.join("target_summary.ndjson");
    let (b, ts) = with_workers(workers, || run_target_round(target, &cfg))?.map_err(core)?;
    write_ndjson(&broadcast_path, &b).map_err(core)?;
    write_ndjson(&summary_path, &ts).map_err(core)?;

    // Sources and the processing site work from the files alone.
    let b: TargetBroadcast = read_ndjson(&broadcast_path).map_err(core)?;
    let mut reply_paths: Vec<PathBuf> = Vec::new();
    for ds in &sources {
        let reply = run_source_round(ds, &b);
        let path = out.join(format!("reply_{}.ndjson", file_stem(&ds.site_id)));
        write_ndjson(&path, &reply).map_err(core)?;
        reply_paths.push(path);
    }
    let ts: TargetSummary = read_ndjson(&summary_path).map_err(core)?;
    let replies: Vec<SourceReply> = reply_paths.iter().map(|p| read_ndjson(p)).collect::<Result<_, _>>().map_err(core)?;
    let result = aggregate(&b, &ts, &replies, &cfg.lambda_grid, cfg.penalty).map_err(core)?;
    write_ndjson(&out.join("result.ndjson"), &result).map_err(core)?;

    let text = summary_text(&result);
    let path = out.join("summary.txt");
    std::fs::write(&path, &text).map_err(|e| CliError::io(&path.display().to_string(), e))?;
    print!("{text}");
    Ok(())
}

pub fn summary_text(r: &ProcessingResult) -> String {
    let mut s = String::new();
    let t = &r.tate;
    let _ = writeln!(s, "target site: {}", r.target_site);
    let _ = writeln!(s, "penalty: {}", r.penalty.name());
    let _ = writeln!(s, "TATE estimate: {:.6}", t.value);
    let _ = writeln!(s, "standard error: {:.6}", t.se);
    let _ = writeln!(s, "95% CI: [{:.6}, {:.6}]", t.ci_lower, t.ci_upper);
    for arm in TreatmentArm::BOTH {
        let a = r.arms.get(arm);
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{arm} arm: {:.6} (se {:.6}), lambda {}",
            a.value, a.se, a.lambda_opt
        );
        for w in &a.weights {
            let _ = writeln!(s, "  eta {:<20} {:.6}", w.site_id, w.eta);
        }
    }
    let _ = writeln!(s);
    if r.dropped_sites.is_empty() {
        let _ = writeln!(s, "dropped sites: none");
    } else {
        let _ = writeln!(s, "dropped sites:");
        for d in &r.dropped_sites {
            let _ = writeln!(s, "  {}: {}", d.site_id, d.reason);
        }
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "message sizes (bytes):");
    for e in &r.audit {
        let _ = writeln!(s, "  {:<28} {}", e.message, e.bytes);
    }
    s
}
