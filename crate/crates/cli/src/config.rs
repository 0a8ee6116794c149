//! Flat `key = value` settings with layered overrides.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use fedtate_core::domain::OutcomeKind;
use fedtate_core::ensemble::{Penalty, DEFAULT_LAMBDA_GRID};
use fedtate_core::nuisance::DEFAULT_CLIP;
use fedtate_core::pipeline::{PipelineConfig, DEFAULT_SPLITS, DEFAULT_SPLIT_SEED};
use fedtate_core::simulation::{Density, DgpConfig, Estimator, MuReference, Specification, StudyConfig, DEFAULT_TARGET_N};

use crate::CliError;

pub const SEED_ENV: &str = "FEDTATE_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Source {
    Default,
    Env,
    File,
    Flag,
}

/// Keys accepted by `simulate`, in print order.
pub const SIMULATE_KEYS: &[&str] = &[
    "spec",
    "density",
    "K",
    "P",
    "reps",
    "seed",
    "workers",
    "lambda_grid",
    "splits",
    "target_n",
    "mu_reference",
    "estimators",
];

/// Keys accepted by `estimate`, in print order.
pub const ESTIMATE_KEYS: &[&str] = &["target", "outcome", "penalty", "seed", "lambda_grid", "splits", "clip", "workers"];

fn default_value(key: &str) -> String {
    let grid = || DEFAULT_LAMBDA_GRID.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",");
    match key {
        "spec" => "I".into(),
        "density" => "sparse".into(),
        "K" => "10".into(),
        "P" => "2".into(),
        "reps" => "200".into(),
        "seed" => DEFAULT_SPLIT_SEED.to_string(),
        "workers" => "0".into(),
        "lambda_grid" => grid(),
        "splits" => DEFAULT_SPLITS.to_string(),
        "target_n" => DEFAULT_TARGET_N.to_string(),
        "mu_reference" => "population".into(),
        "estimators" => Estimator::STANDARD.iter().map(|e| e.name()).collect::<Vec<_>>().join(","),
        "target" => String::new(),
        "outcome" => "continuous".into(),
        "penalty" => "l1".into(),
        "clip" => DEFAULT_CLIP.to_string(),
        _ => unreachable!("no default for {key}"),
    }
}

#[derive(Debug, Clone)]
pub struct Settings {
    keys: &'static [&'static str],
    values: BTreeMap<&'static str, (String, Source)>,
}

impl Settings {
    pub fn new(keys: &'static [&'static str]) -> Self {
        let values = keys.iter().map(|&k| (k, (default_value(k), Source::Default))).collect();
        Settings { keys, values }
    }

    fn key(&self, key: &str) -> Option<&'static str> {
        self.keys.iter().copied().find(|k| *k == key)
    }

    pub fn set(&mut self, key: &str, value: &str, source: Source) -> Result<(), CliError> {
        let k = self
            .key(key)
            .ok_or_else(|| CliError::validation(format!("unknown key {key:?} (known: {})", self.keys.join(", "))))?;
        self.values.insert(k, (value.trim().to_string(), source));
        Ok(())
    }

    /// `key=value` from the command line.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), CliError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::validation(format!("override {pair:?} is not key=value")))?;
        self.set(k.trim(), v, Source::Flag)
    }

    /// Blank lines and `#` comments are skipped; a key may appear once.
    pub fn load_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::validation(format!("cannot read config {}: {e}", path.display())))?;
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| CliError::validation(format!("{}:{}: {msg}", path.display(), i + 1));
            let (k, v) = line.split_once('=').ok_or_else(|| at(format!("expected key = value, got {line:?}")))?;
            let k = k.trim();
            if seen.contains(&k.to_string()) {
                return Err(at(format!("duplicate key {k:?}")));
            }
            seen.push(k.to_string());
            self.set(k, v, Source::File).map_err(|e| at(e.message))?;
        }
        Ok(())
    }

    /// The environment seed applies only when nothing else set one.
    pub fn apply_env_seed(&mut self, env: Option<String>) -> Result<(), CliError> {
        if let Some(v) = env.filter(|v| !v.trim().is_empty()) {
            if self.source("seed") == Source::Default {
                self.set("seed", &v, Source::Env)?;
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        &self.values[key].0
    }

    pub fn source(&self, key: &str) -> Source {
        self.values[key].1
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .parse()
            .map_err(|e| CliError::validation(format!("key {key}: cannot parse {:?}: {e}", self.get(key))))
    }

    pub fn lambda_grid(&self) -> Result<Vec<f64>, CliError> {
        self.get("lambda_grid")
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| CliError::validation(format!("key lambda_grid: cannot parse {s:?}: {e}")))
            })
            .collect()
    }

    /// `None` means all cores.
    pub fn workers(&self) -> Result<Option<usize>, CliError> {
        Ok(match self.parse::<usize>("workers")? {
            0 => None,
            w => Some(w),
        })
    }

    /// Resolved settings as a loadable config file.
    pub fn render(&self) -> String {
        self.keys.iter().map(|k| format!("{k} = {}\n", self.get(k))).collect()
    }

    pub fn as_map(&self) -> BTreeMap<String, String> {
        self.keys.iter().map(|k| (k.to_string(), self.get(k).to_string())).collect()
    }

    pub fn study(&self) -> Result<StudyConfig, CliError> {
        let mut dgp = DgpConfig::new(
            self.parse("K")?,
            self.parse("P")?,
            self.parse::<Density>("density")?,
            self.parse::<Specification>("spec")?,
            self.parse("seed")?,
        );
        dgp.target_n = self.parse("target_n")?;
        dgp.mu_reference = self.parse::<MuReference>("mu_reference")?;
        let mut study = StudyConfig::new(dgp, self.parse("reps")?);
        study.estimators = self
            .get("estimators")
            .split(',')
            .map(|s| s.parse::<Estimator>().map_err(|e| CliError::validation(format!("key estimators: {e}"))))
            .collect::<Result<_, _>>()?;
        study.lambda_grid = self.lambda_grid()?;
        study.n_splits = self.parse("splits")?;
        study.workers = self.workers()?;
        study.validate().map_err(CliError::from_core)?;
        Ok(study)
    }

    pub fn pipeline(&self) -> Result<PipelineConfig, CliError> {
        let kind = match self.get("outcome") {
            "continuous" => OutcomeKind::Continuous,
            "binary" => OutcomeKind::Binary,
            other => return Err(CliError::validation(format!("key outcome: expected continuous or binary, got {other:?}"))),
        };
        let mut cfg = PipelineConfig::for_kind(kind, self.parse::<Penalty>("penalty")?);
        cfg.lambda_grid = self.lambda_grid()?;
        cfg.n_splits = self.parse("splits")?;
        cfg.split_seed = self.parse("seed")?;
        cfg.site.clip = self.parse("clip")?;
        cfg.validate().map_err(CliError::from_core)?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_and_env_is_a_fallback() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "# study\nK = 5\nreps=3\n").unwrap();
        let mut s = Settings::new(SIMULATE_KEYS);
        s.load_file(&path).unwrap();
        s.set_pair("reps=4").unwrap();
        s.apply_env_seed(Some("99".into())).unwrap();
        assert_eq!(s.get("K"), "5");
        assert_eq!(s.get("reps"), "4");
        assert_eq!(s.get("seed"), "99");

        s.set("seed", "1", Source::Flag).unwrap();
        s.apply_env_seed(Some("99".into())).unwrap();
        assert_eq!(s.get("seed"), "1");
    }

    #[test]
    fn file_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.conf");
        std::fs::write(&path, "K = 5\n\nbogus = 1\n").unwrap();
        let err = Settings::new(SIMULATE_KEYS).load_file(&path).unwrap_err();
        assert!(err.message.contains("bad.conf:3"), "{}", err.message);
        assert!(err.message.contains("bogus"));

        std::fs::write(&path, "K = 5\nK = 6\n").unwrap();
        let err = Settings::new(SIMULATE_KEYS).load_file(&path).unwrap_err();
        assert!(err.message.contains(":2: duplicate"), "{}", err.message);
    }

    #[test]
    fn rendered_defaults_load_back() {
        let s = Settings::new(SIMULATE_KEYS);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("defaults.conf");
        std::fs::write(&path, s.render()).unwrap();
        let mut t = Settings::new(SIMULATE_KEYS);
        t.load_file(&path).unwrap();
        assert_eq!(s.as_map(), t.as_map());
        let study = t.study().unwrap();
        assert_eq!(study.lambda_grid, DEFAULT_LAMBDA_GRID.to_vec());
        assert_eq!(study.estimators, Estimator::STANDARD.to_vec());
    }

    #[test]
    fn estimate_keys_reject_simulation_keys() {
        let mut s = Settings::new(ESTIMATE_KEYS);
        assert!(s.set_pair("K=3").is_err());
        assert!(s.set_pair("penalty=l3").is_ok());
        assert!(s.pipeline().is_err());
    }
}
