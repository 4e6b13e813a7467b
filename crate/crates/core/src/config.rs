//! Flat `key = value` configuration files.
//!
//! One setting per line; `#` starts a comment; blank lines are ignored.
//! Some keys (`family`, `effect`, `comparator.<prefix>`) may repeat or carry
//! a suffix; everything else must appear at most once. Relative paths are
//! resolved against the directory holding the file.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cohort::CohortParams;
use crate::forest::TuneConfig;
use crate::measures::FeatureConfig;
use crate::store::{DatasetPaths, DrugFamily};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{source_name}:{line}: {detail}")]
    Syntax {
        source_name: String,
        line: usize,
        detail: String,
    },
    #[error("{source_name}: missing required key '{key}'")]
    Missing { source_name: String, key: String },
    #[error("{source_name}:{line}: {key}: {detail}")]
    Invalid {
        source_name: String,
        line: usize,
        key: String,
        detail: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// A parsed config file, entries in file order.
#[derive(Debug, Clone)]
pub struct KvFile {
    pub source_name: String,
    pub base_dir: PathBuf,
    pub entries: Vec<Entry>,
    pub text: String,
}

impl KvFile {
    pub fn parse(text: &str, source_name: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    source_name: source_name.into(),
                    line: i + 1,
                    detail: format!("expected 'key = value', found '{line}'"),
                });
            };
            let key = k.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(ConfigError::Syntax {
                    source_name: source_name.into(),
                    line: i + 1,
                    detail: format!("bad key '{key}'"),
                });
            }
            entries.push(Entry {
                key: key.into(),
                value: v.trim().into(),
                line: i + 1,
            });
        }
        Ok(Self {
            source_name: source_name.into(),
            base_dir: base_dir.into(),
            entries,
            text: text.into(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.into(),
            source,
        })?;
        let base = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        Self::parse(&text, &path.display().to_string(), base)
    }

    pub fn sha256(&self) -> String {
        Sha256::digest(self.text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn invalid(&self, e: &Entry, detail: impl Into<String>) -> ConfigError {
        ConfigError::Invalid {
            source_name: self.source_name.clone(),
            line: e.line,
            key: e.key.clone(),
            detail: detail.into(),
        }
    }

    pub fn missing(&self, key: &str) -> ConfigError {
        ConfigError::Missing {
            source_name: self.source_name.clone(),
            key: key.into(),
        }
    }

    /// Rejects keys that are neither in `known` nor start with one of
    /// `prefixes`, and repeats of keys not in `repeatable`.
    pub fn check_keys(
        &self,
        known: &[&str],
        prefixes: &[&str],
        repeatable: &[&str],
    ) -> Result<(), ConfigError> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            let ok =
                known.contains(&e.key.as_str()) || prefixes.iter().any(|p| e.key.starts_with(p));
            if !ok {
                return Err(self.invalid(e, "unknown key"));
            }
            if !repeatable.contains(&e.key.as_str()) && !seen.insert(e.key.as_str()) {
                return Err(self.invalid(e, "set more than once"));
            }
        }
        Ok(())
    }

    pub fn entry(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.key == key)
    }

    pub fn all<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a Entry> + 'a {
        self.entries.iter().filter(move |e| e.key == key)
    }

    pub fn with_prefix<'a>(
        &'a self,
        prefix: &'a str,
    ) -> impl Iterator<Item = (&'a str, &'a Entry)> + 'a {
        self.entries
            .iter()
            .filter_map(move |e| e.key.strip_prefix(prefix).map(|rest| (rest, e)))
    }

    pub fn parse_value<T: FromStr>(&self, e: &Entry) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        e.value
            .parse()
            .map_err(|err: T::Err| self.invalid(e, format!("'{}': {err}", e.value)))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.entry(key).map(|e| self.parse_value(e)).transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)?.ok_or_else(|| self.missing(key))
    }

    pub fn list<T: FromStr>(&self, e: &Entry) -> Result<Vec<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        e.value
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|err: T::Err| self.invalid(e, format!("'{s}': {err}")))
            })
            .collect()
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.entry(key).map(|e| self.base_dir.join(&e.value))
    }
}

/// Settings for the `features`, `train`, `evaluate` and `signal` stages.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub data: DatasetPaths,
    pub reference: Option<PathBuf>,
    pub families: Vec<DrugFamily>,
    pub comparators: BTreeMap<DrugFamily, DrugFamily>,
    pub seed: u64,
    pub cohort: CohortParams,
    pub rme_window_days: i32,
    pub rme_min_patients: u32,
    pub match_year_tolerance_max: i32,
    pub tune: TuneConfig,
    pub essd_threshold: f64,
    pub ssd_threshold: f64,
    pub out: Option<PathBuf>,
    /// Input files for later stages, defaulting to files in `out`.
    pub features: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub config_hash: String,
    pub source_name: String,
}

const RUN_KEYS: &[&str] = &[
    "data_dir",
    "patients",
    "events",
    "prescriptions",
    "event_tree",
    "reference",
    "families",
    "seed",
    "washout_days",
    "min_pre_observation_days",
    "min_post_observation_days",
    "rme_window_days",
    "rme_min_patients",
    "match_year_tolerance_max",
    "n_trees",
    "min_leaf",
    "mtry_candidates",
    "folds",
    "essd_threshold",
    "ssd_threshold",
    "out",
    "features",
    "model",
];

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_kv(&KvFile::load(path)?)
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self, ConfigError> {
        kv.check_keys(RUN_KEYS, &["comparator."], &[])?;

        let mut data = match kv.path("data_dir") {
            Some(dir) => DatasetPaths::in_dir(dir),
            None => DatasetPaths::in_dir(&kv.base_dir),
        };
        for (key, slot) in [
            ("patients", &mut data.patients),
            ("events", &mut data.events),
            ("prescriptions", &mut data.prescriptions),
            ("event_tree", &mut data.event_tree),
        ] {
            if let Some(p) = kv.path(key) {
                *slot = p;
            }
        }

        let families: Vec<DrugFamily> = match kv.entry("families") {
            Some(e) => kv.list(e)?,
            None => return Err(kv.missing("families")),
        };
        if families.is_empty() {
            return Err(kv.invalid(kv.entry("families").expect("present"), "no families listed"));
        }
        let mut comparators = BTreeMap::new();
        for (suffix, e) in kv.with_prefix("comparator.") {
            let target: DrugFamily = suffix
                .parse()
                .map_err(|err| kv.invalid(e, format!("'{suffix}': {err}")))?;
            let comparator: DrugFamily = kv.parse_value(e)?;
            if target == comparator {
                return Err(kv.invalid(e, "a family cannot be its own comparator"));
            }
            comparators.insert(target, comparator);
        }
        // Unlisted families compare against the next family in the list.
        for (i, f) in families.iter().enumerate() {
            if !comparators.contains_key(f) {
                if families.len() < 2 {
                    return Err(kv.missing(&format!("comparator.{f}")));
                }
                comparators.insert(*f, families[(i + 1) % families.len()]);
            }
        }

        let defaults = FeatureConfig::new(Vec::new(), BTreeMap::new(), 0);
        let cohort = CohortParams {
            washout_days: kv.get_or("washout_days", defaults.cohort.washout_days)?,
            min_pre_observation_days: kv.get_or(
                "min_pre_observation_days",
                defaults.cohort.min_pre_observation_days,
            )?,
            min_post_observation_days: kv.get_or(
                "min_post_observation_days",
                defaults.cohort.min_post_observation_days,
            )?,
        };
        for (key, v) in [
            ("washout_days", cohort.washout_days),
            ("min_pre_observation_days", cohort.min_pre_observation_days),
            (
                "min_post_observation_days",
                cohort.min_post_observation_days,
            ),
        ] {
            if v < 0 {
                return Err(kv.invalid(
                    kv.entry(key).expect("negative only if set"),
                    "must not be negative",
                ));
            }
        }

        let mut tune = TuneConfig::default();
        tune.n_trees = kv.get_or("n_trees", tune.n_trees)?;
        tune.min_leaf = kv.get_or("min_leaf", tune.min_leaf)?;
        tune.folds = kv.get_or("folds", tune.folds)?;
        if let Some(e) = kv.entry("mtry_candidates") {
            tune.candidates = kv.list(e)?;
        }
        let positive = |key: &str, v: usize| -> Result<(), ConfigError> {
            match kv.entry(key) {
                Some(e) if v == 0 => Err(kv.invalid(e, "must be positive")),
                _ => Ok(()),
            }
        };
        positive("n_trees", tune.n_trees)?;
        positive("min_leaf", tune.min_leaf)?;
        if let Some(e) = kv.entry("folds").filter(|_| tune.folds < 2) {
            return Err(kv.invalid(e, "need at least 2 folds"));
        }
        if let Some(e) = kv.entry("mtry_candidates") {
            if tune.candidates.is_empty() || tune.candidates.iter().any(|m| !(1..=9).contains(m)) {
                return Err(kv.invalid(e, "candidates must be in 1..=9"));
            }
        }

        Ok(Self {
            data,
            reference: kv.path("reference"),
            families,
            comparators,
            seed: kv.require("seed")?,
            cohort,
            rme_window_days: kv.get_or("rme_window_days", defaults.rme_window_days)?,
            rme_min_patients: kv.get_or("rme_min_patients", defaults.rme_min_patients)?,
            match_year_tolerance_max: kv.get_or(
                "match_year_tolerance_max",
                defaults.match_year_tolerance_max,
            )?,
            tune,
            essd_threshold: kv.get_or("essd_threshold", 0.5)?,
            ssd_threshold: kv.get_or("ssd_threshold", 0.0)?,
            out: kv.path("out"),
            features: kv.path("features"),
            model: kv.path("model"),
            config_hash: kv.sha256(),
            source_name: kv.source_name.clone(),
        })
    }

    pub fn feature_config(&self) -> FeatureConfig {
        FeatureConfig {
            families: self.families.clone(),
            comparators: self.comparators.clone(),
            cohort: self.cohort,
            rme_window_days: self.rme_window_days,
            rme_min_patients: self.rme_min_patients,
            match_year_tolerance_max: self.match_year_tolerance_max,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        RunConfig::from_kv(&KvFile::parse(text, "run.conf", Path::new("/data/run"))?)
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse("families = 05-01-01-01, 05-01-01-02\nseed = 7\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.data.events, Path::new("/data/run/events.csv"));
        assert_eq!(c.cohort, CohortParams::default());
        assert_eq!(c.tune, TuneConfig::default());
        let a: DrugFamily = "05-01-01-01".parse().unwrap();
        let b: DrugFamily = "05-01-01-02".parse().unwrap();
        assert_eq!(c.comparators[&a], b);
        assert_eq!(c.comparators[&b], a);
    }

    #[test]
    fn keys_and_paths() {
        let c = parse(
            "# comment\nfamilies = 05-01-01-01,05-01-01-02 # trailing\nseed = 1\ndata_dir = ../d\n\
             events = /abs/ev.csv\ncomparator.05-01-01-01 = 05-01-01-03\nmtry_candidates = 2,4\nfolds = 5\n",
        )
        .unwrap();
        assert_eq!(c.data.patients, Path::new("/data/run/../d/patients.csv"));
        assert_eq!(c.data.events, Path::new("/abs/ev.csv"));
        assert_eq!(
            c.comparators[&"05-01-01-01".parse().unwrap()],
            "05-01-01-03".parse().unwrap()
        );
        assert_eq!(c.tune.candidates, vec![2, 4]);
        assert_eq!(c.tune.folds, 5);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(matches!(
            parse("families = 05-01-01-01,05-01-01-02\n"),
            Err(ConfigError::Missing { .. })
        ));
        assert!(matches!(
            parse("seed = 1\n"),
            Err(ConfigError::Missing { .. })
        ));
        assert!(matches!(
            parse("seed = 1\nfamilies = 05\nbogus = 1\n"),
            Err(ConfigError::Invalid { .. })
        ));
        assert!(matches!(
            parse("seed = 1\nseed = 2\nfamilies = 05,06\n"),
            Err(ConfigError::Invalid { .. })
        ));
        assert!(matches!(
            parse("seed = x\nfamilies = 05,06\n"),
            Err(ConfigError::Invalid { .. })
        ));
        assert!(matches!(
            parse("seed = 1\nfamilies = 05,06\nnonsense\n"),
            Err(ConfigError::Syntax { line: 3, .. })
        ));
        assert!(parse("seed = 1\nfamilies = 05,06\nmtry_candidates = 0\n").is_err());
        assert!(parse("seed = 1\nfamilies = 05,06\ncomparator.05 = 05\n").is_err());
        assert!(parse("seed = 1\nfamilies = 05\n").is_err());
    }
}
