//! The file-based stages behind the `essd` command: generate, features,
//! train, evaluate and signal. Each stage reads its inputs, writes its
//! outputs atomically and records a `manifest.json` alongside them.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, Entry, KvFile, RunConfig};
use crate::eval::{self, EvalError, LofoConfig};
use crate::forest::{self, Forest, ForestError, TrainingSet};
use crate::fsio;
use crate::measures::{self, FeatureScope, FeatureTable, MeasureError};
use crate::store::{self, Dataset, Provenance, StoreError};
use crate::synth::{self, GeneratorConfig, SynthError};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Usage(String),
}

impl PipelineError {
    /// Stable, machine-readable error category.
    pub fn category(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "ConfigError",
            PipelineError::Store(StoreError::MalformedRow { .. }) => "MalformedRow",
            PipelineError::Store(StoreError::Integrity { .. }) => "IntegrityError",
            PipelineError::Store(_) => "DataError",
            PipelineError::Measure(MeasureError::Cohort(_)) => "CohortError",
            PipelineError::Measure(_) => "MeasureError",
            PipelineError::Forest(ForestError::ModelFormat { .. }) => "ModelFormatError",
            PipelineError::Forest(_) => "TrainingError",
            PipelineError::Eval(_) => "EvaluationError",
            PipelineError::Synth(SynthError::Config(_) | SynthError::Invalid(_)) => "ConfigError",
            PipelineError::Synth(SynthError::UnknownPreset(_)) => "UnknownPreset",
            PipelineError::Synth(_) => "GeneratorError",
            PipelineError::Io { .. } => "IoError",
            PipelineError::Usage(_) => "UsageError",
        }
    }

    /// `<Category>: <detail>` on one line.
    pub fn one_line(&self) -> String {
        let detail = self.to_string().replace(['\n', '\r'], " ");
        format!("{}: {detail}", self.category())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.into(),
        source,
    }
}

/// Command-line overrides shared by every stage.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub workers: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct OutputFile {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct DatasetInfo {
    pub fingerprint: String,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub created_at: String,
    pub seed: u64,
    pub workers: usize,
    pub config: String,
    pub config_sha256: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetInfo>,
    pub inputs: Vec<OutputFile>,
    pub outputs: Vec<OutputFile>,
}

fn sha256_file(path: &Path) -> Result<String, PipelineError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

fn file_entries(paths: &[PathBuf]) -> Result<Vec<OutputFile>, PipelineError> {
    paths
        .iter()
        .map(|p| {
            Ok(OutputFile {
                file: p.display().to_string(),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}

struct ManifestDraft<'a> {
    command: &'a str,
    seed: u64,
    workers: usize,
    config: String,
    config_sha256: String,
    dataset: Option<&'a Dataset>,
    inputs: Vec<PathBuf>,
}

impl ManifestDraft<'_> {
    fn write(self, out_dir: &Path, outputs: &[PathBuf]) -> Result<Manifest, PipelineError> {
        let m = Manifest {
            tool: "essd",
            version: VERSION,
            command: self.command.into(),
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            seed: self.seed,
            workers: self.workers,
            config: self.config,
            config_sha256: self.config_sha256,
            dataset: self.dataset.map(|d| DatasetInfo {
                fingerprint: d.fingerprint(),
                provenance: d.provenance().clone(),
            }),
            inputs: file_entries(&self.inputs)?,
            outputs: file_entries(outputs)?,
        };
        let path = out_dir.join(format!("manifest.{}.json", self.command));
        let text = serde_json::to_string_pretty(&m).expect("manifest serialises") + "\n";
        fsio::atomic_write_str(&path, &text).map_err(io_err(&path))?;
        fsio::atomic_write_str(&out_dir.join("manifest.json"), &text).map_err(io_err(&path))?;
        Ok(m)
    }
}

/// Loads a run config, applying `--seed` and `--out`.
pub fn load_run_config(path: &Path, ov: &Overrides) -> Result<(RunConfig, PathBuf), PipelineError> {
    let mut kv = KvFile::load(path)?;
    if let Some(seed) = ov.seed {
        kv.entries.retain(|e| e.key != "seed");
        kv.entries.push(Entry {
            key: "seed".into(),
            value: seed.to_string(),
            line: 0,
        });
        kv.text.push_str(&format!("\n# --seed {seed}\n"));
    }
    let mut run = RunConfig::from_kv(&kv)?;
    run.config_hash = kv.sha256();
    let out = ov
        .out
        .clone()
        .or_else(|| run.out.clone())
        .unwrap_or_else(|| kv.base_dir.clone());
    std::fs::create_dir_all(&out).map_err(io_err(&out))?;
    Ok((run, out))
}

pub enum GenerateSource {
    Preset(String),
    Config(PathBuf),
}

/// Generates a synthetic dataset plus a `run.conf` that points at it.
pub fn cmd_generate(source: &GenerateSource, ov: &Overrides) -> Result<Manifest, PipelineError> {
    let (mut cfg, text, name) = match source {
        GenerateSource::Preset(p) => (
            synth::preset(p)?,
            synth::preset_text(p)?.to_string(),
            format!("preset:{p}"),
        ),
        GenerateSource::Config(path) => {
            let text = std::fs::read_to_string(path).map_err(io_err(path))?;
            (
                GeneratorConfig::load(path)?,
                text,
                path.display().to_string(),
            )
        }
    };
    if let Some(seed) = ov.seed {
        cfg.seed = seed;
    }
    let out = ov
        .out
        .clone()
        .ok_or_else(|| PipelineError::Usage("generate needs --out DIR".into()))?;
    log::info!(
        "generating {} patients (seed {}) into {}",
        cfg.n_patients,
        cfg.seed,
        out.display()
    );
    let syn = synth::generate(&cfg)?;
    synth::write_files(&syn, &out)?;
    let run_conf = out.join("run.conf");
    fsio::atomic_write_str(&run_conf, &synth::run_config_text(&cfg)).map_err(io_err(&run_conf))?;
    log::info!(
        "{} patients, {} events, {} prescriptions, {} labelled pairs",
        syn.dataset.patients().len(),
        syn.dataset.event_count(),
        syn.dataset.prescription_count(),
        syn.truth.pairs.len()
    );
    let paths = store::DatasetPaths::in_dir(&out);
    let outputs = vec![
        paths.patients,
        paths.events,
        paths.prescriptions,
        paths.event_tree,
        out.join("reference.csv"),
        out.join("ground_truth.json"),
        run_conf,
    ];
    ManifestDraft {
        command: "generate",
        seed: cfg.seed,
        workers: ov.workers,
        config: name,
        config_sha256: Sha256::digest(format!("{text}\n# seed {}\n", cfg.seed).as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect(),
        dataset: Some(&syn.dataset),
        inputs: Vec::new(),
    }
    .write(&out, &outputs)
}

fn draft<'a>(
    command: &'a str,
    config: &Path,
    run: &RunConfig,
    ov: &Overrides,
) -> ManifestDraft<'a> {
    ManifestDraft {
        command,
        seed: run.seed,
        workers: ov.workers,
        config: config.display().to_string(),
        config_sha256: run.config_hash.clone(),
        dataset: None,
        inputs: Vec::new(),
    }
}

/// Computes features for every risk medical event of every configured
/// family, labelled from the reference set where available.
pub fn cmd_features(config: &Path, ov: &Overrides) -> Result<Manifest, PipelineError> {
    let (run, out) = load_run_config(config, ov)?;
    let ds = store::load_dataset(&run.data)?;
    log::info!(
        "loaded {} patients, {} events",
        ds.patients().len(),
        ds.event_count()
    );
    let reference = match &run.reference {
        Some(p) => eval::read_reference(p)?,
        None => Vec::new(),
    };
    let table = measures::feature_matrix(
        &ds,
        &run.feature_config(),
        &reference,
        FeatureScope::AllRiskEvents,
    )?;
    log::info!(
        "{} feature rows ({} labelled, {} reference pairs dropped)",
        table.rows.len(),
        table.labelled().count(),
        table.dropped.len()
    );
    let path = out.join("features.csv");
    fsio::atomic_write(&path, |w| {
        measures::write_features(&table, w).map_err(std::io::Error::other)
    })
    .map_err(io_err(&path))?;
    let mut d = draft("features", config, &run, ov);
    d.dataset = Some(&ds);
    d.inputs = vec![
        run.data.patients.clone(),
        run.data.events.clone(),
        run.data.prescriptions.clone(),
        run.data.event_tree.clone(),
    ];
    d.inputs.extend(run.reference.clone());
    d.write(&out, &[path])
}

fn features_path(run: &RunConfig, out: &Path) -> PathBuf {
    run.features
        .clone()
        .unwrap_or_else(|| out.join("features.csv"))
}

fn model_path(run: &RunConfig, out: &Path) -> PathBuf {
    run.model.clone().unwrap_or_else(|| out.join("model.txt"))
}

fn configured_rows(run: &RunConfig, table: FeatureTable) -> FeatureTable {
    FeatureTable {
        rows: table
            .rows
            .into_iter()
            .filter(|r| run.families.contains(&r.features.family))
            .collect(),
        dropped: table.dropped,
    }
}

/// Tunes `mtry` and trains the forest on every labelled row.
pub fn cmd_train(config: &Path, ov: &Overrides) -> Result<Manifest, PipelineError> {
    let (run, out) = load_run_config(config, ov)?;
    let fpath = features_path(&run, &out);
    let table = configured_rows(&run, measures::read_features(&fpath)?);
    let training = TrainingSet::new(table.rows.iter().filter_map(eval::training_row).collect());
    log::info!(
        "training on {} labelled pairs ({} ADRs)",
        training.len(),
        training.positives()
    );
    let tuning = forest::tune_mtry(&training, &run.tune, run.seed)?;
    log::info!(
        "selected mtry {} (cv AUC {:.3})",
        tuning.best_mtry,
        tuning.best_auc()
    );

    let model = model_path(&run, &out);
    fsio::atomic_write_str(&model, &tuning.forest.to_text()).map_err(io_err(&model))?;
    let log_path = out.join("tuning.csv");
    let mut log_text = String::from("mtry,mean_cv_auc,scored_folds,selected\n");
    for c in &tuning.scores {
        log_text.push_str(&format!(
            "{},{},{},{}\n",
            c.mtry,
            c.mean_auc.map(|a| a.to_string()).unwrap_or_default(),
            c.fold_aucs.len(),
            u8::from(c.mtry == tuning.best_mtry)
        ));
    }
    fsio::atomic_write_str(&log_path, &log_text).map_err(io_err(&log_path))?;
    let mut d = draft("train", config, &run, ov);
    d.inputs = vec![fpath];
    d.write(&out, &[model, log_path])
}

/// Leave-one-family-out evaluation of ESSD against each single design.
pub fn cmd_evaluate(config: &Path, ov: &Overrides) -> Result<Manifest, PipelineError> {
    let (run, out) = load_run_config(config, ov)?;
    let fpath = features_path(&run, &out);
    let table = configured_rows(&run, measures::read_features(&fpath)?);
    let cfg = LofoConfig {
        tune: run.tune.clone(),
        essd_threshold: run.essd_threshold,
        ssd_threshold: run.ssd_threshold,
        seed: run.seed,
    };
    let report = eval::leave_one_family_out(&table, &cfg)?;
    for m in eval::Method::all() {
        if let Some(auc) = report.pooled_auc(m) {
            log::info!("{:>5}: pooled AUC {auc:.3}", m.name());
        }
    }
    let json = out.join("report.json");
    fsio::atomic_write_str(&json, &(report.to_json() + "\n")).map_err(io_err(&json))?;
    let csv_path = out.join("report.csv");
    fsio::atomic_write(&csv_path, |w| {
        report.write_csv(w).map_err(std::io::Error::other)
    })
    .map_err(io_err(&csv_path))?;
    let mut d = draft("evaluate", config, &run, ov);
    d.inputs = vec![fpath];
    d.write(&out, &[json, csv_path])
}

/// Scores every feature row with a trained model, highest probability first.
pub fn cmd_signal(config: &Path, ov: &Overrides) -> Result<Manifest, PipelineError> {
    let (run, out) = load_run_config(config, ov)?;
    let fpath = features_path(&run, &out);
    let mpath = model_path(&run, &out);
    let table = configured_rows(&run, measures::read_features(&fpath)?);
    let text = std::fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let model = Forest::from_text(&text)?;
    let xs: Vec<_> = table.rows.iter().map(|r| r.features.x).collect();
    let probs = model.predict_many(&xs);
    let mut ranked: Vec<(f64, usize)> = probs.iter().copied().zip(0..).collect();
    // Rows are already in (family, event code) order, which breaks ties.
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let path = out.join("signals.csv");
    fsio::atomic_write(&path, |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record([
            "rank",
            "family_prefix",
            "event_code",
            "probability",
            "signal",
            "label",
        ])
        .map_err(std::io::Error::other)?;
        for (rank, (p, i)) in ranked.iter().enumerate() {
            let row = &table.rows[*i];
            c.write_record([
                (rank + 1).to_string(),
                row.features.family.to_string(),
                row.features.event_code.clone(),
                p.to_string(),
                u8::from(*p >= run.essd_threshold).to_string(),
                row.label
                    .map(|l| u8::from(l).to_string())
                    .unwrap_or_default(),
            ])
            .map_err(std::io::Error::other)?;
        }
        c.flush()
    })
    .map_err(io_err(&path))?;
    log::info!("scored {} pairs", ranked.len());
    let mut d = draft("signal", config, &run, ov);
    d.inputs = vec![fpath, mpath];
    d.write(&out, &[path])
}
