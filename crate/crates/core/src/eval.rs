//! Signalling metrics and the leave-one-family-out evaluation protocol.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::forest::{self, ForestError, TrainingRow, TrainingSet, TuneConfig};
use crate::measures::{FeatureRow, FeatureTable};
use crate::par;
use crate::seed;
use crate::store::{DrugFamily, StoreError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("no scores to evaluate")]
    Empty,
    #[error("AUC needs both ADR and non-ADR pairs")]
    SingleClassScores,
    #[error("average precision needs at least one ADR pair")]
    NoPositives,
    #[error("score {0} is not a number")]
    NonFiniteScore(f64),
    #[error("leave-one-family-out needs at least 3 families with both classes, found {0}")]
    TooFewFamilies(usize),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error("{path}: {detail}")]
    ReferenceFile { path: String, detail: String },
}

/// A reference-set row: is `event_code` a known ADR of `family`?
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct LabeledPair {
    pub family: DrugFamily,
    pub event_code: String,
    pub label: bool,
}

pub const REFERENCE_COLUMNS: [&str; 3] = ["family_prefix", "event_code", "label"];

pub fn write_reference<W: io::Write>(pairs: &[LabeledPair], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REFERENCE_COLUMNS)?;
    for p in pairs {
        w.write_record([
            p.family.to_string(),
            p.event_code.clone(),
            u8::from(p.label).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `family_prefix,event_code,label` rows. Duplicate pairs are rejected.
pub fn read_reference(path: &Path) -> Result<Vec<LabeledPair>, EvalError> {
    let bad = |line: u64, detail: String| EvalError::ReferenceFile {
        path: path.display().to_string(),
        detail: if line > 0 {
            format!("line {line}: {detail}")
        } else {
            detail
        },
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| bad(0, e.to_string()))?;
    let headers = r.headers().map_err(|e| bad(1, e.to_string()))?.clone();
    if headers.iter().map(str::trim).collect::<Vec<_>>() != REFERENCE_COLUMNS {
        return Err(bad(
            1,
            format!("expected header {}", REFERENCE_COLUMNS.join(",")),
        ));
    }
    let mut out = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(0, e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let family: DrugFamily = rec[0]
            .trim()
            .parse()
            .map_err(|e: StoreError| bad(line, e.to_string()))?;
        let event_code = rec[1].trim().to_string();
        let label = match rec[2].trim() {
            "1" => true,
            "0" => false,
            other => return Err(bad(line, format!("label must be 0 or 1, got '{other}'"))),
        };
        if !seen.insert((family, event_code.clone())) {
            return Err(bad(line, format!("duplicate pair {family} / {event_code}")));
        }
        out.push(LabeledPair {
            family,
            event_code,
            label,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: u32,
    pub fp: u32,
    #[serde(rename = "fn")]
    pub fn_: u32,
    pub tn: u32,
}

impl ConfusionCounts {
    pub fn total(&self) -> u32 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

/// When a score counts as a signal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SignalRule {
    /// `score >= threshold`
    AtLeast(f64),
    /// `score > threshold`
    Above(f64),
}

impl SignalRule {
    pub fn signals(&self, score: f64) -> bool {
        match *self {
            SignalRule::AtLeast(t) => score >= t,
            SignalRule::Above(t) => score > t,
        }
    }
}

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<(), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(EvalError::Empty);
    }
    if let Some(&s) = scores.iter().find(|s| s.is_nan()) {
        return Err(EvalError::NonFiniteScore(s));
    }
    Ok(())
}

pub fn confusion(
    scores: &[f64],
    labels: &[bool],
    rule: SignalRule,
) -> Result<ConfusionCounts, EvalError> {
    check_lengths(scores, labels)?;
    let mut c = ConfusionCounts::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (rule.signals(s), y) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Sensitivity, specificity and false positive rate. A ratio whose
/// denominator is zero is `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Rates {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub fpr: Option<f64>,
}

pub fn rates(c: &ConfusionCounts) -> Rates {
    let ratio = |num: u32, den: u32| (den > 0).then(|| f64::from(num) / f64::from(den));
    Rates {
        sensitivity: ratio(c.tp, c.tp + c.fn_),
        specificity: ratio(c.tn, c.fp + c.tn),
        fpr: ratio(c.fp, c.fp + c.tn),
    }
}

/// Groups of tied scores in ascending score order: `(positives, negatives)`.
fn tie_groups(scores: &[f64], labels: &[bool]) -> Vec<(u64, u64)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .expect("NaN rejected earlier")
    });
    let mut groups: Vec<(u64, u64)> = Vec::new();
    let mut last: Option<f64> = None;
    for i in idx {
        if last != Some(scores[i]) {
            groups.push((0, 0));
            last = Some(scores[i]);
        }
        let g = groups.last_mut().expect("pushed above");
        if labels[i] {
            g.0 += 1;
        } else {
            g.1 += 1;
        }
    }
    groups
}

/// Probability that a random ADR pair outscores a random non-ADR pair, ties
/// counting one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    check_lengths(scores, labels)?;
    let pos = labels.iter().filter(|&&y| y).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClassScores);
    }
    let mut concordant = 0u64;
    let mut tied = 0u64;
    let mut neg_below = 0u64;
    for (p, n) in tie_groups(scores, labels) {
        concordant += p * neg_below;
        tied += p * n;
        neg_below += n;
    }
    Ok((2 * concordant + tied) as f64 / (2 * pos * neg) as f64)
}

/// Mean precision at the rank of each ADR pair, ranking by descending score.
/// Tied scores keep their input order.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    check_lengths(scores, labels)?;
    let pos = labels.iter().filter(|&&y| y).count();
    if pos == 0 {
        return Err(EvalError::NoPositives);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("NaN rejected earlier")
    });
    let mut hits = 0u32;
    let mut sum = 0.0;
    for (rank, &i) in idx.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += f64::from(hits) / (rank + 1) as f64;
        }
    }
    Ok(sum / pos as f64)
}

/// ROC curve vertices `(fpr, sensitivity)` from (0,0) to (1,1), one per
/// distinct score.
pub fn roc_points(scores: &[f64], labels: &[bool]) -> Result<Vec<[f64; 2]>, EvalError> {
    check_lengths(scores, labels)?;
    let pos = labels.iter().filter(|&&y| y).count() as f64;
    let neg = labels.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return Err(EvalError::SingleClassScores);
    }
    let mut points = vec![[0.0, 0.0]];
    let (mut tp, mut fp) = (0u64, 0u64);
    for (p, n) in tie_groups(scores, labels).into_iter().rev() {
        tp += p;
        fp += n;
        points.push([fp as f64 / neg, tp as f64 / pos]);
    }
    Ok(points)
}

/// The signalling methods compared by the evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    Essd,
    /// A single study design, scored by its raw feature (1-6).
    Ssd(u8),
}

impl Method {
    pub fn all() -> [Method; 7] {
        [
            Method::Essd,
            Method::Ssd(1),
            Method::Ssd(2),
            Method::Ssd(3),
            Method::Ssd(4),
            Method::Ssd(5),
            Method::Ssd(6),
        ]
    }

    pub fn name(&self) -> String {
        match self {
            Method::Essd => "ESSD".into(),
            Method::Ssd(i) => format!("SSD{i}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodResult {
    #[serde(flatten)]
    pub counts: ConfusionCounts,
    #[serde(flatten)]
    pub rates: Rates,
    pub auc: Option<f64>,
    pub ap: Option<f64>,
    pub roc: Vec<[f64; 2]>,
}

impl MethodResult {
    fn score(scores: &[f64], labels: &[bool], rule: SignalRule) -> Result<Self, EvalError> {
        let counts = confusion(scores, labels, rule)?;
        let auc = match auc(scores, labels) {
            Ok(v) => Some(v),
            Err(EvalError::SingleClassScores) => None,
            Err(e) => return Err(e),
        };
        let ap = match average_precision(scores, labels) {
            Ok(v) => Some(v),
            Err(EvalError::NoPositives) => None,
            Err(e) => return Err(e),
        };
        let roc = roc_points(scores, labels).unwrap_or_default();
        Ok(Self {
            counts,
            rates: rates(&counts),
            auc,
            ap,
            roc,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub evaluation: usize,
    pub held_out: String,
    pub training: Vec<String>,
    pub mtry: usize,
    pub training_auc: f64,
    pub methods: BTreeMap<String, MethodResult>,
}

/// Pooled results: summed counts, and AUC/AP over the concatenated held-out
/// scores, plus the mean of the per-evaluation AUC and AP.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PooledResult {
    #[serde(flatten)]
    pub result: MethodResult,
    pub mean_auc: Option<f64>,
    pub mean_ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub evaluations: Vec<Evaluation>,
    pub pooled: BTreeMap<String, PooledResult>,
}

impl EvaluationReport {
    pub fn pooled_auc(&self, method: Method) -> Option<f64> {
        self.pooled.get(&method.name()).and_then(|p| p.result.auc)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// One row per (evaluation, method), then the pooled rows.
    pub fn write_csv<W: io::Write>(&self, out: W) -> csv::Result<()> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "evaluation",
            "held_out",
            "method",
            "tp",
            "fp",
            "fn",
            "tn",
            "sensitivity",
            "specificity",
            "fpr",
            "auc",
            "ap",
        ])?;
        let mut row = |ev: &str, held: &str, m: &str, r: &MethodResult| {
            w.write_record([
                ev.to_string(),
                held.to_string(),
                m.to_string(),
                r.counts.tp.to_string(),
                r.counts.fp.to_string(),
                r.counts.fn_.to_string(),
                r.counts.tn.to_string(),
                opt(r.rates.sensitivity),
                opt(r.rates.specificity),
                opt(r.rates.fpr),
                opt(r.auc),
                opt(r.ap),
            ])
        };
        for e in &self.evaluations {
            for m in Method::all() {
                row(
                    &e.evaluation.to_string(),
                    &e.held_out,
                    &m.name(),
                    &e.methods[&m.name()],
                )?;
            }
        }
        for m in Method::all() {
            row("pooled", "", &m.name(), &self.pooled[&m.name()].result)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LofoConfig {
    pub tune: TuneConfig,
    /// ESSD signals when the forest probability is at least this.
    pub essd_threshold: f64,
    /// A single design signals when its feature exceeds this.
    pub ssd_threshold: f64,
    pub seed: u64,
}

impl LofoConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            tune: TuneConfig::default(),
            essd_threshold: 0.5,
            ssd_threshold: 0.0,
            seed,
        }
    }
}

pub fn training_row(row: &FeatureRow) -> Option<TrainingRow> {
    row.label.map(|label| TrainingRow {
        family: row.features.family,
        event_code: row.features.event_code.clone(),
        x: row.features.x,
        label,
    })
}

struct HeldOut {
    evaluation: Evaluation,
    scores: BTreeMap<Method, Vec<f64>>,
    labels: Vec<bool>,
}

fn evaluate_family(
    table: &FeatureTable,
    held: DrugFamily,
    index: usize,
    cfg: &LofoConfig,
) -> Result<HeldOut, EvalError> {
    let training = TrainingSet::new(
        table
            .rows
            .iter()
            .filter(|r| r.features.family != held)
            .filter_map(training_row)
            .collect(),
    );
    let tune_seed = seed::derive_labeled(cfg.seed, "lofo", &[seed::hash_str(&held.to_string())]);
    let tuning = forest::tune_mtry(&training, &cfg.tune, tune_seed)?;

    let test: Vec<&FeatureRow> = table
        .rows
        .iter()
        .filter(|r| r.features.family == held && r.label.is_some())
        .collect();
    let labels: Vec<bool> = test.iter().map(|r| r.label.expect("filtered")).collect();
    let mut scores: BTreeMap<Method, Vec<f64>> = BTreeMap::new();
    scores.insert(
        Method::Essd,
        test.iter()
            .map(|r| tuning.forest.predict_proba(&r.features.x))
            .collect(),
    );
    for k in 1..=6u8 {
        scores.insert(
            Method::Ssd(k),
            test.iter().map(|r| r.features.get(k as usize)).collect(),
        );
    }

    let mut methods = BTreeMap::new();
    for (m, s) in &scores {
        let rule = match m {
            Method::Essd => SignalRule::AtLeast(cfg.essd_threshold),
            Method::Ssd(_) => SignalRule::Above(cfg.ssd_threshold),
        };
        methods.insert(m.name(), MethodResult::score(s, &labels, rule)?);
    }
    let mut trained_on: Vec<String> = training
        .families()
        .iter()
        .map(ToString::to_string)
        .collect();
    trained_on.sort();
    Ok(HeldOut {
        evaluation: Evaluation {
            evaluation: index,
            held_out: held.to_string(),
            training: trained_on,
            mtry: tuning.best_mtry,
            training_auc: tuning.best_auc(),
            methods,
        },
        scores,
        labels,
    })
}

/// Trains on all families but one and scores the held-out family, for each
/// family in turn; reports per-evaluation and pooled results for ESSD and
/// every single design.
pub fn leave_one_family_out(
    table: &FeatureTable,
    cfg: &LofoConfig,
) -> Result<EvaluationReport, EvalError> {
    let mut classes: BTreeMap<DrugFamily, (bool, bool)> = BTreeMap::new();
    for (fv, y) in table.labelled() {
        let e = classes.entry(fv.family).or_default();
        if y {
            e.0 = true;
        } else {
            e.1 = true;
        }
    }
    let families: Vec<DrugFamily> = classes
        .iter()
        .filter(|(_, &(p, n))| p && n)
        .map(|(f, _)| *f)
        .collect();
    if families.len() < 3 {
        return Err(EvalError::TooFewFamilies(families.len()));
    }
    for (f, &(p, n)) in &classes {
        if !(p && n) {
            log::warn!(
                "drug family {f} lacks one of the classes and is left out of the evaluation"
            );
        }
    }
    let table = FeatureTable {
        rows: table
            .rows
            .iter()
            .filter(|r| families.contains(&r.features.family))
            .cloned()
            .collect(),
        dropped: Vec::new(),
    };

    let indexed: Vec<(usize, DrugFamily)> = families
        .iter()
        .copied()
        .enumerate()
        .map(|(i, f)| (i + 1, f))
        .collect();
    let held_out: Vec<HeldOut> = par::map(&indexed, |(i, f)| evaluate_family(&table, *f, *i, cfg))
        .into_iter()
        .collect::<Result<_, _>>()?;

    let all_labels: Vec<bool> = held_out
        .iter()
        .flat_map(|h| h.labels.iter().copied())
        .collect();
    let mut pooled = BTreeMap::new();
    for m in Method::all() {
        let scores: Vec<f64> = held_out
            .iter()
            .flat_map(|h| h.scores[&m].iter().copied())
            .collect();
        let mut result = MethodResult::score(
            &scores,
            &all_labels,
            match m {
                Method::Essd => SignalRule::AtLeast(cfg.essd_threshold),
                Method::Ssd(_) => SignalRule::Above(cfg.ssd_threshold),
            },
        )?;
        // Counts are the per-evaluation sums by construction; take them from
        // the evaluations so the invariant holds literally.
        result.counts = held_out
            .iter()
            .map(|h| h.evaluation.methods[&m.name()].counts)
            .fold(ConfusionCounts::default(), |a, b| a + b);
        result.rates = rates(&result.counts);
        let mean = |get: fn(&MethodResult) -> Option<f64>| {
            let vals: Option<Vec<f64>> = held_out
                .iter()
                .map(|h| get(&h.evaluation.methods[&m.name()]))
                .collect();
            vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
        };
        pooled.insert(
            m.name(),
            PooledResult {
                mean_auc: mean(|r| r.auc),
                mean_ap: mean(|r| r.ap),
                result,
            },
        );
    }
    Ok(EvaluationReport {
        evaluations: held_out.into_iter().map(|h| h.evaluation).collect(),
        pooled,
    })
}
