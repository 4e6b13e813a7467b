//! The nine association features of a (drug family, medical event) pair.
//!
//! Features 1-6 are risk differences between the month after the index
//! prescription and a substitute: the month before (1), the following year
//! (2), matched non-users (3), comparator-drug users (4), and the month
//! before after rolling codes up to depth 3 (5) or depth 4 (6). Features 7-9
//! are guarded ratios of feature 1 to features 2, 4 and 5.
//!
//! Two routes compute the same numbers: the per-pair functions ([`risk`],
//! [`ssd1`], …) scan the records directly, while [`FamilyMeasures`] tallies
//! every code in one pass per window and is what the pipeline uses.

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::cohort::{self, CohortError, CohortIndex, CohortParams, SubstituteCohort, MONTH_DAYS};
use crate::eval::LabeledPair;
use crate::par;
use crate::seed;
use crate::store::{CodeId, Dataset, Day, DrugFamily, StoreError};

pub const N_FEATURES: usize = 9;
/// Number of monthly slices making up the "year after" of SSD2.
pub const YEAR_SLICES: i32 = 12;

#[derive(Debug, Error)]
pub enum MeasureError {
    #[error("population is empty")]
    EmptyPopulation,
    #[error("no patient is followed up for a full month of the year after the index month")]
    InsufficientFollowUp,
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("no comparator family configured for {0}")]
    MissingComparator(DrugFamily),
    #[error("{path}: {detail}")]
    FeatureFile { path: String, detail: String },
}

/// Which date a window is measured from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Anchor {
    IndexDate,
    SubstituteStart,
}

/// A window of `length_days` days starting `offset_days` after the anchor,
/// with optional roll-up of codes to `depth_map`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RiskWindowSpec {
    pub anchor: Anchor,
    pub offset_days: i32,
    pub length_days: i32,
    pub depth_map: Option<u8>,
}

impl RiskWindowSpec {
    /// Days `[1, 30]` after the anchor.
    pub const fn month_after(anchor: Anchor) -> Self {
        Self {
            anchor,
            offset_days: 1,
            length_days: MONTH_DAYS,
            depth_map: None,
        }
    }

    /// Days `[-30, -1]` before the anchor.
    pub const fn month_before() -> Self {
        Self {
            anchor: Anchor::IndexDate,
            offset_days: -MONTH_DAYS,
            length_days: MONTH_DAYS,
            depth_map: None,
        }
    }

    /// Slice `s` of the year after: days `[1 + 30s, 30 + 30s]`.
    pub const fn year_slice(s: i32) -> Self {
        Self {
            anchor: Anchor::IndexDate,
            offset_days: 1 + MONTH_DAYS * s,
            length_days: MONTH_DAYS,
            depth_map: None,
        }
    }

    pub const fn mapped(self, depth: u8) -> Self {
        Self {
            depth_map: Some(depth),
            ..self
        }
    }

    pub fn bounds(&self, anchor_day: Day) -> (Day, Day) {
        let start = anchor_day + self.offset_days;
        (start, start + self.length_days - 1)
    }
}

/// A population member and the day its windows are measured from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Anchored {
    pub patient: usize,
    pub day: Day,
}

pub fn target_population(cohort: &CohortIndex) -> Vec<Anchored> {
    cohort
        .entries
        .iter()
        .map(|e| Anchored {
            patient: e.patient,
            day: e.index_day,
        })
        .collect()
}

pub fn substitute_population(sub: &SubstituteCohort) -> Vec<Anchored> {
    sub.entries
        .iter()
        .map(|e| Anchored {
            patient: e.patient,
            day: e.window_start,
        })
        .collect()
}

fn proportion(hits: u32, n: u32) -> f64 {
    f64::from(hits) / f64::from(n)
}

fn count_with_event(
    ds: &Dataset,
    population: &[Anchored],
    code: CodeId,
    window: &RiskWindowSpec,
) -> u32 {
    let target = ds.tree().map_code(code, window.depth_map);
    population
        .iter()
        .filter(|a| {
            let (start, end) = window.bounds(a.day);
            ds.has_event_in(a.patient, start, end, target, window.depth_map)
        })
        .count() as u32
}

/// Proportion of `population` with at least one record of `code` (after
/// mapping both sides through `window.depth_map`) inside the window.
pub fn risk(
    ds: &Dataset,
    population: &[Anchored],
    code: CodeId,
    window: &RiskWindowSpec,
) -> Result<f64, MeasureError> {
    if population.is_empty() {
        return Err(MeasureError::EmptyPopulation);
    }
    let hits = count_with_event(ds, population, code, window);
    Ok(proportion(hits, population.len() as u32))
}

fn after_minus_before(
    ds: &Dataset,
    cohort: &CohortIndex,
    code: CodeId,
    depth_map: Option<u8>,
) -> Result<f64, MeasureError> {
    let pop = target_population(cohort);
    let mut after = RiskWindowSpec::month_after(Anchor::IndexDate);
    let mut before = RiskWindowSpec::month_before();
    after.depth_map = depth_map;
    before.depth_map = depth_map;
    Ok(risk(ds, &pop, code, &after)? - risk(ds, &pop, code, &before)?)
}

/// Month after minus month before, same patients.
pub fn ssd1(ds: &Dataset, cohort: &CohortIndex, code: CodeId) -> Result<f64, MeasureError> {
    after_minus_before(ds, cohort, code, None)
}

fn covers(ds: &Dataset, a: &Anchored, window: &RiskWindowSpec) -> bool {
    window.bounds(a.day).1 <= ds.patient(a.patient).reg_end
}

/// Month after minus the mean risk over the twelve following months. Each
/// slice's risk uses only the patients registered for all of it.
pub fn ssd2(ds: &Dataset, cohort: &CohortIndex, code: CodeId) -> Result<f64, MeasureError> {
    let pop = target_population(cohort);
    let after = risk(
        ds,
        &pop,
        code,
        &RiskWindowSpec::month_after(Anchor::IndexDate),
    )?;
    let mut sum = 0.0;
    let mut slices = 0u32;
    for s in 1..=YEAR_SLICES {
        let w = RiskWindowSpec::year_slice(s);
        let covered: Vec<Anchored> = pop.iter().copied().filter(|a| covers(ds, a, &w)).collect();
        if covered.is_empty() {
            continue;
        }
        sum += risk(ds, &covered, code, &w)?;
        slices += 1;
    }
    if slices == 0 {
        return Err(MeasureError::InsufficientFollowUp);
    }
    Ok(after - sum / f64::from(slices))
}

fn target_minus_substitute(
    ds: &Dataset,
    cohort: &CohortIndex,
    sub: &SubstituteCohort,
    code: CodeId,
) -> Result<f64, MeasureError> {
    let after = risk(
        ds,
        &target_population(cohort),
        code,
        &RiskWindowSpec::month_after(Anchor::IndexDate),
    )?;
    let other = risk(
        ds,
        &substitute_population(sub),
        code,
        &RiskWindowSpec::month_after(Anchor::SubstituteStart),
    )?;
    Ok(after - other)
}

/// Target month after minus matched non-users' sampled month.
pub fn ssd3(
    ds: &Dataset,
    cohort: &CohortIndex,
    matched: &SubstituteCohort,
    code: CodeId,
) -> Result<f64, MeasureError> {
    if matched.is_empty() {
        return Err(CohortError::NoControls(cohort.family).into());
    }
    target_minus_substitute(ds, cohort, matched, code)
}

/// Target month after minus comparator new users' month after.
pub fn ssd4(
    ds: &Dataset,
    cohort: &CohortIndex,
    comparator: &SubstituteCohort,
    code: CodeId,
) -> Result<f64, MeasureError> {
    if comparator.is_empty() {
        return Err(CohortError::EmptyCohort(cohort.family).into());
    }
    target_minus_substitute(ds, cohort, comparator, code)
}

/// As [`ssd1`] with every code rolled up to depth 3.
pub fn ssd5(ds: &Dataset, cohort: &CohortIndex, code: CodeId) -> Result<f64, MeasureError> {
    after_minus_before(ds, cohort, code, Some(3))
}

/// As [`ssd1`] with every code rolled up to depth 4.
pub fn ssd6(ds: &Dataset, cohort: &CohortIndex, code: CodeId) -> Result<f64, MeasureError> {
    after_minus_before(ds, cohort, code, Some(4))
}

fn guarded_ratio(num: f64, den: f64) -> f64 {
    if den.abs() > 0.0 {
        num / den
    } else {
        num
    }
}

/// Features 7-9: x1/x2, x1/x4 and x1/x5, each falling back to x1 when the
/// denominator is zero.
pub fn derive_ratios(x: &[f64; 6]) -> [f64; 3] {
    [
        guarded_ratio(x[0], x[1]),
        guarded_ratio(x[0], x[3]),
        guarded_ratio(x[0], x[4]),
    ]
}

/// Patient counts behind a feature vector.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Support {
    pub n_target: u32,
    pub n_matched: u32,
    pub n_comparator: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub family: DrugFamily,
    pub event_code: String,
    pub x: [f64; N_FEATURES],
    pub support: Support,
}

impl FeatureVector {
    /// Feature `k`, numbered from 1.
    pub fn get(&self, k: usize) -> f64 {
        self.x[k - 1]
    }
}

/// Per-code patient counts in one window over one population.
#[derive(Debug, Clone)]
struct Tally {
    n: u32,
    hits: Vec<u32>,
}

impl Tally {
    fn build(
        ds: &Dataset,
        population: &[Anchored],
        window: &RiskWindowSpec,
        only_covered: bool,
    ) -> Self {
        let tree = ds.tree();
        let mut hits = vec![0u32; tree.len()];
        let mut n = 0;
        let mut seen: Vec<CodeId> = Vec::new();
        for a in population {
            if only_covered && !covers(ds, a, window) {
                continue;
            }
            n += 1;
            let (start, end) = window.bounds(a.day);
            seen.clear();
            seen.extend(
                ds.window(a.patient, start, end)
                    .iter()
                    .map(|e| tree.map_code(e.code, window.depth_map)),
            );
            seen.sort_unstable();
            seen.dedup();
            for c in &seen {
                hits[c.index()] += 1;
            }
        }
        Self { n, hits }
    }

    fn risk(&self, code: CodeId) -> f64 {
        proportion(self.hits[code.index()], self.n)
    }
}

/// Every window tally needed for one family's feature vectors.
#[derive(Debug, Clone)]
pub struct FamilyMeasures {
    family: DrugFamily,
    after: [Tally; 3],
    before: [Tally; 3],
    slices: Vec<Tally>,
    matched: Tally,
    comparator: Tally,
}

impl FamilyMeasures {
    pub fn build(
        ds: &Dataset,
        cohort: &CohortIndex,
        matched: &SubstituteCohort,
        comparator: &SubstituteCohort,
    ) -> Result<Self, MeasureError> {
        if cohort.is_empty() {
            return Err(MeasureError::EmptyPopulation);
        }
        if matched.is_empty() {
            return Err(CohortError::NoControls(cohort.family).into());
        }
        if comparator.is_empty() {
            return Err(CohortError::EmptyCohort(cohort.family).into());
        }
        let target = target_population(cohort);
        let depths = [None, Some(3), Some(4)];
        let after_w = RiskWindowSpec::month_after(Anchor::IndexDate);
        let before_w = RiskWindowSpec::month_before();
        let after = depths.map(|d| {
            Tally::build(
                ds,
                &target,
                &RiskWindowSpec {
                    depth_map: d,
                    ..after_w
                },
                false,
            )
        });
        let before = depths.map(|d| {
            Tally::build(
                ds,
                &target,
                &RiskWindowSpec {
                    depth_map: d,
                    ..before_w
                },
                false,
            )
        });
        let slices: Vec<Tally> = (1..=YEAR_SLICES)
            .map(|s| Tally::build(ds, &target, &RiskWindowSpec::year_slice(s), true))
            .collect();
        if slices.iter().all(|t| t.n == 0) {
            return Err(MeasureError::InsufficientFollowUp);
        }
        let sub_w = RiskWindowSpec::month_after(Anchor::SubstituteStart);
        let matched = Tally::build(ds, &substitute_population(matched), &sub_w, false);
        let comparator = Tally::build(ds, &substitute_population(comparator), &sub_w, false);
        Ok(Self {
            family: cohort.family,
            after,
            before,
            slices,
            matched,
            comparator,
        })
    }

    pub fn features(&self, ds: &Dataset, code: CodeId) -> FeatureVector {
        let tree = ds.tree();
        let after = self.after[0].risk(code);
        let x1 = after - self.before[0].risk(code);
        let mut sum = 0.0;
        let mut k = 0u32;
        for t in self.slices.iter().filter(|t| t.n > 0) {
            sum += t.risk(code);
            k += 1;
        }
        let x2 = after - sum / f64::from(k);
        let x3 = after - self.matched.risk(code);
        let x4 = after - self.comparator.risk(code);
        let c3 = tree.ancestor_id(code, 3);
        let x5 = self.after[1].risk(c3) - self.before[1].risk(c3);
        let c4 = tree.ancestor_id(code, 4);
        let x6 = self.after[2].risk(c4) - self.before[2].risk(c4);
        let base = [x1, x2, x3, x4, x5, x6];
        let [x7, x8, x9] = derive_ratios(&base);
        let x = [x1, x2, x3, x4, x5, x6, x7, x8, x9];
        debug_assert!(x[..6].iter().all(|v| (-1.0..=1.0).contains(v)));
        FeatureVector {
            family: self.family,
            event_code: tree.code(code).to_string(),
            x,
            support: Support {
                n_target: self.after[0].n,
                n_matched: self.matched.n,
                n_comparator: self.comparator.n,
            },
        }
    }
}

/// Parameters of the feature stage.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub families: Vec<DrugFamily>,
    pub comparators: BTreeMap<DrugFamily, DrugFamily>,
    pub cohort: CohortParams,
    pub rme_window_days: i32,
    pub rme_min_patients: u32,
    pub match_year_tolerance_max: i32,
    pub seed: u64,
}

impl FeatureConfig {
    pub fn new(
        families: Vec<DrugFamily>,
        comparators: BTreeMap<DrugFamily, DrugFamily>,
        seed: u64,
    ) -> Self {
        Self {
            families,
            comparators,
            cohort: CohortParams::default(),
            rme_window_days: MONTH_DAYS,
            rme_min_patients: 3,
            match_year_tolerance_max: 5,
            seed,
        }
    }
}

/// Which pairs get a row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureScope {
    /// Reference pairs only (those passing the risk-event rule).
    ReferenceOnly,
    /// Every risk medical event of every family, labelled where known.
    AllRiskEvents,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub features: FeatureVector,
    /// `Some(true)` for a known ADR, `Some(false)` for a known non-ADR.
    pub label: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureTable {
    /// Sorted by (family, event code).
    pub rows: Vec<FeatureRow>,
    /// Reference pairs that could not be scored.
    pub dropped: Vec<LabeledPair>,
}

impl FeatureTable {
    pub fn labelled(&self) -> impl Iterator<Item = (&FeatureVector, bool)> {
        self.rows
            .iter()
            .filter_map(|r| r.label.map(|l| (&r.features, l)))
    }

    pub fn families(&self) -> BTreeSet<DrugFamily> {
        self.rows.iter().map(|r| r.features.family).collect()
    }
}

/// The populations behind one family's features.
#[derive(Debug, Clone)]
pub struct FamilyStudy {
    pub cohort: CohortIndex,
    pub risk_events: cohort::RiskEventSet,
    pub matched: SubstituteCohort,
    pub comparator: SubstituteCohort,
    pub measures: FamilyMeasures,
}

/// Builds cohort, risk events, both substitute populations and tallies for
/// `family`. Matching uses a sub-seed of the master seed keyed on the family.
pub fn study_family(
    ds: &Dataset,
    family: &DrugFamily,
    cfg: &FeatureConfig,
) -> Result<FamilyStudy, MeasureError> {
    let comparator_family = cfg
        .comparators
        .get(family)
        .ok_or(MeasureError::MissingComparator(*family))?;
    let cohort = cohort::build_cohort(ds, family, &cfg.cohort)?;
    let risk_events =
        cohort::risk_medical_events(ds, &cohort, cfg.rme_window_days, cfg.rme_min_patients)?;
    let match_seed =
        seed::derive_labeled(cfg.seed, "match", &[seed::hash_str(&family.to_string())]);
    let matched =
        cohort::match_nonuser_cohort(ds, &cohort, cfg.match_year_tolerance_max, match_seed)?;
    let comparator = cohort::comparator_cohort(ds, &cohort, comparator_family, &cfg.cohort)?;
    let measures = FamilyMeasures::build(ds, &cohort, &matched, &comparator)?;
    Ok(FamilyStudy {
        cohort,
        risk_events,
        matched,
        comparator,
        measures,
    })
}

/// Computes feature vectors for the configured families.
///
/// Families without any qualifying new user are skipped with a warning.
/// Reference pairs whose event is not a risk medical event of their family
/// (or whose family or code is unknown) are dropped with a warning and
/// reported in [`FeatureTable::dropped`].
pub fn feature_matrix(
    ds: &Dataset,
    cfg: &FeatureConfig,
    reference: &[LabeledPair],
    scope: FeatureScope,
) -> Result<FeatureTable, MeasureError> {
    let mut families: Vec<DrugFamily> = cfg.families.clone();
    families.sort();
    families.dedup();

    let studies = par::map(&families, |f| match study_family(ds, f, cfg) {
        Ok(s) => Ok(Some(s)),
        Err(MeasureError::Cohort(CohortError::EmptyCohort(e))) if e == *f => {
            log::warn!("drug family {f}: no qualifying new users, skipping");
            Ok(None)
        }
        Err(e) => Err(e),
    });
    let mut by_family = BTreeMap::new();
    for (f, s) in families.iter().zip(studies) {
        if let Some(s) = s? {
            by_family.insert(*f, s);
        }
    }

    let mut labels: BTreeMap<(DrugFamily, CodeId), bool> = BTreeMap::new();
    let mut dropped = Vec::new();
    let tree = ds.tree();
    for pair in reference {
        let reason = match (by_family.get(&pair.family), tree.id(&pair.event_code)) {
            (None, _) => Some("family not studied".to_string()),
            (_, None) => Some("event code not in the event tree".to_string()),
            (Some(study), Some(code)) if !study.risk_events.contains(code) => Some(format!(
                "seen in fewer than {} target patients within {} days of the index date",
                cfg.rme_min_patients, cfg.rme_window_days
            )),
            (Some(_), Some(code)) => {
                labels.insert((pair.family, code), pair.label);
                None
            }
        };
        if let Some(reason) = reason {
            log::warn!(
                "dropping reference pair {} / {}: {reason}",
                pair.family,
                pair.event_code
            );
            dropped.push(pair.clone());
        }
    }

    let mut jobs: Vec<(DrugFamily, CodeId)> = match scope {
        FeatureScope::ReferenceOnly => labels.keys().copied().collect(),
        FeatureScope::AllRiskEvents => by_family
            .iter()
            .flat_map(|(f, s)| s.risk_events.codes().map(move |c| (*f, c)))
            .collect(),
    };
    jobs.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then_with(|| tree.code(a.1).cmp(tree.code(b.1)))
    });

    let rows = par::map(&jobs, |(f, c)| FeatureRow {
        features: by_family[f].measures.features(ds, *c),
        label: labels.get(&(*f, *c)).copied(),
    });
    Ok(FeatureTable { rows, dropped })
}

pub const FEATURE_COLUMNS: [&str; 15] = [
    "family_prefix",
    "event_code",
    "x1",
    "x2",
    "x3",
    "x4",
    "x5",
    "x6",
    "x7",
    "x8",
    "x9",
    "label",
    "n_target",
    "n_matched",
    "n_comparator",
];

/// Writes a feature table as CSV. Reals use the shortest representation that
/// round-trips exactly.
pub fn write_features<W: io::Write>(table: &FeatureTable, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(FEATURE_COLUMNS)?;
    for row in &table.rows {
        let f = &row.features;
        let mut rec: Vec<String> = vec![f.family.to_string(), f.event_code.clone()];
        rec.extend(f.x.iter().map(|v| v.to_string()));
        rec.push(match row.label {
            Some(true) => "1".into(),
            Some(false) => "0".into(),
            None => String::new(),
        });
        rec.push(f.support.n_target.to_string());
        rec.push(f.support.n_matched.to_string());
        rec.push(f.support.n_comparator.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<FeatureTable, MeasureError> {
    let bad = |line: u64, detail: String| MeasureError::FeatureFile {
        path: path.display().to_string(),
        detail: format!("line {line}: {detail}"),
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| bad(0, e.to_string()))?;
    let headers = r.headers().map_err(|e| bad(1, e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != FEATURE_COLUMNS {
        return Err(bad(
            1,
            format!("expected header {}", FEATURE_COLUMNS.join(",")),
        ));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(0, e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let family: DrugFamily = rec[0]
            .parse()
            .map_err(|e: StoreError| bad(line, e.to_string()))?;
        let mut x = [0.0; N_FEATURES];
        for (k, v) in x.iter_mut().enumerate() {
            *v = rec[2 + k]
                .parse()
                .map_err(|_| bad(line, format!("x{} is not a number", k + 1)))?;
        }
        let label = match &rec[11] {
            "" => None,
            "1" => Some(true),
            "0" => Some(false),
            other => {
                return Err(bad(
                    line,
                    format!("label must be 1, 0 or empty, got '{other}'"),
                ))
            }
        };
        let count = |i: usize| {
            rec[i]
                .parse::<u32>()
                .map_err(|_| bad(line, format!("{} is not a count", FEATURE_COLUMNS[i])))
        };
        rows.push(FeatureRow {
            features: FeatureVector {
                family,
                event_code: rec[1].to_string(),
                x,
                support: Support {
                    n_target: count(12)?,
                    n_matched: count(13)?,
                    n_comparator: count(14)?,
                },
            },
            label,
        });
    }
    Ok(FeatureTable {
        rows,
        dropped: Vec::new(),
    })
}
