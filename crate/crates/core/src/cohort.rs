//! Target populations (new users of a drug family), their risk medical
//! events, and the two substitute populations: age/gender matched non-users
//! and new users of a comparator family.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::seed;
use crate::store::{CodeId, Dataset, Day, DrugFamily, Gender};

/// Length of a "month" everywhere in the pipeline.
pub const MONTH_DAYS: i32 = 30;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CohortError {
    #[error("no qualifying new users of drug family {0}")]
    EmptyCohort(DrugFamily),
    #[error("no matched non-user controls for drug family {0}")]
    NoControls(DrugFamily),
    #[error("comparator family {0} is the target family itself")]
    SameComparator(DrugFamily),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CohortParams {
    pub washout_days: i32,
    pub min_pre_observation_days: i32,
    pub min_post_observation_days: i32,
}

impl Default for CohortParams {
    fn default() -> Self {
        Self {
            washout_days: 90,
            min_pre_observation_days: MONTH_DAYS,
            min_post_observation_days: MONTH_DAYS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct CohortEntry {
    pub patient: usize,
    pub index_day: Day,
}

/// New users of a family: one index prescription per patient.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CohortIndex {
    pub family: DrugFamily,
    pub entries: Vec<CohortEntry>,
    pub washout_days: i32,
}

impl CohortIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, patient: usize) -> Option<Day> {
        self.entries
            .binary_search_by_key(&patient, |e| e.patient)
            .ok()
            .map(|i| self.entries[i].index_day)
    }
}

/// Builds the new-user cohort of `family`.
///
/// A prescription qualifies when no other prescription of the family falls in
/// the preceding `washout_days` and the patient is registered for the
/// required observation time either side of it. Each patient contributes the
/// earliest qualifying prescription, if any.
pub fn build_cohort(
    ds: &Dataset,
    family: &DrugFamily,
    params: &CohortParams,
) -> Result<CohortIndex, CohortError> {
    let rx = ds.family_prescriptions(family);
    let mut entries = Vec::new();
    for (p, days) in &rx.by_patient {
        let patient = ds.patient(*p);
        let first = days.iter().enumerate().find(|&(k, &day)| {
            let washed_out = k == 0 || day - days[k - 1] > params.washout_days;
            let observed = day - patient.reg_start >= params.min_pre_observation_days
                && patient.reg_end - day >= params.min_post_observation_days;
            washed_out && observed
        });
        if let Some((_, &index_day)) = first {
            entries.push(CohortEntry {
                patient: *p,
                index_day,
            });
        }
    }
    if entries.is_empty() {
        return Err(CohortError::EmptyCohort(*family));
    }
    Ok(CohortIndex {
        family: *family,
        entries,
        washout_days: params.washout_days,
    })
}

/// Events seen in at least `min_patients` cohort members within
/// `window_days` after their index date.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RiskEventSet {
    pub family: DrugFamily,
    /// Code -> number of distinct cohort patients with it in the window.
    pub events: BTreeMap<CodeId, u32>,
    pub min_patients: u32,
    pub window_days: i32,
}

impl RiskEventSet {
    pub fn contains(&self, code: CodeId) -> bool {
        self.events.contains_key(&code)
    }

    pub fn codes(&self) -> impl Iterator<Item = CodeId> + '_ {
        self.events.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Counts, per code, the cohort patients with at least one record in days
/// `[1, window_days]` after their index date (the index day is excluded).
pub fn post_index_patient_counts(ds: &Dataset, cohort: &CohortIndex, window_days: i32) -> Vec<u32> {
    let mut counts = vec![0u32; ds.tree().len()];
    let mut seen: Vec<CodeId> = Vec::new();
    for e in &cohort.entries {
        seen.clear();
        seen.extend(
            ds.window(e.patient, e.index_day + 1, e.index_day + window_days)
                .iter()
                .map(|ev| ev.code),
        );
        seen.sort_unstable();
        seen.dedup();
        for c in &seen {
            counts[c.index()] += 1;
        }
    }
    counts
}

pub fn risk_medical_events(
    ds: &Dataset,
    cohort: &CohortIndex,
    window_days: i32,
    min_patients: u32,
) -> Result<RiskEventSet, CohortError> {
    if cohort.is_empty() {
        return Err(CohortError::EmptyCohort(cohort.family));
    }
    let counts = post_index_patient_counts(ds, cohort, window_days);
    let events = counts
        .iter()
        .enumerate()
        .filter(|&(_, &n)| n >= min_patients)
        .map(|(c, &n)| (CodeId(c as u32), n))
        .collect();
    Ok(RiskEventSet {
        family: cohort.family,
        events,
        min_patients,
        window_days,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubstituteKind {
    MatchedNonUser { seed: u64 },
    ComparatorDrug { family: DrugFamily },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubstituteEntry {
    pub patient: usize,
    /// The risk window is the month after this day, mirroring an index date.
    pub window_start: Day,
    /// Target patient this control was matched to (matched non-users only).
    pub matched_to: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubstituteCohort {
    pub kind: SubstituteKind,
    pub entries: Vec<SubstituteEntry>,
}

impl SubstituteCohort {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Samples one never-user control per target patient with the same gender
/// and a year of birth within `0, ±1, …, ±max_year_tolerance` (closest band
/// first), without replacement. Each control gets a uniformly drawn month
/// inside their registration. Targets with no candidate are dropped.
pub fn match_nonuser_cohort(
    ds: &Dataset,
    cohort: &CohortIndex,
    max_year_tolerance: i32,
    seed: u64,
) -> Result<SubstituteCohort, CohortError> {
    if cohort.is_empty() {
        return Err(CohortError::EmptyCohort(cohort.family));
    }
    let users = ds.family_prescriptions(&cohort.family);
    let mut is_user = vec![false; ds.patients().len()];
    for p in users.patients() {
        is_user[p] = true;
    }

    let mut pool: BTreeMap<(Gender, i32), Vec<usize>> = BTreeMap::new();
    for (i, p) in ds.patients().iter().enumerate() {
        if !is_user[i] && p.reg_end - p.reg_start >= MONTH_DAYS {
            pool.entry((p.gender, p.year_of_birth)).or_default().push(i);
        }
    }
    let mut rng = seed::rng(seed);
    for bucket in pool.values_mut() {
        bucket.shuffle(&mut rng);
    }

    let mut entries = Vec::with_capacity(cohort.len());
    let mut unmatched = 0usize;
    for target in &cohort.entries {
        let t = ds.patient(target.patient);
        let mut chosen = None;
        for k in 0..=max_year_tolerance.max(0) {
            let years: &[i32] = if k == 0 {
                &[t.year_of_birth]
            } else {
                &[t.year_of_birth - k, t.year_of_birth + k]
            };
            let sizes: Vec<usize> = years
                .iter()
                .map(|y| pool.get(&(t.gender, *y)).map_or(0, Vec::len))
                .collect();
            let total: usize = sizes.iter().sum();
            if total == 0 {
                continue;
            }
            let mut r = rng.gen_range(0..total);
            for (y, size) in years.iter().zip(&sizes) {
                if r < *size {
                    let bucket = pool.get_mut(&(t.gender, *y)).expect("non-empty bucket");
                    chosen = Some(bucket.swap_remove(r));
                    break;
                }
                r -= size;
            }
            break;
        }
        match chosen {
            Some(c) => {
                let cp = ds.patient(c);
                let window_start = rng.gen_range(cp.reg_start..=cp.reg_end - MONTH_DAYS);
                entries.push(SubstituteEntry {
                    patient: c,
                    window_start,
                    matched_to: Some(target.patient),
                });
            }
            None => unmatched += 1,
        }
    }
    if unmatched > 0 {
        log::info!(
            "{}: {unmatched} of {} target patients had no matched non-user control",
            cohort.family,
            cohort.len()
        );
    }
    if entries.is_empty() {
        return Err(CohortError::NoControls(cohort.family));
    }
    Ok(SubstituteCohort {
        kind: SubstituteKind::MatchedNonUser { seed },
        entries,
    })
}

/// New users of `comparator`, built with the same rules as the target
/// cohort. Patients who start both families on the same day are removed.
pub fn comparator_cohort(
    ds: &Dataset,
    target: &CohortIndex,
    comparator: &DrugFamily,
    params: &CohortParams,
) -> Result<SubstituteCohort, CohortError> {
    if *comparator == target.family {
        return Err(CohortError::SameComparator(*comparator));
    }
    let cohort = build_cohort(ds, comparator, params)?;
    let entries: Vec<SubstituteEntry> = cohort
        .entries
        .iter()
        .filter(|e| target.index_of(e.patient) != Some(e.index_day))
        .map(|e| SubstituteEntry {
            patient: e.patient,
            window_start: e.index_day,
            matched_to: None,
        })
        .collect();
    if entries.is_empty() {
        return Err(CohortError::EmptyCohort(*comparator));
    }
    Ok(SubstituteCohort {
        kind: SubstituteKind::ComparatorDrug {
            family: *comparator,
        },
        entries,
    })
}
