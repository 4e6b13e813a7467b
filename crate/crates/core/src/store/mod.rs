//! Longitudinal patient data: patients, dated medical events, dated
//! prescriptions and the medical event code hierarchy.
//!
//! A [`Dataset`] is immutable once built and every query borrows it, so any
//! number of workers can read it at once.

mod bnf;
mod load;
mod tree;

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::PathBuf;

use chrono::{Datelike, NaiveDate};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use bnf::{BnfCode, DrugFamily};
pub use load::{load_dataset, read_tree, save_dataset, DatasetPaths};
pub use tree::{CodeId, EventCodeTree, TreeRow, MAX_DEPTH};

/// Calendar day number (days since 0001-01-01 CE). All window arithmetic is
/// done in whole days.
pub type Day = i32;

pub fn day_of(date: NaiveDate) -> Day {
    date.num_days_from_ce()
}

pub fn date_of(day: Day) -> NaiveDate {
    NaiveDate::from_num_days_from_ce_opt(day).expect("day number within chrono's range")
}

pub fn parse_date(s: &str) -> Result<Day, chrono::ParseError> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").map(day_of)
}

pub fn format_day(day: Day) -> String {
    date_of(day).format("%Y-%m-%d").to_string()
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{file}:{line}: malformed value in column '{column}': {detail}")]
    MalformedRow {
        file: String,
        line: usize,
        column: String,
        detail: String,
    },
    #[error("{file}:{line}: integrity violation: {detail}")]
    Integrity {
        file: String,
        line: usize,
        detail: String,
    },
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("unknown event code '{0}'")]
    UnknownCode(String),
    #[error("unknown patient '{0}'")]
    UnknownPatient(String),
    #[error("invalid BNF code {0}")]
    InvalidBnf(String),
    #[error("target depth {0} outside 1..=5")]
    InvalidDepth(u8),
    #[error("invalid window: start {start} after end {end}")]
    InvalidWindow { start: Day, end: Day },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Gender {
    M,
    F,
}

impl Gender {
    pub fn as_str(self) -> &'static str {
        match self {
            Gender::M => "M",
            Gender::F => "F",
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Gender {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "M" => Ok(Gender::M),
            "F" => Ok(Gender::F),
            other => Err(format!("expected M or F, got '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Patient {
    pub patient_id: String,
    pub year_of_birth: i32,
    pub gender: Gender,
    pub reg_start: Day,
    pub reg_end: Day,
}

impl Patient {
    pub fn is_registered(&self, day: Day) -> bool {
        self.reg_start <= day && day <= self.reg_end
    }
}

/// A dated medical event for one patient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Event {
    pub day: Day,
    pub code: CodeId,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Prescription {
    pub day: Day,
    pub bnf: BnfCode,
    pub drug_id: String,
}

/// Un-indexed event row, as read from a file or produced by the generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventRow {
    pub patient_id: String,
    pub day: Day,
    pub event_code: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrescriptionRow {
    pub patient_id: String,
    pub day: Day,
    pub drug_id: String,
    pub bnf: BnfCode,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize)]
pub struct Provenance {
    pub sources: Vec<String>,
    pub loaded_at: String,
    pub patients: usize,
    pub events: usize,
    pub prescriptions: usize,
    pub tree_nodes: usize,
}

/// Source labels and line numbers used for integrity messages.
#[derive(Debug, Clone)]
pub struct RowOrigin {
    pub patients: String,
    pub events: String,
    pub prescriptions: String,
    /// Source line of each row; rows without an entry are numbered as if
    /// they followed a single header line.
    pub patient_lines: Vec<usize>,
    pub event_lines: Vec<usize>,
    pub prescription_lines: Vec<usize>,
}

impl RowOrigin {
    fn line(lines: &[usize], i: usize) -> usize {
        lines.get(i).copied().unwrap_or(i + 2)
    }
}

impl Default for RowOrigin {
    fn default() -> Self {
        Self {
            patients: "patients".into(),
            events: "events".into(),
            prescriptions: "prescriptions".into(),
            patient_lines: Vec::new(),
            event_lines: Vec::new(),
            prescription_lines: Vec::new(),
        }
    }
}

/// Per-patient prescription dates of one drug family.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FamilyPrescriptions {
    pub family: DrugFamily,
    /// `(patient index, sorted distinct prescription days)`, by patient index.
    pub by_patient: Vec<(usize, Vec<Day>)>,
}

impl FamilyPrescriptions {
    pub fn days_of(&self, patient: usize) -> Option<&[Day]> {
        self.by_patient
            .binary_search_by_key(&patient, |(p, _)| *p)
            .ok()
            .map(|i| self.by_patient[i].1.as_slice())
    }

    pub fn patients(&self) -> impl Iterator<Item = usize> + '_ {
        self.by_patient.iter().map(|(p, _)| *p)
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    patients: Vec<Patient>,
    index: HashMap<String, usize>,
    events: Vec<Vec<Event>>,
    prescriptions: Vec<Vec<Prescription>>,
    tree: EventCodeTree,
    provenance: Provenance,
}

impl Dataset {
    /// Validates and indexes raw rows. Patients are ordered by id and every
    /// per-patient list is date-sorted.
    pub fn from_parts(
        mut patients: Vec<Patient>,
        event_rows: Vec<EventRow>,
        prescription_rows: Vec<PrescriptionRow>,
        tree: EventCodeTree,
        origin: &RowOrigin,
        sources: Vec<String>,
    ) -> Result<Self, StoreError> {
        if patients.is_empty() {
            return Err(StoreError::EmptyDataset("no patients".into()));
        }
        if tree.is_empty() {
            return Err(StoreError::EmptyDataset("event tree has no nodes".into()));
        }
        for (i, p) in patients.iter().enumerate() {
            let bad = |detail: String| StoreError::Integrity {
                file: origin.patients.clone(),
                line: RowOrigin::line(&origin.patient_lines, i),
                detail,
            };
            if p.reg_start > p.reg_end {
                return Err(bad(format!(
                    "patient '{}' reg_start after reg_end",
                    p.patient_id
                )));
            }
            if p.year_of_birth > date_of(p.reg_end).year() {
                return Err(bad(format!(
                    "patient '{}' born in {} after registration ends",
                    p.patient_id, p.year_of_birth
                )));
            }
        }
        // Line numbers refer to the original order, so keep it until every
        // check that reports them has run.
        let mut index = HashMap::with_capacity(patients.len());
        for (i, p) in patients.iter().enumerate() {
            if index.insert(p.patient_id.clone(), i).is_some() {
                return Err(StoreError::Integrity {
                    file: origin.patients.clone(),
                    line: RowOrigin::line(&origin.patient_lines, i),
                    detail: format!("duplicate patient_id '{}'", p.patient_id),
                });
            }
        }

        let mut events: Vec<Vec<Event>> = vec![Vec::new(); patients.len()];
        for (i, row) in event_rows.iter().enumerate() {
            let bad = |detail: String| StoreError::Integrity {
                file: origin.events.clone(),
                line: RowOrigin::line(&origin.event_lines, i),
                detail,
            };
            let &p = index
                .get(&row.patient_id)
                .ok_or_else(|| bad(format!("unknown patient_id '{}'", row.patient_id)))?;
            let code = tree
                .id(&row.event_code)
                .ok_or_else(|| bad(format!("unknown event_code '{}'", row.event_code)))?;
            if !patients[p].is_registered(row.day) {
                return Err(bad(format!(
                    "event on {} outside registration of patient '{}'",
                    format_day(row.day),
                    row.patient_id
                )));
            }
            events[p].push(Event { day: row.day, code });
        }

        let mut prescriptions: Vec<Vec<Prescription>> = vec![Vec::new(); patients.len()];
        for (i, row) in prescription_rows.into_iter().enumerate() {
            let bad = |detail: String| StoreError::Integrity {
                file: origin.prescriptions.clone(),
                line: RowOrigin::line(&origin.prescription_lines, i),
                detail,
            };
            let &p = index
                .get(&row.patient_id)
                .ok_or_else(|| bad(format!("unknown patient_id '{}'", row.patient_id)))?;
            if !patients[p].is_registered(row.day) {
                return Err(bad(format!(
                    "prescription on {} outside registration of patient '{}'",
                    format_day(row.day),
                    row.patient_id
                )));
            }
            prescriptions[p].push(Prescription {
                day: row.day,
                bnf: row.bnf,
                drug_id: row.drug_id,
            });
        }

        // Reorder everything by patient id.
        let mut joined: Vec<(Patient, Vec<Event>, Vec<Prescription>)> = patients
            .drain(..)
            .zip(events)
            .zip(prescriptions)
            .map(|((p, mut ev), mut rx)| {
                ev.sort_unstable();
                rx.sort();
                (p, ev, rx)
            })
            .collect();
        joined.sort_by(|a, b| a.0.patient_id.cmp(&b.0.patient_id));
        let mut sorted_patients = Vec::with_capacity(joined.len());
        let mut events = Vec::with_capacity(joined.len());
        let mut prescriptions = Vec::with_capacity(joined.len());
        for (p, ev, rx) in joined {
            sorted_patients.push(p);
            events.push(ev);
            prescriptions.push(rx);
        }
        let index = sorted_patients
            .iter()
            .enumerate()
            .map(|(i, p)| (p.patient_id.clone(), i))
            .collect();

        let provenance = Provenance {
            sources,
            loaded_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            patients: sorted_patients.len(),
            events: event_rows.len(),
            prescriptions: prescriptions.iter().map(Vec::len).sum(),
            tree_nodes: tree.len(),
        };

        Ok(Self {
            patients: sorted_patients,
            index,
            events,
            prescriptions,
            tree,
            provenance,
        })
    }

    pub fn patients(&self) -> &[Patient] {
        &self.patients
    }

    pub fn patient(&self, idx: usize) -> &Patient {
        &self.patients[idx]
    }

    pub fn patient_index(&self, patient_id: &str) -> Result<usize, StoreError> {
        self.index
            .get(patient_id)
            .copied()
            .ok_or_else(|| StoreError::UnknownPatient(patient_id.to_string()))
    }

    pub fn tree(&self) -> &EventCodeTree {
        &self.tree
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn events_of(&self, patient: usize) -> &[Event] {
        &self.events[patient]
    }

    pub fn prescriptions_of(&self, patient: usize) -> &[Prescription] {
        &self.prescriptions[patient]
    }

    pub fn event_count(&self) -> usize {
        self.events.iter().map(Vec::len).sum()
    }

    pub fn prescription_count(&self) -> usize {
        self.prescriptions.iter().map(Vec::len).sum()
    }

    /// Records of `patient` dated within `[start, end]` (inclusive).
    pub fn window(&self, patient: usize, start: Day, end: Day) -> &[Event] {
        let ev = &self.events[patient];
        let lo = ev.partition_point(|e| e.day < start);
        let hi = ev.partition_point(|e| e.day <= end);
        if lo >= hi {
            &[]
        } else {
            &ev[lo..hi]
        }
    }

    /// Whether `patient` has a record in `[start, end]` whose code, after the
    /// optional depth mapping, equals `code`.
    pub fn has_event_in(
        &self,
        patient: usize,
        start: Day,
        end: Day,
        code: CodeId,
        depth_map: Option<u8>,
    ) -> bool {
        self.window(patient, start, end)
            .iter()
            .any(|e| self.tree.map_code(e.code, depth_map) == code)
    }

    /// Distinct codes recorded for a patient within `[start, end]`, mapped
    /// through `depth_map` when given.
    pub fn events_in_window(
        &self,
        patient_id: &str,
        start: Day,
        end: Day,
        depth_map: Option<u8>,
    ) -> Result<BTreeSet<CodeId>, StoreError> {
        let p = self.patient_index(patient_id)?;
        if start > end {
            return Err(StoreError::InvalidWindow { start, end });
        }
        if let Some(d) = depth_map {
            if !(1..=MAX_DEPTH).contains(&d) {
                return Err(StoreError::InvalidDepth(d));
            }
        }
        Ok(self
            .window(p, start, end)
            .iter()
            .map(|e| self.tree.map_code(e.code, depth_map))
            .collect())
    }

    /// Prescription days of every drug in `family`, grouped by patient.
    pub fn family_prescriptions(&self, family: &DrugFamily) -> FamilyPrescriptions {
        let by_patient = self
            .prescriptions
            .iter()
            .enumerate()
            .filter_map(|(p, rx)| {
                let mut days: Vec<Day> = rx
                    .iter()
                    .filter(|r| family.contains(&r.bnf))
                    .map(|r| r.day)
                    .collect();
                days.dedup();
                (!days.is_empty()).then_some((p, days))
            })
            .collect();
        FamilyPrescriptions {
            family: *family,
            by_patient,
        }
    }

    /// SHA-256 over a canonical serialisation of the content, excluding
    /// provenance.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for row in self.tree.rows() {
            h.update(format!(
                "T|{}|{}|{}|{}\n",
                row.code,
                row.parent.as_deref().unwrap_or(""),
                row.depth,
                row.description
            ));
        }
        for (i, p) in self.patients.iter().enumerate() {
            h.update(format!(
                "P|{}|{}|{}|{}|{}\n",
                p.patient_id, p.year_of_birth, p.gender, p.reg_start, p.reg_end
            ));
            for e in &self.events[i] {
                h.update(format!("E|{}|{}\n", e.day, self.tree.code(e.code)));
            }
            for r in &self.prescriptions[i] {
                h.update(format!("R|{}|{}|{}\n", r.day, r.drug_id, r.bnf));
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
