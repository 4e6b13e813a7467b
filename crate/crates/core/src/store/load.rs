use std::path::{Path, PathBuf};

use super::{
    format_day, parse_date, BnfCode, Dataset, EventCodeTree, EventRow, Gender, Patient,
    PrescriptionRow, RowOrigin, StoreError, TreeRow,
};

pub const PATIENT_COLUMNS: [&str; 5] = [
    "patient_id",
    "year_of_birth",
    "gender",
    "reg_start",
    "reg_end",
];
pub const EVENT_COLUMNS: [&str; 3] = ["patient_id", "date", "event_code"];
pub const PRESCRIPTION_COLUMNS: [&str; 4] = ["patient_id", "date", "drug_id", "bnf_code"];
pub const TREE_COLUMNS: [&str; 4] = ["event_code", "parent_code", "depth", "description"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetPaths {
    pub patients: PathBuf,
    pub events: PathBuf,
    pub prescriptions: PathBuf,
    pub event_tree: PathBuf,
}

impl DatasetPaths {
    /// The conventional file names inside one directory.
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        Self {
            patients: dir.join("patients.csv"),
            events: dir.join("events.csv"),
            prescriptions: dir.join("prescriptions.csv"),
            event_tree: dir.join("event_tree.csv"),
        }
    }
}

/// Row reader that checks the header and reports 1-based line numbers.
struct Rows {
    path: PathBuf,
    label: String,
    reader: csv::Reader<std::fs::File>,
}

impl Rows {
    fn open(path: &Path, columns: &[&str]) -> Result<Self, StoreError> {
        let file = std::fs::File::open(path).map_err(|source| StoreError::Io {
            path: path.into(),
            source,
        })?;
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(file);
        let label = path.display().to_string();
        let headers = reader
            .headers()
            .map_err(|source| StoreError::Csv {
                path: path.into(),
                source,
            })?
            .clone();
        let got: Vec<&str> = headers.iter().map(str::trim).collect();
        if got != columns {
            return Err(StoreError::MalformedRow {
                file: label,
                line: 1,
                column: "<header>".into(),
                detail: format!(
                    "expected '{}', found '{}'",
                    columns.join(","),
                    got.join(",")
                ),
            });
        }
        Ok(Self {
            path: path.into(),
            label,
            reader,
        })
    }

    /// Calls `f(line, record)` for every data row.
    fn for_each(
        &mut self,
        mut f: impl FnMut(usize, &csv::StringRecord) -> Result<(), StoreError>,
    ) -> Result<usize, StoreError> {
        let mut record = csv::StringRecord::new();
        let mut n = 0;
        loop {
            let more =
                self.reader
                    .read_record(&mut record)
                    .map_err(|source| match source.kind() {
                        csv::ErrorKind::UnequalLengths { pos, .. } => StoreError::MalformedRow {
                            file: self.label.clone(),
                            line: pos.as_ref().map_or(0, |p| p.line() as usize),
                            column: "<row>".into(),
                            detail: "wrong number of fields".into(),
                        },
                        _ => StoreError::Csv {
                            path: self.path.clone(),
                            source,
                        },
                    })?;
            if !more {
                return Ok(n);
            }
            let line = record.position().map_or(0, |p| p.line() as usize);
            f(line, &record)?;
            n += 1;
        }
    }
}

fn field<'r>(
    file: &str,
    line: usize,
    record: &'r csv::StringRecord,
    idx: usize,
    column: &str,
) -> Result<&'r str, StoreError> {
    let v = record.get(idx).map(str::trim).unwrap_or("");
    if v.is_empty() {
        return Err(malformed(file, line, column, "empty value".into()));
    }
    Ok(v)
}

fn malformed(file: &str, line: usize, column: &str, detail: String) -> StoreError {
    StoreError::MalformedRow {
        file: file.to_string(),
        line,
        column: column.to_string(),
        detail,
    }
}

fn date_field(
    file: &str,
    line: usize,
    record: &csv::StringRecord,
    idx: usize,
    column: &str,
) -> Result<i32, StoreError> {
    let v = field(file, line, record, idx, column)?;
    parse_date(v)
        .map_err(|e| malformed(file, line, column, format!("'{v}' is not YYYY-MM-DD ({e})")))
}

/// Reads and validates the event tree file on its own.
pub fn read_tree(path: &Path) -> Result<EventCodeTree, StoreError> {
    let mut rows = Rows::open(path, &TREE_COLUMNS)?;
    let label = rows.label.clone();
    let mut out = Vec::new();
    let mut lines = Vec::new();
    rows.for_each(|line, r| {
        let code = field(&label, line, r, 0, "event_code")?.to_string();
        let parent = r
            .get(1)
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string);
        let depth_s = field(&label, line, r, 2, "depth")?;
        let depth = depth_s.parse::<u8>().map_err(|_| {
            malformed(
                &label,
                line,
                "depth",
                format!("'{depth_s}' is not an integer"),
            )
        })?;
        let description = r.get(3).map(str::trim).unwrap_or("").to_string();
        out.push(TreeRow {
            code,
            parent,
            depth,
            description,
        });
        lines.push(line);
        Ok(())
    })?;
    EventCodeTree::from_rows(out, &label, |i| lines[i])
}

/// Loads the four CSV files and returns a validated, indexed dataset.
///
/// Any malformed or inconsistent row aborts the load; nothing is skipped.
pub fn load_dataset(paths: &DatasetPaths) -> Result<Dataset, StoreError> {
    let tree = read_tree(&paths.event_tree)?;

    let mut rows = Rows::open(&paths.patients, &PATIENT_COLUMNS)?;
    let patients_label = rows.label.clone();
    let mut patients = Vec::new();
    let mut patient_lines = Vec::new();
    rows.for_each(|line, r| {
        let f = &patients_label;
        let yob_s = field(f, line, r, 1, "year_of_birth")?;
        let year_of_birth = yob_s.parse::<i32>().map_err(|_| {
            malformed(
                f,
                line,
                "year_of_birth",
                format!("'{yob_s}' is not an integer"),
            )
        })?;
        let gender = field(f, line, r, 2, "gender")?
            .parse::<Gender>()
            .map_err(|e| malformed(f, line, "gender", e))?;
        patients.push(Patient {
            patient_id: field(f, line, r, 0, "patient_id")?.to_string(),
            year_of_birth,
            gender,
            reg_start: date_field(f, line, r, 3, "reg_start")?,
            reg_end: date_field(f, line, r, 4, "reg_end")?,
        });
        patient_lines.push(line);
        Ok(())
    })?;

    let mut rows = Rows::open(&paths.events, &EVENT_COLUMNS)?;
    let events_label = rows.label.clone();
    let mut events = Vec::new();
    let mut event_lines = Vec::new();
    rows.for_each(|line, r| {
        let f = &events_label;
        events.push(EventRow {
            patient_id: field(f, line, r, 0, "patient_id")?.to_string(),
            day: date_field(f, line, r, 1, "date")?,
            event_code: field(f, line, r, 2, "event_code")?.to_string(),
        });
        event_lines.push(line);
        Ok(())
    })?;

    let mut rows = Rows::open(&paths.prescriptions, &PRESCRIPTION_COLUMNS)?;
    let rx_label = rows.label.clone();
    let mut prescriptions = Vec::new();
    let mut rx_lines = Vec::new();
    rows.for_each(|line, r| {
        let f = &rx_label;
        let bnf_s = field(f, line, r, 3, "bnf_code")?;
        let bnf: BnfCode = bnf_s
            .parse()
            .map_err(|e: StoreError| malformed(f, line, "bnf_code", e.to_string()))?;
        prescriptions.push(PrescriptionRow {
            patient_id: field(f, line, r, 0, "patient_id")?.to_string(),
            day: date_field(f, line, r, 1, "date")?,
            drug_id: field(f, line, r, 2, "drug_id")?.to_string(),
            bnf,
        });
        rx_lines.push(line);
        Ok(())
    })?;

    let origin = RowOrigin {
        patients: patients_label,
        events: events_label,
        prescriptions: rx_label,
        patient_lines,
        event_lines,
        prescription_lines: rx_lines,
    };
    let sources = vec![
        paths.patients.display().to_string(),
        paths.events.display().to_string(),
        paths.prescriptions.display().to_string(),
        paths.event_tree.display().to_string(),
    ];
    Dataset::from_parts(patients, events, prescriptions, tree, &origin, sources)
}

fn csv_io(e: csv::Error) -> std::io::Error {
    std::io::Error::other(e)
}

/// Writes a dataset back out in the four-file layout, each file atomically.
pub fn save_dataset(ds: &Dataset, paths: &DatasetPaths) -> std::io::Result<()> {
    use crate::fsio::atomic_write;

    atomic_write(&paths.event_tree, |w| {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(TREE_COLUMNS).map_err(csv_io)?;
        for r in ds.tree().rows() {
            out.write_record([
                &r.code,
                r.parent.as_deref().unwrap_or(""),
                &r.depth.to_string(),
                &r.description,
            ])
            .map_err(csv_io)?;
        }
        out.flush()
    })?;
    atomic_write(&paths.patients, |w| {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(PATIENT_COLUMNS).map_err(csv_io)?;
        for p in ds.patients() {
            out.write_record([
                p.patient_id.as_str(),
                &p.year_of_birth.to_string(),
                p.gender.as_str(),
                &format_day(p.reg_start),
                &format_day(p.reg_end),
            ])
            .map_err(csv_io)?;
        }
        out.flush()
    })?;
    atomic_write(&paths.events, |w| {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(EVENT_COLUMNS).map_err(csv_io)?;
        for (i, p) in ds.patients().iter().enumerate() {
            for e in ds.events_of(i) {
                out.write_record([
                    p.patient_id.as_str(),
                    &format_day(e.day),
                    ds.tree().code(e.code),
                ])
                .map_err(csv_io)?;
            }
        }
        out.flush()
    })?;
    atomic_write(&paths.prescriptions, |w| {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(PRESCRIPTION_COLUMNS).map_err(csv_io)?;
        for (i, p) in ds.patients().iter().enumerate() {
            for r in ds.prescriptions_of(i) {
                out.write_record([
                    p.patient_id.as_str(),
                    &format_day(r.day),
                    &r.drug_id,
                    &r.bnf.to_string(),
                ])
                .map_err(csv_io)?;
            }
        }
        out.flush()
    })
}
