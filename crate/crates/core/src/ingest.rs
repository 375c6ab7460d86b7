//! CSV ingestion, cohort selection and descriptive summaries.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use chrono::Datelike;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::quantile_sorted;
use crate::schema::{validate_record, CaseRecord, FieldError, CSV_HEADER};

/// Upper bound on a plausible room occupancy for an elective case.
pub const MAX_PLAUSIBLE_MINUTES: f64 = 1440.0;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("input is empty")]
    Empty,
    #[error("header is missing column {0:?}")]
    MissingColumn(String),
    #[error("header repeats column {0:?}")]
    DuplicateColumn(String),
    #[error("header has unknown column {0:?}")]
    UnknownColumn(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot describe an empty cohort")]
    EmptyCohort,
}

/// A data row that failed validation. `line` is the 1-based line in the file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowError {
    pub line: u64,
    pub case_id: Option<String>,
    pub errors: Vec<FieldError>,
}

/// Parses a case CSV. Row-level problems are collected and returned next to
/// the valid records; header problems are fatal.
pub fn parse_csv<R: Read>(input: R) -> Result<(Vec<CaseRecord>, Vec<RowError>), IngestError> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(IngestError::Empty);
    }
    let mut seen = BTreeSet::new();
    for h in &header {
        if !seen.insert(h.as_str()) {
            return Err(IngestError::DuplicateColumn(h.clone()));
        }
    }
    for required in CSV_HEADER {
        if !seen.contains(required) {
            return Err(IngestError::MissingColumn(required.to_string()));
        }
    }
    if let Some(extra) = header.iter().find(|h| !CSV_HEADER.contains(&h.as_str())) {
        return Err(IngestError::UnknownColumn(extra.clone()));
    }

    let mut records = Vec::new();
    let mut row_errors = Vec::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        if row.len() != header.len() {
            row_errors.push(RowError {
                line,
                case_id: row.get(0).map(str::to_string),
                errors: vec![FieldError::new("row", format!("expected {} cells, found {}", header.len(), row.len()))],
            });
            continue;
        }
        let raw: BTreeMap<String, String> = header.iter().cloned().zip(row.iter().map(str::to_string)).collect();
        match validate_record(&raw) {
            Ok(rec) => records.push(rec),
            Err(errors) => row_errors.push(RowError {
                line,
                case_id: raw.get("case_id").filter(|s| !s.is_empty()).cloned(),
                errors,
            }),
        }
    }
    Ok((records, row_errors))
}

/// Writes records with the canonical header.
pub fn write_csv<W: Write>(records: &[CaseRecord], out: W) -> Result<(), IngestError> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(CSV_HEADER)?;
    for r in records {
        writer.write_record(r.to_csv_row())?;
    }
    writer.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageCount {
    pub stage: String,
    pub remaining: usize,
    /// Case ids removed at this stage.
    pub excluded: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExclusionReport {
    pub stages: Vec<StageCount>,
}

impl ExclusionReport {
    pub fn counts(&self) -> Vec<(&str, usize)> {
        self.stages.iter().map(|s| (s.stage.as_str(), s.remaining)).collect()
    }
}

type Criterion = fn(&CaseRecord) -> bool;

const STAGES: [(&str, Criterion); 4] = [
    ("non_emergency", |r| !r.emergency),
    ("weekday", |r| r.surgery_date.weekday().number_from_monday() <= 5),
    // absent ASA is kept: only recorded class 5 falls outside the cohort
    ("asa_1_to_4", |r| r.asa.is_none_or(|a| a <= 4)),
    ("plausible_outcome", |r| {
        r.actual_duration_min.is_some_and(|m| m > 0.0 && m <= MAX_PLAUSIBLE_MINUTES)
    }),
];

/// Whether a record satisfies every inclusion criterion.
pub fn eligible(record: &CaseRecord) -> bool {
    STAGES.iter().all(|(_, keep)| keep(record))
}

/// Applies the exclusion cascade in its fixed order.
pub fn select_cohort(records: Vec<CaseRecord>) -> (Vec<CaseRecord>, ExclusionReport) {
    let mut stages = vec![StageCount { stage: "raw".into(), remaining: records.len(), excluded: Vec::new() }];
    let mut current = records;
    for (name, keep) in STAGES {
        let (kept, dropped): (Vec<_>, Vec<_>) = current.into_iter().partition(|r| keep(r));
        stages.push(StageCount {
            stage: name.into(),
            remaining: kept.len(),
            excluded: dropped.into_iter().map(|r| r.case_id).collect(),
        });
        current = kept;
    }
    (current, ExclusionReport { stages })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Development,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescriptiveRow {
    pub label: String,
    /// One cell per column of the table.
    pub values: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescriptiveTable {
    pub columns: Vec<String>,
    pub rows: Vec<DescriptiveRow>,
}

/// `12345` → `"12,345"`.
pub fn group_thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn pct_cell(count: usize, denom: usize) -> String {
    if denom == 0 {
        return String::new();
    }
    format!("{:.1}% ({}.0)", 100.0 * count as f64 / denom as f64, group_thousands(count))
}

fn missing_cell(missing: usize, n: usize) -> String {
    let pct = 100.0 * missing as f64 / n as f64;
    if pct >= 10.0 {
        format!("{pct:.0}%")
    } else {
        format!("{pct:.2}%")
    }
}

fn median_iqr_cell(values: &mut [f64]) -> String {
    if values.is_empty() {
        return String::new();
    }
    values.sort_by(f64::total_cmp);
    format!(
        "{:.2} ({:.2}, {:.2})",
        quantile_sorted(values, 0.5),
        quantile_sorted(values, 0.25),
        quantile_sorted(values, 0.75)
    )
}

const WEEKDAY_NAMES: [&str; 5] = ["Monday", "Tuesday", "Wednesday", "Thursday", "Friday"];

type Getter = fn(&CaseRecord) -> Option<f64>;

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

enum Field {
    /// Rows per level; value is matched against `levels`.
    Levels { title: &'static str, get: Getter, levels: Vec<(f64, String)> },
    /// Single "yes" row.
    Flag { label: &'static str, get: Getter },
    Continuous { label: &'static str, get: Getter },
    /// Missing-percentage row shared by the fields above it.
    Missing { get: Getter },
}

fn table_fields(cohort: &[CaseRecord]) -> Vec<Field> {
    let years: BTreeSet<i32> = cohort.iter().map(|r| r.surgery_date.year()).collect();
    let pos = |k: usize| -> Getter {
        match k {
            0 => |r| r.positions.map(|p| flag(p[0])),
            1 => |r| r.positions.map(|p| flag(p[1])),
            2 => |r| r.positions.map(|p| flag(p[2])),
            3 => |r| r.positions.map(|p| flag(p[3])),
            4 => |r| r.positions.map(|p| flag(p[4])),
            _ => |r| r.positions.map(|p| flag(p[5])),
        }
    };
    let pos_labels = [
        "Supine Position",
        "Prone Position",
        "Sitting Position",
        "Lithotomy Position",
        "Lateral Position",
        "Other Position",
    ];
    let mut fields = vec![
        Field::Levels {
            title: "Year of Surgery",
            get: |r| Some(r.surgery_date.year() as f64),
            levels: years.iter().map(|&y| (y as f64, y.to_string())).collect(),
        },
        Field::Levels {
            title: "Month of Surgery",
            get: |r| Some(r.surgery_date.month() as f64),
            levels: (1..=12).map(|m| (m as f64, m.to_string())).collect(),
        },
        Field::Levels {
            title: "Weekday of Surgery",
            get: |r| Some(r.surgery_date.weekday().number_from_monday() as f64),
            levels: WEEKDAY_NAMES.iter().enumerate().map(|(i, n)| ((i + 1) as f64, n.to_string())).collect(),
        },
        Field::Flag { label: "Admission", get: |r| r.admission.map(flag) },
        Field::Missing { get: |r| r.admission.map(flag) },
        Field::Flag { label: "General anaesthesia", get: |r| r.general_anaesthesia.map(flag) },
        Field::Missing { get: |r| r.general_anaesthesia.map(flag) },
    ];
    for (k, label) in pos_labels.into_iter().enumerate() {
        fields.push(Field::Flag { label, get: pos(k) });
    }
    fields.extend([
        Field::Missing { get: pos(0) },
        Field::Continuous { label: "Scheduled Surgery Duration (min)", get: |r| r.scheduled_duration_min },
        Field::Missing { get: |r| r.scheduled_duration_min },
        Field::Continuous { label: "Actual Surgery Duration (minutes)", get: |r| r.actual_duration_min },
        Field::Missing { get: |r| r.actual_duration_min },
        Field::Flag { label: "Sex: Female", get: |r| Some(flag(r.sex == crate::schema::Sex::Female)) },
        Field::Continuous { label: "Age (years)", get: |r| r.age_years },
        Field::Missing { get: |r| r.age_years },
        Field::Continuous { label: "Body Mass Index", get: |r| r.bmi },
        Field::Missing { get: |r| r.bmi },
        Field::Flag { label: "History of Allergy", get: |r| Some(flag(r.allergy)) },
        Field::Flag { label: "Presence of Infection", get: |r| Some(flag(r.infection)) },
        Field::Flag { label: "Comorbidity", get: |r| Some(flag(r.comorbidity)) },
        Field::Levels {
            title: "ASA Physical Status Classification",
            get: |r| r.asa.map(f64::from),
            levels: (1..=4).map(|a| (a as f64, a.to_string())).collect(),
        },
        Field::Missing { get: |r| r.asa.map(f64::from) },
    ]);
    fields
}

/// Summarizes a cohort overall and per split: `pct% (n)` among non-missing
/// values for categorical fields, `median (Q1, Q3)` for continuous fields,
/// and a `Missing %` row wherever a field has missing values overall.
pub fn describe_cohort(cohort: &[CaseRecord], split_labels: &BTreeMap<String, Split>) -> Result<DescriptiveTable, IngestError> {
    if cohort.is_empty() {
        return Err(IngestError::EmptyCohort);
    }
    let mut groups: Vec<(String, Vec<&CaseRecord>)> = vec![("Overall".into(), cohort.iter().collect())];
    let splits: BTreeSet<Split> = split_labels.values().copied().collect();
    for split in splits {
        let name = match split {
            Split::Development => "Development",
            Split::Test => "Test",
        };
        let members = cohort.iter().filter(|r| split_labels.get(&r.case_id) == Some(&split)).collect();
        groups.push((name.into(), members));
    }
    let columns = groups
        .iter()
        .map(|(name, rows)| format!("{name} N = {}", group_thousands(rows.len())))
        .collect();

    let mut rows = Vec::new();
    for field in table_fields(cohort) {
        match field {
            Field::Levels { title, get, levels } => {
                rows.push(DescriptiveRow { label: title.into(), values: vec![String::new(); groups.len()] });
                for (value, label) in levels {
                    let values = groups
                        .iter()
                        .map(|(_, g)| {
                            let observed: Vec<f64> = g.iter().filter_map(|r| get(r)).collect();
                            pct_cell(observed.iter().filter(|&&v| v == value).count(), observed.len())
                        })
                        .collect();
                    rows.push(DescriptiveRow { label, values });
                }
            }
            Field::Flag { label, get } => {
                let values = groups
                    .iter()
                    .map(|(_, g)| {
                        let observed: Vec<f64> = g.iter().filter_map(|r| get(r)).collect();
                        pct_cell(observed.iter().filter(|&&v| v == 1.0).count(), observed.len())
                    })
                    .collect();
                rows.push(DescriptiveRow { label: label.into(), values });
            }
            Field::Continuous { label, get } => {
                let values = groups
                    .iter()
                    .map(|(_, g)| {
                        let mut observed: Vec<f64> = g.iter().filter_map(|r| get(r)).collect();
                        median_iqr_cell(&mut observed)
                    })
                    .collect();
                rows.push(DescriptiveRow { label: label.into(), values });
            }
            Field::Missing { get } => {
                if cohort.iter().all(|r| get(r).is_some()) {
                    continue;
                }
                let values = groups
                    .iter()
                    .map(|(_, g)| {
                        if g.is_empty() {
                            String::new()
                        } else {
                            missing_cell(g.iter().filter(|r| get(r).is_none()).count(), g.len())
                        }
                    })
                    .collect();
                rows.push(DescriptiveRow { label: "Missing %".into(), values });
            }
        }
    }
    Ok(DescriptiveTable { columns, rows })
}

impl DescriptiveTable {
    pub fn to_csv(&self) -> Result<String, IngestError> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["Characteristic".to_string()];
        header.extend(self.columns.iter().cloned());
        writer.write_record(&header)?;
        for row in &self.rows {
            let mut cells = vec![row.label.clone()];
            cells.extend(row.values.iter().cloned());
            writer.write_record(&cells)?;
        }
        let bytes = writer.into_inner().map_err(|e| IngestError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Cells of the first row labelled `label` after the row titled `after`
    /// (or anywhere when `after` is `None`).
    pub fn find(&self, after: Option<&str>, label: &str) -> Option<&DescriptiveRow> {
        let start = match after {
            Some(t) => self.rows.iter().position(|r| r.label == t)? + 1,
            None => 0,
        };
        self.rows[start..].iter().find(|r| r.label == label)
    }
}
