//! Case data model, predictor encoding and cluster keys.
//!
//! Raw cases ([`CaseRecord`]) are validated field by field, then expanded
//! into a numeric design matrix ([`EncodedDataset`]) by an [`EncodingMeta`]
//! that fixes column order and reference levels. The same meta is stored in
//! the locked model so held-out and served cases encode identically.

use std::collections::BTreeMap;
use std::fmt;

use chrono::{Datelike, NaiveDate};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

/// Canonical CSV header, in file order.
pub const CSV_HEADER: [&str; 21] = [
    "case_id",
    "site",
    "surgery_date",
    "emergency",
    "admission",
    "scheduled_duration_min",
    "general_anaesthesia",
    "pos_supine",
    "pos_prone",
    "pos_sitting",
    "pos_lithotomy",
    "pos_lateral",
    "pos_other",
    "sex",
    "age_years",
    "bmi",
    "allergy",
    "infection",
    "comorbidity",
    "asa",
    "actual_duration_min",
];

pub const POSITION_FIELDS: [&str; 6] = [
    "pos_supine",
    "pos_prone",
    "pos_sitting",
    "pos_lithotomy",
    "pos_lateral",
    "pos_other",
];

/// Fields a caller may supply when asking for a prediction.
pub const PREDICTOR_FIELDS: [&str; 17] = [
    "surgery_date",
    "admission",
    "scheduled_duration_min",
    "general_anaesthesia",
    "pos_supine",
    "pos_prone",
    "pos_sitting",
    "pos_lithotomy",
    "pos_lateral",
    "pos_other",
    "sex",
    "age_years",
    "bmi",
    "allergy",
    "infection",
    "comorbidity",
    "asa",
];

const WEEKDAY_LABELS: [&str; 5] = ["mon", "tue", "wed", "thu", "fri"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Female,
    Male,
}

impl Sex {
    pub fn parse(code: &str) -> Option<Sex> {
        match code.trim().to_ascii_lowercase().as_str() {
            "female" | "f" => Some(Sex::Female),
            "male" | "m" => Some(Sex::Male),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Sex::Female => "female",
            Sex::Male => "male",
        }
    }
}

/// One surgical case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub site_id: String,
    pub surgery_date: NaiveDate,
    pub emergency: bool,
    pub admission: Option<bool>,
    pub scheduled_duration_min: Option<f64>,
    pub general_anaesthesia: Option<bool>,
    /// supine, prone, sitting, lithotomy, lateral, other; absent as a block.
    pub positions: Option<[bool; 6]>,
    pub sex: Sex,
    pub age_years: Option<f64>,
    pub bmi: Option<f64>,
    pub allergy: bool,
    pub infection: bool,
    pub comorbidity: bool,
    pub asa: Option<u8>,
    pub actual_duration_min: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClusterKey {
    pub site: String,
    pub year: i32,
}

impl ClusterKey {
    pub fn new(site: impl Into<String>, year: i32) -> Self {
        ClusterKey { site: site.into(), year }
    }
}

impl fmt::Display for ClusterKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at {}", self.site, self.year)
    }
}

pub fn cluster_of(record: &CaseRecord) -> ClusterKey {
    ClusterKey::new(record.site_id.clone(), record.surgery_date.year())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Error)]
#[error("{field}: {reason}")]
pub struct FieldError {
    pub field: String,
    pub reason: String,
}

impl FieldError {
    pub fn new(field: impl Into<String>, reason: impl Into<String>) -> Self {
        FieldError { field: field.into(), reason: reason.into() }
    }
}

fn parse_date(field: &str, raw: &str) -> Result<Option<NaiveDate>, FieldError> {
    let raw = raw.trim();
    if raw.is_empty() {
        return Ok(None);
    }
    NaiveDate::parse_from_str(raw, "%Y-%m-%d")
        .map(Some)
        .map_err(|_| FieldError::new(field, format!("invalid date {raw:?}, expected YYYY-MM-DD")))
}

fn parse_flag(field: &str, raw: &str) -> Result<Option<bool>, FieldError> {
    match raw.trim() {
        "" => Ok(None),
        "0" => Ok(Some(false)),
        "1" => Ok(Some(true)),
        other => Err(FieldError::new(field, format!("expected 0 or 1, got {other:?}"))),
    }
}

fn parse_number(field: &str, raw: &str) -> Result<Option<f64>, FieldError> {
    let raw = raw.trim();
    if raw.is_empty() {
        return Ok(None);
    }
    match raw.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(FieldError::new(field, format!("not a finite number: {raw:?}"))),
    }
}

fn parse_positive(field: &str, raw: &str) -> Result<Option<f64>, FieldError> {
    match parse_number(field, raw)? {
        Some(v) if v <= 0.0 => Err(FieldError::new(field, format!("non-positive value {v}"))),
        other => Ok(other),
    }
}

fn parse_non_negative(field: &str, raw: &str) -> Result<Option<f64>, FieldError> {
    match parse_number(field, raw)? {
        Some(v) if v < 0.0 => Err(FieldError::new(field, format!("negative value {v}"))),
        other => Ok(other),
    }
}

fn parse_asa(field: &str, raw: &str, max: u8) -> Result<Option<u8>, FieldError> {
    let raw = raw.trim();
    if raw.is_empty() {
        return Ok(None);
    }
    let v: i64 = raw
        .parse()
        .map_err(|_| FieldError::new(field, format!("not an integer: {raw:?}")))?;
    if !(1..=max as i64).contains(&v) {
        return Err(FieldError::new(field, format!("out of range 1..{max}: {v}")));
    }
    Ok(Some(v as u8))
}

fn parse_sex(field: &str, raw: &str) -> Result<Option<Sex>, FieldError> {
    let raw = raw.trim();
    if raw.is_empty() {
        return Ok(None);
    }
    Sex::parse(raw)
        .map(Some)
        .ok_or_else(|| FieldError::new(field, format!("unknown sex code {raw:?}")))
}

fn required<T>(field: &str, parsed: Result<Option<T>, FieldError>, errors: &mut Vec<FieldError>) -> Option<T> {
    match parsed {
        Ok(Some(v)) => Some(v),
        Ok(None) => {
            errors.push(FieldError::new(field, "required value is missing"));
            None
        }
        Err(e) => {
            errors.push(e);
            None
        }
    }
}

/// Validates one parsed row keyed by canonical column names. Empty cells
/// become absent optionals; out-of-range values are reported, never coerced.
pub fn validate_record(raw: &BTreeMap<String, String>) -> Result<CaseRecord, Vec<FieldError>> {
    let get = |k: &str| raw.get(k).map(String::as_str).unwrap_or("");
    let mut errors = Vec::new();
    macro_rules! take {
        ($e:expr) => {
            match $e {
                Ok(v) => v,
                Err(e) => {
                    errors.push(e);
                    None
                }
            }
        };
    }

    let case_id = get("case_id").trim().to_string();
    if case_id.is_empty() {
        errors.push(FieldError::new("case_id", "required value is missing"));
    }
    let site_id = get("site").trim().to_string();
    if site_id.is_empty() {
        errors.push(FieldError::new("site", "required value is missing"));
    }
    let date = required("surgery_date", parse_date("surgery_date", get("surgery_date")), &mut errors);
    let emergency = required("emergency", parse_flag("emergency", get("emergency")), &mut errors);
    let admission = take!(parse_flag("admission", get("admission")));
    let scheduled = take!(parse_positive("scheduled_duration_min", get("scheduled_duration_min")));
    let ga = take!(parse_flag("general_anaesthesia", get("general_anaesthesia")));

    let mut flags = [None; 6];
    let mut flag_error = false;
    for (slot, name) in flags.iter_mut().zip(POSITION_FIELDS) {
        match parse_flag(name, get(name)) {
            Ok(v) => *slot = v,
            Err(e) => {
                flag_error = true;
                errors.push(e);
            }
        }
    }
    let positions = if flag_error {
        None
    } else if flags.iter().all(Option::is_none) {
        None
    } else if flags.iter().any(Option::is_none) {
        errors.push(FieldError::new("positions", "position block partially missing"));
        None
    } else {
        let block = flags.map(|f| f.unwrap_or(false));
        if !block.iter().any(|&b| b) {
            errors.push(FieldError::new("positions", "position block present but no position flagged"));
        }
        Some(block)
    };

    let sex = required("sex", parse_sex("sex", get("sex")), &mut errors);
    let age = take!(parse_non_negative("age_years", get("age_years")));
    let bmi = take!(parse_positive("bmi", get("bmi")));
    let allergy = required("allergy", parse_flag("allergy", get("allergy")), &mut errors);
    let infection = required("infection", parse_flag("infection", get("infection")), &mut errors);
    let comorbidity = required("comorbidity", parse_flag("comorbidity", get("comorbidity")), &mut errors);
    let asa = take!(parse_asa("asa", get("asa"), 5));
    let outcome = match parse_number("actual_duration_min", get("actual_duration_min")) {
        Ok(Some(v)) if v <= 0.0 => {
            errors.push(FieldError::new("actual_duration_min", format!("non-positive outcome {v}")));
            None
        }
        Ok(v) => v,
        Err(e) => {
            errors.push(e);
            None
        }
    };

    if !errors.is_empty() {
        return Err(errors);
    }
    Ok(CaseRecord {
        case_id,
        site_id,
        surgery_date: date.expect("checked"),
        emergency: emergency.expect("checked"),
        admission,
        scheduled_duration_min: scheduled,
        general_anaesthesia: ga,
        positions,
        sex: sex.expect("checked"),
        age_years: age,
        bmi,
        allergy: allergy.expect("checked"),
        infection: infection.expect("checked"),
        comorbidity: comorbidity.expect("checked"),
        asa,
        actual_duration_min: outcome,
    })
}

fn flag_str(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

fn opt_flag(b: Option<bool>) -> String {
    b.map(|v| flag_str(v).to_string()).unwrap_or_default()
}

fn opt_num(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl CaseRecord {
    /// Cells in [`CSV_HEADER`] order.
    pub fn to_csv_row(&self) -> Vec<String> {
        let mut row = vec![
            self.case_id.clone(),
            self.site_id.clone(),
            self.surgery_date.format("%Y-%m-%d").to_string(),
            flag_str(self.emergency).to_string(),
            opt_flag(self.admission),
            opt_num(self.scheduled_duration_min),
            opt_flag(self.general_anaesthesia),
        ];
        for k in 0..6 {
            row.push(opt_flag(self.positions.map(|p| p[k])));
        }
        row.extend([
            self.sex.as_str().to_string(),
            opt_num(self.age_years),
            opt_num(self.bmi),
            flag_str(self.allergy).to_string(),
            flag_str(self.infection).to_string(),
            flag_str(self.comorbidity).to_string(),
            self.asa.map(|a| a.to_string()).unwrap_or_default(),
            opt_num(self.actual_duration_min),
        ]);
        row
    }

    pub fn to_raw(&self) -> BTreeMap<String, String> {
        CSV_HEADER
            .iter()
            .map(|h| h.to_string())
            .zip(self.to_csv_row())
            .collect()
    }

    pub fn predictors(&self) -> Predictors {
        let mut positions = [None; 6];
        if let Some(block) = self.positions {
            for (slot, v) in positions.iter_mut().zip(block) {
                *slot = Some(v);
            }
        }
        Predictors {
            surgery_date: Some(self.surgery_date),
            admission: self.admission,
            scheduled_duration_min: self.scheduled_duration_min,
            general_anaesthesia: self.general_anaesthesia,
            positions,
            sex: Some(self.sex),
            age_years: self.age_years,
            bmi: self.bmi,
            allergy: Some(self.allergy),
            infection: Some(self.infection),
            comorbidity: Some(self.comorbidity),
            asa: self.asa,
        }
    }
}

/// A possibly incomplete set of predictor values, as supplied at
/// prediction time. Any subset of [`PREDICTOR_FIELDS`] may be present.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Predictors {
    pub surgery_date: Option<NaiveDate>,
    pub admission: Option<bool>,
    pub scheduled_duration_min: Option<f64>,
    pub general_anaesthesia: Option<bool>,
    pub positions: [Option<bool>; 6],
    pub sex: Option<Sex>,
    pub age_years: Option<f64>,
    pub bmi: Option<f64>,
    pub allergy: Option<bool>,
    pub infection: Option<bool>,
    pub comorbidity: Option<bool>,
    pub asa: Option<u8>,
}

impl Predictors {
    /// Sets one field from its textual form. An empty string clears it.
    /// ASA is restricted to the cohort domain 1..4.
    pub fn set_field(&mut self, name: &str, raw: &str) -> Result<(), FieldError> {
        match name {
            "surgery_date" => {
                let d = parse_date(name, raw)?;
                if let Some(date) = d {
                    if date.weekday().number_from_monday() > 5 {
                        return Err(FieldError::new(name, "weekend procedures are outside the model domain"));
                    }
                }
                self.surgery_date = d;
            }
            "admission" => self.admission = parse_flag(name, raw)?,
            "scheduled_duration_min" => self.scheduled_duration_min = parse_positive(name, raw)?,
            "general_anaesthesia" => self.general_anaesthesia = parse_flag(name, raw)?,
            "sex" => self.sex = parse_sex(name, raw)?,
            "age_years" => self.age_years = parse_non_negative(name, raw)?,
            "bmi" => self.bmi = parse_positive(name, raw)?,
            "allergy" => self.allergy = parse_flag(name, raw)?,
            "infection" => self.infection = parse_flag(name, raw)?,
            "comorbidity" => self.comorbidity = parse_flag(name, raw)?,
            "asa" => self.asa = parse_asa(name, raw, 4)?,
            other => match POSITION_FIELDS.iter().position(|p| *p == other) {
                Some(k) => self.positions[k] = parse_flag(name, raw)?,
                None => return Err(FieldError::new(other, "unknown field")),
            },
        }
        Ok(())
    }

    pub fn is_present(&self, name: &str) -> bool {
        match name {
            "surgery_date" => self.surgery_date.is_some(),
            "admission" => self.admission.is_some(),
            "scheduled_duration_min" => self.scheduled_duration_min.is_some(),
            "general_anaesthesia" => self.general_anaesthesia.is_some(),
            "sex" => self.sex.is_some(),
            "age_years" => self.age_years.is_some(),
            "bmi" => self.bmi.is_some(),
            "allergy" => self.allergy.is_some(),
            "infection" => self.infection.is_some(),
            "comorbidity" => self.comorbidity.is_some(),
            "asa" => self.asa.is_some(),
            other => POSITION_FIELDS
                .iter()
                .position(|p| *p == other)
                .map(|k| self.positions[k].is_some())
                .unwrap_or(false),
        }
    }

    /// Canonical names of the predictor fields that are absent.
    pub fn absent_fields(&self) -> Vec<&'static str> {
        PREDICTOR_FIELDS.iter().copied().filter(|f| !self.is_present(f)).collect()
    }

    fn bool_value(b: Option<bool>) -> Option<f64> {
        b.map(|v| if v { 1.0 } else { 0.0 })
    }

    /// Value of a standard encoding variable (see [`EncodingMeta::standard`]).
    pub fn variable_value(&self, variable: &str) -> Option<f64> {
        match variable {
            "year" => self.surgery_date.map(|d| d.year() as f64),
            "month" => self.surgery_date.map(|d| d.month() as f64),
            "weekday" => self.surgery_date.map(|d| d.weekday().number_from_monday() as f64),
            "admission" => Self::bool_value(self.admission),
            "scheduled_duration_min" => self.scheduled_duration_min,
            "general_anaesthesia" => Self::bool_value(self.general_anaesthesia),
            "sex" => self.sex.map(|s| if s == Sex::Male { 1.0 } else { 0.0 }),
            "age_years" => self.age_years,
            "bmi" => self.bmi,
            "allergy" => Self::bool_value(self.allergy),
            "infection" => Self::bool_value(self.infection),
            "comorbidity" => Self::bool_value(self.comorbidity),
            "asa" => self.asa.map(f64::from),
            other => POSITION_FIELDS
                .iter()
                .position(|p| *p == other)
                .and_then(|k| Self::bool_value(self.positions[k])),
        }
    }
}

/// What to do with a categorical level that the encoding has never seen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnseenLevel {
    /// Encode as the all-zero reference pattern.
    Reference,
    Reject,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum VariableKind {
    Continuous,
    Binary,
    /// `levels[0]` is the reference level and gets no column.
    Categorical { levels: Vec<i32>, unseen: UnseenLevel },
}

/// One imputation/encoding unit: a source quantity and its block of
/// design-matrix columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    /// Request field the variable is derived from.
    pub source: String,
    pub kind: VariableKind,
    pub first_column: usize,
    pub n_columns: usize,
}

impl Variable {
    pub fn columns(&self) -> std::ops::Range<usize> {
        self.first_column..self.first_column + self.n_columns
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureDescriptor {
    pub name: String,
    pub source: String,
    pub variable: usize,
    pub level: Option<i32>,
    pub reference: Option<i32>,
}

/// Input to [`EncodingMeta::from_definitions`].
#[derive(Clone, Debug)]
pub struct VariableDef {
    pub name: String,
    pub source: String,
    pub kind: VariableKind,
    /// One name per column.
    pub feature_names: Vec<String>,
}

impl VariableDef {
    pub fn single(name: &str, source: &str, kind: VariableKind, feature: &str) -> Self {
        VariableDef {
            name: name.into(),
            source: source.into(),
            kind,
            feature_names: vec![feature.into()],
        }
    }

    pub fn categorical(name: &str, source: &str, levels: Vec<i32>, unseen: UnseenLevel, labels: impl Fn(i32) -> String) -> Self {
        let feature_names = levels.iter().skip(1).map(|&l| format!("{name}_{}", labels(l))).collect();
        VariableDef {
            name: name.into(),
            source: source.into(),
            kind: VariableKind::Categorical { levels, unseen },
            feature_names,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SchemaError {
    #[error("case {case_id}: outcome actual_duration_min is missing")]
    MissingOutcome { case_id: String },
    #[error("encoding meta does not match the cohort schema: {0}")]
    MetaMismatch(String),
    #[error("case {case_id}: {field} level {value} is not an encoded level")]
    UnknownLevel { case_id: String, field: String, value: i64 },
}

/// Ordered feature descriptors plus the variable blocks they belong to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodingMeta {
    pub schema_version: u32,
    pub variables: Vec<Variable>,
    pub features: Vec<FeatureDescriptor>,
}

pub const STANDARD_VARIABLES: [&str; 19] = [
    "year",
    "month",
    "weekday",
    "admission",
    "scheduled_duration_min",
    "general_anaesthesia",
    "pos_supine",
    "pos_prone",
    "pos_sitting",
    "pos_lithotomy",
    "pos_lateral",
    "pos_other",
    "sex",
    "age_years",
    "bmi",
    "allergy",
    "infection",
    "comorbidity",
    "asa",
];

impl EncodingMeta {
    pub fn from_definitions(defs: Vec<VariableDef>) -> Self {
        let mut variables = Vec::with_capacity(defs.len());
        let mut features = Vec::new();
        for (vi, def) in defs.into_iter().enumerate() {
            let first_column = features.len();
            let (levels, reference) = match &def.kind {
                VariableKind::Categorical { levels, .. } => (levels.iter().skip(1).copied().map(Some).collect::<Vec<_>>(), levels.first().copied()),
                _ => (vec![None], None),
            };
            assert_eq!(levels.len(), def.feature_names.len(), "feature names must match columns");
            for (name, level) in def.feature_names.iter().zip(levels) {
                features.push(FeatureDescriptor {
                    name: name.clone(),
                    source: def.source.clone(),
                    variable: vi,
                    level,
                    reference,
                });
            }
            variables.push(Variable {
                name: def.name,
                source: def.source,
                kind: def.kind,
                first_column,
                n_columns: features.len() - first_column,
            });
        }
        EncodingMeta { schema_version: SCHEMA_VERSION, variables, features }
    }

    /// The case-duration encoding: year indicators over `years` (first year
    /// is the reference, unseen years map to it), months 2..12 vs January,
    /// Tuesday..Friday vs Monday, ASA 2..4 vs 1, every other field a single
    /// column.
    pub fn standard(years: &[i32]) -> Self {
        let mut years = years.to_vec();
        years.sort_unstable();
        years.dedup();
        let bin = |n: &str, src: &str| VariableDef::single(n, src, VariableKind::Binary, n);
        let cont = |n: &str| VariableDef::single(n, n, VariableKind::Continuous, n);
        let mut defs = vec![
            VariableDef::categorical("year", "surgery_date", years, UnseenLevel::Reference, |l| l.to_string()),
            VariableDef::categorical("month", "surgery_date", (1..=12).collect(), UnseenLevel::Reject, |l| l.to_string()),
            VariableDef::categorical("weekday", "surgery_date", (1..=5).collect(), UnseenLevel::Reject, |l| {
                WEEKDAY_LABELS[(l - 1) as usize].to_string()
            }),
            bin("admission", "admission"),
            cont("scheduled_duration_min"),
            bin("general_anaesthesia", "general_anaesthesia"),
        ];
        for p in POSITION_FIELDS {
            defs.push(bin(p, p));
        }
        defs.push(VariableDef::single("sex", "sex", VariableKind::Binary, "sex_male"));
        defs.push(cont("age_years"));
        defs.push(cont("bmi"));
        defs.push(bin("allergy", "allergy"));
        defs.push(bin("infection", "infection"));
        defs.push(bin("comorbidity", "comorbidity"));
        defs.push(VariableDef::categorical("asa", "asa", (1..=4).collect(), UnseenLevel::Reject, |l| l.to_string()));
        EncodingMeta::from_definitions(defs)
    }

    pub fn n_features(&self) -> usize {
        self.features.len()
    }

    pub fn feature_names(&self) -> Vec<&str> {
        self.features.iter().map(|f| f.name.as_str()).collect()
    }

    pub fn variable_index(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v.name == name)
    }

    pub fn is_standard(&self) -> bool {
        self.variables.len() == STANDARD_VARIABLES.len()
            && self.variables.iter().zip(STANDARD_VARIABLES).all(|(v, s)| v.name == s)
    }

    /// Short digest of the column layout; learners refuse data whose
    /// fingerprint differs from their training data.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.schema_version.to_le_bytes());
        for v in &self.variables {
            h.update(serde_json::to_vec(v).expect("variable serializes"));
        }
        for f in &self.features {
            h.update(f.name.as_bytes());
            h.update([0u8]);
        }
        hex::encode(&h.finalize()[..8])
    }

    /// Encodes per-variable values (`None` = missing) into one row of
    /// design-matrix cells plus the missing mask.
    pub fn encode_values(&self, values: &[Option<f64>]) -> Result<(Vec<f64>, Vec<bool>), (usize, f64)> {
        let mut row = vec![f64::NAN; self.n_features()];
        let mut missing = vec![true; self.n_features()];
        for (vi, (var, value)) in self.variables.iter().zip(values).enumerate() {
            let Some(v) = *value else { continue };
            let cols = var.columns();
            match &var.kind {
                VariableKind::Continuous | VariableKind::Binary => {
                    row[cols.start] = v;
                }
                VariableKind::Categorical { levels, unseen } => {
                    let level = v.round() as i32;
                    let pos = levels.iter().position(|&l| l == level);
                    if pos.is_none() && *unseen == UnseenLevel::Reject {
                        return Err((vi, v));
                    }
                    for (k, c) in cols.clone().enumerate() {
                        row[c] = if pos == Some(k + 1) { 1.0 } else { 0.0 };
                    }
                }
            }
            for c in cols {
                missing[c] = false;
            }
        }
        Ok((row, missing))
    }

    /// Reads per-variable values back from a complete row.
    pub fn decode_row(&self, row: &[f64]) -> Vec<f64> {
        self.variables
            .iter()
            .map(|var| match &var.kind {
                VariableKind::Continuous | VariableKind::Binary => row[var.first_column],
                VariableKind::Categorical { levels, .. } => {
                    let hot = var.columns().position(|c| row[c] == 1.0);
                    levels[hot.map(|k| k + 1).unwrap_or(0)] as f64
                }
            })
            .collect()
    }

    pub fn predictor_values(&self, p: &Predictors) -> Vec<Option<f64>> {
        self.variables.iter().map(|v| p.variable_value(&v.name)).collect()
    }
}

/// Numeric design matrix, log-outcome and cluster labels for a cohort.
#[derive(Clone, Debug)]
pub struct EncodedDataset {
    pub case_ids: Vec<String>,
    pub x: DMatrix<f64>,
    /// Natural log of the case duration in minutes.
    pub y: Vec<f64>,
    pub clusters: Vec<ClusterKey>,
    /// True where the source field was absent before imputation.
    pub missing: DMatrix<bool>,
    pub meta: EncodingMeta,
}

impl EncodedDataset {
    /// Assembles a dataset from parts; the missing mask is read off NaN cells.
    pub fn from_parts(meta: EncodingMeta, x: DMatrix<f64>, y: Vec<f64>, clusters: Vec<ClusterKey>) -> Self {
        assert_eq!(x.ncols(), meta.n_features());
        assert_eq!(x.nrows(), y.len());
        assert_eq!(x.nrows(), clusters.len());
        let missing = x.map(f64::is_nan);
        let case_ids = (0..x.nrows()).map(|i| format!("row{i}")).collect();
        EncodedDataset { case_ids, x, y, clusters, missing, meta }
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn fingerprint(&self) -> String {
        self.meta.fingerprint()
    }

    pub fn has_missing_cells(&self) -> bool {
        self.x.iter().any(|v| v.is_nan())
    }

    pub fn is_missing(&self, row: usize, variable: usize) -> bool {
        let var = &self.meta.variables[variable];
        var.n_columns > 0 && self.x[(row, var.first_column)].is_nan()
    }

    pub fn subset(&self, rows: &[usize]) -> EncodedDataset {
        let x = self.x.select_rows(rows.iter());
        let missing = DMatrix::from_fn(rows.len(), self.p(), |i, j| self.missing[(rows[i], j)]);
        EncodedDataset {
            case_ids: rows.iter().map(|&i| self.case_ids[i].clone()).collect(),
            x,
            y: rows.iter().map(|&i| self.y[i]).collect(),
            clusters: rows.iter().map(|&i| self.clusters[i].clone()).collect(),
            missing,
            meta: self.meta.clone(),
        }
    }

    pub fn distinct_clusters(&self) -> Vec<ClusterKey> {
        let mut c = self.clusters.clone();
        c.sort();
        c.dedup();
        c
    }
}

/// Encodes a cohort. Without `meta` a standard encoding is built from the
/// years present in the cohort; with `meta` its columns and reference levels
/// are reused exactly.
pub fn encode(cohort: &[CaseRecord], meta: Option<&EncodingMeta>) -> Result<EncodedDataset, SchemaError> {
    let meta = match meta {
        Some(m) => {
            if !m.is_standard() {
                return Err(SchemaError::MetaMismatch(format!(
                    "expected variables {:?}, got {:?}",
                    STANDARD_VARIABLES,
                    m.variables.iter().map(|v| v.name.as_str()).collect::<Vec<_>>()
                )));
            }
            m.clone()
        }
        None => {
            let years: Vec<i32> = cohort.iter().map(|r| r.surgery_date.year()).collect();
            EncodingMeta::standard(&years)
        }
    };
    let n = cohort.len();
    let p = meta.n_features();
    let mut x = DMatrix::<f64>::zeros(n, p);
    let mut missing = DMatrix::<bool>::from_element(n, p, false);
    let mut y = Vec::with_capacity(n);
    for (i, rec) in cohort.iter().enumerate() {
        let outcome = rec
            .actual_duration_min
            .ok_or_else(|| SchemaError::MissingOutcome { case_id: rec.case_id.clone() })?;
        y.push(outcome.ln());
        let values = meta.predictor_values(&rec.predictors());
        let (row, mask) = meta.encode_values(&values).map_err(|(vi, v)| SchemaError::UnknownLevel {
            case_id: rec.case_id.clone(),
            field: meta.variables[vi].name.clone(),
            value: v as i64,
        })?;
        for j in 0..p {
            x[(i, j)] = row[j];
            missing[(i, j)] = mask[j];
        }
    }
    Ok(EncodedDataset {
        case_ids: cohort.iter().map(|r| r.case_id.clone()).collect(),
        x,
        y,
        clusters: cohort.iter().map(cluster_of).collect(),
        missing,
        meta,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn full_raw() -> BTreeMap<String, String> {
        let vals = [
            "c1", "S1", "2021-03-04", "0", "1", "150", "1", "1", "0", "0", "0", "0", "0", "female", "69", "21.95", "0", "0", "1", "2", "127",
        ];
        CSV_HEADER.iter().map(|h| h.to_string()).zip(vals.iter().map(|v| v.to_string())).collect()
    }

    #[test]
    fn complete_row_validates_with_no_absent_fields() {
        let rec = validate_record(&full_raw()).unwrap();
        assert_eq!(rec.asa, Some(2));
        assert!(rec.admission.is_some() && rec.positions.is_some() && rec.bmi.is_some());
        assert_eq!(rec.actual_duration_min, Some(127.0));
        assert!(rec.predictors().absent_fields().is_empty());
    }

    #[test]
    fn asa_out_of_range_is_rejected() {
        let mut raw = full_raw();
        raw.insert("asa".into(), "7".into());
        let errs = validate_record(&raw).unwrap_err();
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].field, "asa");
        assert!(errs[0].reason.contains("out of range"));
    }

    #[test]
    fn negative_outcome_is_rejected() {
        let mut raw = full_raw();
        raw.insert("actual_duration_min".into(), "-5".into());
        let errs = validate_record(&raw).unwrap_err();
        assert_eq!(errs[0].field, "actual_duration_min");
        assert!(errs[0].reason.contains("non-positive"));
    }

    #[test]
    fn other_field_errors() {
        let mut raw = full_raw();
        raw.insert("surgery_date".into(), "2021-02-30".into());
        raw.insert("sex".into(), "x".into());
        raw.insert("scheduled_duration_min".into(), "-1".into());
        let errs = validate_record(&raw).unwrap_err();
        let fields: Vec<_> = errs.iter().map(|e| e.field.as_str()).collect();
        assert_eq!(fields, vec!["surgery_date", "scheduled_duration_min", "sex"]);
    }

    #[test]
    fn empty_cells_become_absent() {
        let mut raw = full_raw();
        for f in ["admission", "bmi", "asa", "general_anaesthesia", "actual_duration_min"] {
            raw.insert(f.into(), String::new());
        }
        for p in POSITION_FIELDS {
            raw.insert(p.into(), String::new());
        }
        let rec = validate_record(&raw).unwrap();
        assert_eq!(rec.admission, None);
        assert_eq!(rec.bmi, None);
        assert_eq!(rec.asa, None);
        assert_eq!(rec.positions, None);
        assert_eq!(rec.actual_duration_min, None);
    }

    #[test]
    fn partial_position_block_is_rejected() {
        let mut raw = full_raw();
        raw.insert("pos_prone".into(), String::new());
        let errs = validate_record(&raw).unwrap_err();
        assert_eq!(errs[0].field, "positions");
    }

    #[test]
    fn csv_row_round_trips() {
        let rec = validate_record(&full_raw()).unwrap();
        assert_eq!(validate_record(&rec.to_raw()).unwrap(), rec);
    }

    #[test]
    fn cluster_keys() {
        let mut rec = validate_record(&full_raw()).unwrap();
        assert_eq!(cluster_of(&rec), ClusterKey::new("S1", 2021));
        rec.site_id = "S2".into();
        rec.surgery_date = NaiveDate::from_ymd_opt(2022, 12, 31).unwrap();
        assert_eq!(cluster_of(&rec), ClusterKey::new("S2", 2022));
        let mut later = rec.clone();
        later.surgery_date = NaiveDate::from_ymd_opt(2023, 1, 2).unwrap();
        assert_ne!(cluster_of(&rec), cluster_of(&later));
    }

    #[test]
    fn outcome_is_log_minutes() {
        let rec = validate_record(&full_raw()).unwrap();
        let ds = encode(&[rec], None).unwrap();
        assert!((ds.y[0] - 4.844_187_086_458_591).abs() < 1e-12);
        assert!((ds.y[0] - 127f64.ln()).abs() == 0.0);
    }

    #[test]
    fn january_is_the_month_reference() {
        let mut rec = validate_record(&full_raw()).unwrap();
        rec.surgery_date = NaiveDate::from_ymd_opt(2021, 1, 5).unwrap();
        let ds = encode(&[rec], None).unwrap();
        let month_cols: Vec<usize> = ds.meta.features.iter().enumerate().filter(|(_, f)| f.source == "surgery_date" && f.name.starts_with("month_")).map(|(j, _)| j).collect();
        assert_eq!(month_cols.len(), 11);
        assert!(month_cols.iter().all(|&j| ds.x[(0, j)] == 0.0));
    }

    #[test]
    fn reused_meta_keeps_columns_and_maps_unseen_year_to_reference() {
        let dev = validate_record(&full_raw()).unwrap();
        let mut dev2 = dev.clone();
        dev2.surgery_date = NaiveDate::from_ymd_opt(2022, 6, 7).unwrap();
        let dev_ds = encode(&[dev, dev2], None).unwrap();
        let mut test = validate_record(&full_raw()).unwrap();
        test.surgery_date = NaiveDate::from_ymd_opt(2024, 6, 4).unwrap();
        let test_ds = encode(&[test], Some(&dev_ds.meta)).unwrap();
        assert_eq!(test_ds.meta.feature_names(), dev_ds.meta.feature_names());
        let j = dev_ds.meta.feature_names().iter().position(|n| *n == "year_2022").unwrap();
        assert_eq!(test_ds.x[(0, j)], 0.0);
    }

    #[test]
    fn missing_outcome_and_bad_meta_are_errors() {
        let mut rec = validate_record(&full_raw()).unwrap();
        rec.actual_duration_min = None;
        assert!(matches!(encode(&[rec.clone()], None), Err(SchemaError::MissingOutcome { .. })));
        rec.actual_duration_min = Some(10.0);
        let custom = EncodingMeta::from_definitions(vec![VariableDef::single("a", "a", VariableKind::Continuous, "a")]);
        assert!(matches!(encode(&[rec], Some(&custom)), Err(SchemaError::MetaMismatch(_))));
    }

    #[test]
    fn every_predictor_has_a_column_and_none_is_surgeon_related() {
        let meta = EncodingMeta::standard(&[2021, 2022]);
        for field in PREDICTOR_FIELDS {
            assert!(meta.features.iter().any(|f| f.source == field), "{field} has no column");
        }
        assert!(meta.features.iter().all(|f| !f.name.contains("surgeon")));
        assert_eq!(meta.n_features(), 1 + 11 + 4 + 1 + 1 + 1 + 6 + 1 + 1 + 1 + 3 + 3);
    }

    #[test]
    fn missing_mask_tracks_absent_fields() {
        let mut rec = validate_record(&full_raw()).unwrap();
        rec.asa = None;
        rec.positions = None;
        let ds = encode(&[rec], None).unwrap();
        for (j, f) in ds.meta.features.iter().enumerate() {
            let absent = f.source == "asa" || f.source.starts_with("pos_");
            assert_eq!(ds.missing[(0, j)], absent, "{}", f.name);
            assert_eq!(ds.x[(0, j)].is_nan(), absent);
        }
    }

    #[test]
    fn decode_inverts_encode() {
        let meta = EncodingMeta::standard(&[2021, 2022, 2023]);
        let rec = validate_record(&full_raw()).unwrap();
        let values = meta.predictor_values(&rec.predictors());
        let (row, _) = meta.encode_values(&values).unwrap();
        let back = meta.decode_row(&row);
        let expect: Vec<f64> = values.iter().map(|v| v.unwrap()).collect();
        assert_eq!(back, expect);
    }

    #[test]
    fn predictors_reject_unknown_and_weekend() {
        let mut p = Predictors::default();
        assert_eq!(p.set_field("surgeon_id", "7").unwrap_err().reason, "unknown field");
        assert!(p.set_field("surgery_date", "2024-06-08").is_err());
        assert!(p.set_field("asa", "5").is_err());
        p.set_field("bmi", "22.5").unwrap();
        assert!(p.is_present("bmi"));
        assert_eq!(p.absent_fields().len(), PREDICTOR_FIELDS.len() - 1);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn record_with(minutes: f64, age: f64, day: u32) -> CaseRecord {
            let mut rec = validate_record(&full_raw()).unwrap();
            rec.actual_duration_min = Some(minutes);
            rec.age_years = Some(age);
            rec.surgery_date = NaiveDate::from_ymd_opt(2021, 3, day).unwrap();
            rec
        }

        proptest! {
            #[test]
            fn reencoding_with_own_meta_is_bit_identical(rows in prop::collection::vec((1.0f64..1000.0, 0.0f64..100.0, 1u32..28), 1..20)) {
                let cohort: Vec<_> = rows.iter().map(|&(m, a, d)| record_with(m, a, d)).filter(|r| r.surgery_date.weekday().number_from_monday() <= 5).collect();
                prop_assume!(!cohort.is_empty());
                let first = encode(&cohort, None).unwrap();
                let second = encode(&cohort, Some(&first.meta)).unwrap();
                let a: Vec<u64> = first.x.iter().map(|v| v.to_bits()).collect();
                let b: Vec<u64> = second.x.iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(a, b);
            }

            #[test]
            fn log_transform_preserves_order(a in 0.01f64..2000.0, b in 0.01f64..2000.0) {
                let ds = encode(&[record_with(a, 50.0, 4), record_with(b, 50.0, 4)], None).unwrap();
                prop_assert_eq!(a.partial_cmp(&b), ds.y[0].partial_cmp(&ds.y[1]));
            }
        }
    }
}
