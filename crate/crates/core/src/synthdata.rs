//! Synthetic multicentre cohorts with a known linear log-duration truth and
//! configurable missingness.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil::write_atomic;
use crate::ingest::write_csv;
use crate::kv::{self, Entry, KvError};
use crate::schema::{validate_record, CaseRecord, ClusterKey, EncodingMeta, Sex, POSITION_FIELDS};
use crate::seed::{derive_seed, rng_from, stable_hash, Rng};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error(transparent)]
    Config(#[from] KvError),
    #[error("invalid generator configuration: {0}")]
    Invalid(String),
    #[error("unknown field {0:?} in missingness spec")]
    UnknownField(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] crate::ingest::IngestError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Mechanism {
    Mcar,
    /// Rate multiplied by the record's site factor.
    MarSite,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissingSpec {
    pub mechanism: Mechanism,
    pub rate: f64,
}

impl MissingSpec {
    fn parse(e: &Entry) -> Result<Self, KvError> {
        let (mech, rate) = e.value.split_once(':').ok_or_else(|| e.invalid("expected mcar:<rate> or mar_site:<rate>"))?;
        let mechanism = match mech.trim() {
            "mcar" => Mechanism::Mcar,
            "mar_site" => Mechanism::MarSite,
            other => return Err(e.invalid(format!("unknown mechanism {other:?}"))),
        };
        let rate: f64 = rate.trim().parse().map_err(|_| e.invalid("rate is not a number"))?;
        if !(0.0..=1.0).contains(&rate) {
            return Err(e.invalid("rate must lie in [0, 1]"));
        }
        Ok(MissingSpec { mechanism, rate })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub name: String,
    pub fields: Vec<String>,
    pub missing: MissingSpec,
}

/// Fields that masking may remove. `positions` is the whole position block.
pub const MASKABLE_FIELDS: [&str; 7] = [
    "admission",
    "scheduled_duration_min",
    "general_anaesthesia",
    "positions",
    "age_years",
    "bmi",
    "asa",
];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub fields: BTreeMap<String, MissingSpec>,
    pub blocks: Vec<BlockSpec>,
    /// Multipliers for [`Mechanism::MarSite`]; sites not listed use 1.
    pub site_factors: BTreeMap<String, f64>,
}

impl MaskSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let known = |f: &str| MASKABLE_FIELDS.contains(&f);
        for f in self.fields.keys() {
            if !known(f) {
                return Err(SynthError::UnknownField(f.clone()));
            }
        }
        for b in &self.blocks {
            if b.fields.len() < 2 {
                return Err(SynthError::Invalid(format!("block {} must list at least two fields", b.name)));
            }
            if let Some(f) = b.fields.iter().find(|f| !known(f)) {
                return Err(SynthError::UnknownField(f.clone()));
            }
        }
        if self.site_factors.values().any(|f| !(*f >= 0.0)) {
            return Err(SynthError::Invalid("site factors must be non-negative".into()));
        }
        Ok(())
    }

    fn rate(&self, spec: &MissingSpec, site: &str) -> f64 {
        match spec.mechanism {
            Mechanism::Mcar => spec.rate,
            Mechanism::MarSite => (spec.rate * self.site_factors.get(site).copied().unwrap_or(1.0)).min(1.0),
        }
    }
}

/// Positive-valued variable whose quartiles are matched by
/// `center + sign * scale * exp(sigma * Z)`, clamped to `[lower, upper]`
/// (clamping keeps the quartiles when the bounds lie outside them).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftedLogNormal {
    pub center: f64,
    pub sign: f64,
    pub scale: f64,
    pub sigma: f64,
    pub lower: f64,
    pub upper: f64,
    /// Decimal places kept after rounding.
    pub decimals: i32,
}

const Z_Q3: f64 = 0.674_489_750_196_081_7;

impl ShiftedLogNormal {
    /// Solves for the parameters reproducing `q1 < median < q3` exactly.
    pub fn from_quartiles(q1: f64, median: f64, q3: f64, lower: f64, upper: f64, decimals: i32) -> Self {
        assert!(q1 < median && median < q3, "quartiles must increase");
        let up = q3 - median;
        let down = median - q1;
        // for sign +1 the gap ratio up/down equals exp(sigma * z); a ratio
        // below one needs the reflected form
        let sign = if up >= down { 1.0 } else { -1.0 };
        let s = (up / down).ln().abs();
        let (sigma, scale) = if s < 1e-12 {
            // symmetric quartiles: a very flat log-normal approximates a normal
            let sigma = 1e-3;
            let scale = up / ((sigma * Z_Q3).exp() - 1.0);
            (sigma, scale)
        } else {
            let scale = if sign > 0.0 { down / (1.0 - (-s).exp()) } else { up / (1.0 - (-s).exp()) };
            (s / Z_Q3, scale)
        };
        ShiftedLogNormal { center: median - sign * scale, sign, scale, sigma, lower, upper, decimals }
    }

    pub fn quantile(&self, z: f64) -> f64 {
        self.center + self.sign * self.scale * (self.sign * self.sigma * z).exp()
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        let factor = 10f64.powi(self.decimals);
        let z: f64 = StandardNormal.sample(rng);
        ((self.quantile(z) * factor).round() / factor).clamp(self.lower, self.upper)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Marginals {
    pub admission: f64,
    pub general_anaesthesia: f64,
    /// Marginal probability of each position flag (may sum above one).
    pub positions: [f64; 6],
    pub female: f64,
    pub allergy: f64,
    pub infection: f64,
    pub comorbidity: f64,
    /// ASA 1..4.
    pub asa: [f64; 4],
    pub month: [f64; 12],
    pub weekday: [f64; 5],
    pub scheduled_duration_min: ShiftedLogNormal,
    pub bmi: ShiftedLogNormal,
    /// Piecewise-linear quantile function as (probability, age) knots.
    pub age_knots: Vec<(f64, f64)>,
}

impl Default for Marginals {
    fn default() -> Self {
        Marginals {
            admission: 0.503,
            general_anaesthesia: 0.962,
            positions: [0.755, 0.046, 0.010, 0.131, 0.110, 0.009],
            female: 0.493,
            allergy: 0.219,
            infection: 0.065,
            comorbidity: 0.202,
            asa: [0.175, 0.490, 0.319, 0.016],
            month: [8.1, 7.9, 8.7, 8.5, 8.4, 8.5, 8.1, 8.2, 8.0, 8.8, 8.5, 8.4],
            weekday: [20.5, 21.2, 19.0, 21.7, 17.5],
            scheduled_duration_min: ShiftedLogNormal::from_quartiles(75.0, 150.0, 300.0, 10.0, 480.0, 0),
            bmi: ShiftedLogNormal::from_quartiles(18.83, 21.95, 24.75, 12.0, 45.0, 2),
            age_knots: vec![(0.0, 18.0), (0.25, 52.0), (0.5, 69.0), (0.75, 78.0), (1.0, 95.0)],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Records per (site, year) cell.
    pub cells: BTreeMap<ClusterKey, usize>,
    /// Cells of this year form the temporal test cohort.
    pub test_year: i32,
    pub marginals: Marginals,
    pub intercept: f64,
    /// True coefficients on the encoded log-duration scale, by feature name.
    pub beta: BTreeMap<String, f64>,
    pub shifts: BTreeMap<ClusterKey, f64>,
    pub residual_sd: f64,
    pub mask: MaskSpec,
    pub emergency_rate: f64,
    pub weekend_rate: f64,
    pub seed: u64,
}

fn cells_default() -> BTreeMap<ClusterKey, usize> {
    // Cluster sizes proportional to a two-site registry, scaled to 20,000
    // development and 6,000 test records
    [
        ("S1", 2021, 1497),
        ("S1", 2022, 2116),
        ("S1", 2023, 2234),
        ("S2", 2022, 6965),
        ("S2", 2023, 7188),
        ("S1", 2024, 438),
        ("S2", 2024, 5562),
    ]
    .into_iter()
    .map(|(s, y, n)| (ClusterKey::new(s, y), n))
    .collect()
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let beta = [
            ("scheduled_duration_min", 0.004),
            ("general_anaesthesia", 0.35),
            ("pos_prone", 0.25),
            ("pos_sitting", 0.15),
            ("pos_lithotomy", 0.10),
            ("pos_lateral", 0.20),
            ("pos_other", 0.05),
            ("admission", 0.15),
            ("asa_2", 0.05),
            ("asa_3", 0.12),
            ("asa_4", 0.20),
            ("age_years", 0.002),
            ("bmi", 0.01),
            ("sex_male", 0.05),
            ("allergy", 0.02),
            ("infection", 0.10),
            ("comorbidity", 0.05),
            ("month_8", -0.02),
            ("weekday_fri", -0.03),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        let shifts = [
            ("S1", 2021, 0.0),
            ("S1", 2022, 0.02),
            ("S1", 2023, -0.02),
            ("S2", 2022, 0.04),
            ("S2", 2023, 0.03),
            ("S1", 2024, 0.0),
            ("S2", 2024, 0.02),
        ]
        .into_iter()
        .map(|(s, y, v)| (ClusterKey::new(s, y), v))
        .collect();
        let mar = |rate| MissingSpec { mechanism: Mechanism::MarSite, rate };
        let mcar = |rate| MissingSpec { mechanism: Mechanism::Mcar, rate };
        let mask = MaskSpec {
            fields: [("scheduled_duration_min".to_string(), mcar(0.32)), ("bmi".to_string(), mcar(0.024))].into_iter().collect(),
            blocks: vec![BlockSpec {
                name: "source_system".into(),
                fields: vec!["general_anaesthesia".into(), "positions".into(), "asa".into()],
                missing: mar(0.64),
            }],
            site_factors: [("S1".to_string(), 1.1), ("S2".to_string(), 0.97)].into_iter().collect(),
        };
        GeneratorConfig {
            cells: cells_default(),
            test_year: 2024,
            marginals: Marginals::default(),
            intercept: DEFAULT_INTERCEPT,
            beta,
            shifts,
            residual_sd: 0.5,
            mask,
            emergency_rate: 0.0,
            weekend_rate: 0.0,
            seed: 20_250_823,
        }
    }
}

/// Places the default median outcome near 127 minutes.
const DEFAULT_INTERCEPT: f64 = 3.19;

fn parse_cluster(e: &Entry, rest: &str) -> Result<ClusterKey, KvError> {
    let (site, year) = rest.rsplit_once('.').ok_or_else(|| e.invalid("expected <site>.<year>"))?;
    let year: i32 = year.parse().map_err(|_| e.invalid("year is not an integer"))?;
    if site.is_empty() {
        return Err(e.invalid("empty site"));
    }
    Ok(ClusterKey::new(site, year))
}

fn parse_array<const N: usize>(e: &Entry) -> Result<[f64; N], KvError> {
    let v: Vec<f64> = e.parse_list()?;
    v.try_into().map_err(|_| e.invalid(format!("expected {N} values")))
}

impl GeneratorConfig {
    /// Defaults overridden by `key = value` lines.
    pub fn from_kv(text: &str) -> Result<Self, SynthError> {
        let mut cfg = GeneratorConfig::default();
        let mut blocks: BTreeMap<String, (Option<Vec<String>>, Option<MissingSpec>)> = BTreeMap::new();
        for e in kv::parse(text)? {
            let key = e.key.as_str();
            match key {
                "seed" => cfg.seed = e.parse()?,
                "intercept" => cfg.intercept = e.parse_f64()?,
                "residual_sd" => cfg.residual_sd = e.parse_f64()?,
                "test_year" => cfg.test_year = e.parse()?,
                "emergency_rate" => cfg.emergency_rate = e.parse_rate()?,
                "weekend_rate" => cfg.weekend_rate = e.parse_rate()?,
                "marginal.admission" => cfg.marginals.admission = e.parse_rate()?,
                "marginal.general_anaesthesia" => cfg.marginals.general_anaesthesia = e.parse_rate()?,
                "marginal.female" => cfg.marginals.female = e.parse_rate()?,
                "marginal.allergy" => cfg.marginals.allergy = e.parse_rate()?,
                "marginal.infection" => cfg.marginals.infection = e.parse_rate()?,
                "marginal.comorbidity" => cfg.marginals.comorbidity = e.parse_rate()?,
                "marginal.positions" => cfg.marginals.positions = parse_array(&e)?,
                "marginal.asa" => cfg.marginals.asa = parse_array(&e)?,
                "marginal.month" => cfg.marginals.month = parse_array(&e)?,
                "marginal.weekday" => cfg.marginals.weekday = parse_array(&e)?,
                "marginal.scheduled_duration_min" | "marginal.bmi" => {
                    let [q1, m, q3] = parse_array::<3>(&e)?;
                    if !(q1 < m && m < q3) {
                        return Err(e.invalid("quartiles must increase").into());
                    }
                    let old = if key.ends_with("bmi") { cfg.marginals.bmi } else { cfg.marginals.scheduled_duration_min };
                    let new = ShiftedLogNormal::from_quartiles(q1, m, q3, old.lower, old.upper, old.decimals);
                    if key.ends_with("bmi") {
                        cfg.marginals.bmi = new;
                    } else {
                        cfg.marginals.scheduled_duration_min = new;
                    }
                }
                _ => {
                    if let Some(rest) = key.strip_prefix("cell.") {
                        cfg.cells.insert(parse_cluster(&e, rest)?, e.parse()?);
                    } else if let Some(rest) = key.strip_prefix("shift.") {
                        cfg.shifts.insert(parse_cluster(&e, rest)?, e.parse_f64()?);
                    } else if let Some(feature) = key.strip_prefix("beta.") {
                        cfg.beta.insert(feature.to_string(), e.parse_f64()?);
                    } else if let Some(field) = key.strip_prefix("missing.") {
                        if e.value == "none" {
                            cfg.mask.fields.remove(field);
                        } else {
                            cfg.mask.fields.insert(field.to_string(), MissingSpec::parse(&e)?);
                        }
                    } else if let Some(site) = key.strip_prefix("site_factor.") {
                        cfg.mask.site_factors.insert(site.to_string(), e.parse_f64()?);
                    } else if let Some(rest) = key.strip_prefix("block.") {
                        let (name, attr) = rest.split_once('.').ok_or_else(|| e.unknown())?;
                        let slot = blocks.entry(name.to_string()).or_default();
                        match attr {
                            "fields" => slot.0 = Some(e.value.split(',').map(|s| s.trim().to_string()).collect()),
                            "missing" => slot.1 = Some(MissingSpec::parse(&e)?),
                            _ => return Err(e.unknown().into()),
                        }
                    } else {
                        return Err(e.unknown().into());
                    }
                }
            }
        }
        for (name, (fields, missing)) in blocks {
            let existing = cfg.mask.blocks.iter().position(|b| b.name == name);
            let base = existing.map(|i| cfg.mask.blocks[i].clone());
            let fields = fields.or(base.as_ref().map(|b| b.fields.clone()));
            let missing = missing.or(base.as_ref().map(|b| b.missing));
            let (Some(fields), Some(missing)) = (fields, missing) else {
                return Err(SynthError::Invalid(format!("block {name} needs both fields and missing")));
            };
            let block = BlockSpec { name, fields, missing };
            match existing {
                Some(i) => cfg.mask.blocks[i] = block,
                None => cfg.mask.blocks.push(block),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if !(self.residual_sd > 0.0) {
            return Err(SynthError::Invalid("residual_sd must be positive".into()));
        }
        let m = &self.marginals;
        let rates = [m.admission, m.general_anaesthesia, m.female, m.allergy, m.infection, m.comorbidity];
        if rates.iter().chain(m.positions.iter()).any(|r| !(0.0..=1.0).contains(r)) {
            return Err(SynthError::Invalid("marginal probabilities must lie in [0, 1]".into()));
        }
        for w in [&m.asa[..], &m.month[..], &m.weekday[..]] {
            if w.iter().any(|v| *v < 0.0) || w.iter().sum::<f64>() <= 0.0 {
                return Err(SynthError::Invalid("categorical weights must be non-negative with positive sum".into()));
            }
        }
        let meta = self.meta();
        let names = meta.feature_names();
        if let Some(bad) = self.beta.keys().find(|k| !names.contains(&k.as_str())) {
            return Err(SynthError::Invalid(format!("beta for unknown feature {bad:?}")));
        }
        self.mask.validate()
    }

    /// Encoding used to evaluate the linear truth: year indicators over
    /// every configured year.
    pub fn meta(&self) -> EncodingMeta {
        let years: Vec<i32> = self.cells.keys().map(|k| k.year).collect();
        EncodingMeta::standard(&years)
    }
}

fn draw_index(weights: &[f64], rng: &mut Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

fn piecewise_quantile(knots: &[(f64, f64)], u: f64) -> f64 {
    for w in knots.windows(2) {
        let ((p0, v0), (p1, v1)) = (w[0], w[1]);
        if u <= p1 {
            return v0 + (u - p0) / (p1 - p0) * (v1 - v0);
        }
    }
    knots.last().map(|k| k.1).unwrap_or(f64::NAN)
}

fn draw_date(year: i32, m: &Marginals, weekend: bool, rng: &mut Rng) -> NaiveDate {
    let month = draw_index(&m.month, rng) as u32 + 1;
    let target: Vec<u32> = if weekend {
        vec![6 + rng.random_range(0..2u32)]
    } else {
        vec![draw_index(&m.weekday, rng) as u32 + 1]
    };
    let days: Vec<NaiveDate> = (1..=31)
        .filter_map(|d| NaiveDate::from_ymd_opt(year, month, d))
        .filter(|d| target.contains(&d.weekday().number_from_monday()))
        .collect();
    days[rng.random_range(0..days.len())]
}

fn draw_positions(p: &[f64; 6], rng: &mut Rng) -> [bool; 6] {
    // one primary position, plus independent extra flags that lift each
    // marginal to its target when the targets sum above one
    let total: f64 = p.iter().sum();
    let primary = draw_index(p, rng);
    let mut out = [false; 6];
    for k in 0..6 {
        let q = p[k] / total.max(1.0);
        let extra = if total > 1.0 { ((p[k] - q) / (1.0 - q)).clamp(0.0, 1.0) } else { 0.0 };
        let hit = rng.random::<f64>() < extra;
        out[k] = k == primary || hit;
    }
    out
}

fn draw_record(id: String, key: &ClusterKey, cfg: &GeneratorConfig, rng: &mut Rng) -> CaseRecord {
    let m = &cfg.marginals;
    let emergency = rng.random::<f64>() < cfg.emergency_rate;
    let weekend = rng.random::<f64>() < cfg.weekend_rate;
    let surgery_date = draw_date(key.year, m, weekend, rng);
    let admission = rng.random::<f64>() < m.admission;
    let scheduled = m.scheduled_duration_min.sample(rng);
    let ga = rng.random::<f64>() < m.general_anaesthesia;
    let positions = draw_positions(&m.positions, rng);
    let sex = if rng.random::<f64>() < m.female { Sex::Female } else { Sex::Male };
    let age = piecewise_quantile(&m.age_knots, rng.random::<f64>()).round();
    let bmi = m.bmi.sample(rng);
    let allergy = rng.random::<f64>() < m.allergy;
    let infection = rng.random::<f64>() < m.infection;
    let comorbidity = rng.random::<f64>() < m.comorbidity;
    let asa = draw_index(&m.asa, rng) as u8 + 1;
    CaseRecord {
        case_id: id,
        site_id: key.site.clone(),
        surgery_date,
        emergency,
        admission: Some(admission),
        scheduled_duration_min: Some(scheduled),
        general_anaesthesia: Some(ga),
        positions: Some(positions),
        sex,
        age_years: Some(age),
        bmi: Some(bmi),
        allergy,
        infection,
        comorbidity,
        asa: Some(asa),
        actual_duration_min: None,
    }
}

/// Linear predictor of the truth (without cluster shift or noise).
pub fn true_linear_predictor(cfg: &GeneratorConfig, meta: &EncodingMeta, record: &CaseRecord) -> f64 {
    let values = meta.predictor_values(&record.predictors());
    let (row, _) = meta.encode_values(&values).expect("generated record encodes");
    cfg.intercept
        + meta
            .features
            .iter()
            .zip(&row)
            .map(|(f, x)| cfg.beta.get(&f.name).copied().unwrap_or(0.0) * x)
            .sum::<f64>()
}

/// A masked cell and its value in canonical CSV text form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskedCell {
    pub case_id: String,
    pub field: String,
    pub value: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftEntry {
    pub site: String,
    pub year: i32,
    pub shift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub intercept: f64,
    pub beta: BTreeMap<String, f64>,
    pub shifts: Vec<ShiftEntry>,
    pub residual_sd: f64,
    pub test_year: i32,
    /// Every record before masking.
    pub complete: Vec<CaseRecord>,
    pub masked_cells: Vec<MaskedCell>,
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub development: Vec<CaseRecord>,
    pub test: Vec<CaseRecord>,
    pub truth: GroundTruth,
}

fn csv_cells(record: &CaseRecord, field: &str) -> Vec<(String, String)> {
    let raw = record.to_raw();
    let names: Vec<&str> = if field == "positions" { POSITION_FIELDS.to_vec() } else { vec![field] };
    names.into_iter().map(|n| (n.to_string(), raw[n].clone())).collect()
}

fn clear_field(record: &mut CaseRecord, field: &str) -> bool {
    let was_present = match field {
        "admission" => record.admission.take().is_some(),
        "scheduled_duration_min" => record.scheduled_duration_min.take().is_some(),
        "general_anaesthesia" => record.general_anaesthesia.take().is_some(),
        "positions" => record.positions.take().is_some(),
        "age_years" => record.age_years.take().is_some(),
        "bmi" => record.bmi.take().is_some(),
        "asa" => record.asa.take().is_some(),
        _ => unreachable!("validated field names"),
    };
    was_present
}

/// Masks predictor cells. Block groups are drawn once per record and
/// cleared jointly; then each listed field is drawn independently. One
/// uniform draw is consumed per record and rule whether or not it masks, so
/// the pattern for one field does not depend on the rates of others.
pub fn mask(records: &[CaseRecord], spec: &MaskSpec, seed: u64) -> Result<(Vec<CaseRecord>, Vec<MaskedCell>), SynthError> {
    spec.validate()?;
    let mut rng = rng_from(derive_seed(seed, "mask", 0));
    let mut out = Vec::with_capacity(records.len());
    let mut cells = Vec::new();
    for rec in records {
        let mut r = rec.clone();
        let mut to_clear: Vec<&str> = Vec::new();
        for block in &spec.blocks {
            let u: f64 = rng.random();
            if u < spec.rate(&block.missing, &rec.site_id) {
                to_clear.extend(block.fields.iter().map(String::as_str));
            }
        }
        for (field, ms) in &spec.fields {
            let u: f64 = rng.random();
            if u < spec.rate(ms, &rec.site_id) {
                to_clear.push(field);
            }
        }
        for field in to_clear {
            let before = csv_cells(&r, field);
            if clear_field(&mut r, field) {
                cells.extend(before.into_iter().map(|(f, v)| MaskedCell { case_id: rec.case_id.clone(), field: f, value: v }));
            }
        }
        out.push(r);
    }
    Ok((out, cells))
}

/// Restores masked cells.
pub fn unmask(records: &[CaseRecord], cells: &[MaskedCell]) -> Vec<CaseRecord> {
    let mut by_id: BTreeMap<&str, Vec<&MaskedCell>> = BTreeMap::new();
    for c in cells {
        by_id.entry(c.case_id.as_str()).or_default().push(c);
    }
    records
        .iter()
        .map(|r| match by_id.get(r.case_id.as_str()) {
            None => r.clone(),
            Some(cs) => {
                let mut raw = r.to_raw();
                for c in cs {
                    raw.insert(c.field.clone(), c.value.clone());
                }
                validate_record(&raw).expect("restored record is valid")
            }
        })
        .collect()
}

/// Draws the complete cohort, computes outcomes from the linear truth and
/// masks it.
pub fn generate(cfg: &GeneratorConfig) -> Result<SynthOutput, SynthError> {
    cfg.validate()?;
    let meta = cfg.meta();
    let mut complete = Vec::new();
    for (key, &n) in &cfg.cells {
        let cell_seed = derive_seed(cfg.seed, "cell", stable_hash(format!("{}\u{0}{}", key.site, key.year).as_bytes()));
        let mut rng = rng_from(cell_seed);
        let shift = cfg.shifts.get(key).copied().unwrap_or(0.0);
        for i in 0..n {
            let mut rec = draw_record(format!("{}-{}-{:05}", key.site, key.year, i + 1), key, cfg, &mut rng);
            let noise: f64 = StandardNormal.sample(&mut rng);
            let log_minutes = true_linear_predictor(cfg, &meta, &rec) + shift + cfg.residual_sd * noise;
            // two decimals keeps the CSV compact without visible effect on the log scale
            rec.actual_duration_min = Some(((log_minutes.exp() * 100.0).round() / 100.0).max(0.01));
            complete.push(rec);
        }
    }
    let (masked, masked_cells) = mask(&complete, &cfg.mask, cfg.seed)?;
    let (test, development): (Vec<_>, Vec<_>) = masked.into_iter().partition(|r| r.surgery_date.year() == cfg.test_year);
    let truth = GroundTruth {
        seed: cfg.seed,
        intercept: cfg.intercept,
        beta: cfg.beta.clone(),
        shifts: cfg.shifts.iter().map(|(k, &s)| ShiftEntry { site: k.site.clone(), year: k.year, shift: s }).collect(),
        residual_sd: cfg.residual_sd,
        test_year: cfg.test_year,
        complete,
        masked_cells,
    };
    Ok(SynthOutput { development, test, truth })
}

impl SynthOutput {
    /// Writes `development.csv`, `test.csv` and `truth.json` into `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<(), SynthError> {
        for (name, recs) in [("development.csv", &self.development), ("test.csv", &self.test)] {
            let mut buf = Vec::new();
            write_csv(recs, &mut buf)?;
            write_atomic(&dir.join(name), &buf)?;
        }
        write_atomic(&dir.join("truth.json"), &serde_json::to_vec(&self.truth)?)?;
        Ok(())
    }
}
