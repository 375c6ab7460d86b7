//! Run configuration shared by every subcommand.
//!
//! ```text
//! m = 5
//! iterations = 5
//! seed = 20240601
//! bootstrap = 1000
//! grid.random_forest.n_trees = 100, 300
//! ```

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use thiserror::Error;

use crate::kv::{self, Entry, KvError};
use crate::learners::{default_axes, GridAxes, LearnerKind};
use crate::metrics::DEFAULT_BOOTSTRAP;
use crate::mice::{DEFAULT_DONORS, DEFAULT_RIDGE};

pub const DEFAULT_SEED: u64 = 20_240_601;
pub const DEFAULT_ADDRESS: &str = "127.0.0.1:8080";

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub m: usize,
    pub iterations: usize,
    pub seed: u64,
    pub donors: usize,
    pub ridge: f64,
    pub bootstrap: usize,
    /// Complete IECV validation rows and test rows with the outcome-aware
    /// imputation models.
    pub evaluation_uses_outcome: bool,
    /// Grid overrides, replacing whole axes of the default grids.
    pub grids: BTreeMap<(LearnerKind, String), Vec<f64>>,
    pub created_at: Option<String>,
    pub address: String,
    pub static_dir: Option<String>,
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            m: 5,
            iterations: 5,
            seed: DEFAULT_SEED,
            donors: DEFAULT_DONORS,
            ridge: DEFAULT_RIDGE,
            bootstrap: DEFAULT_BOOTSTRAP,
            evaluation_uses_outcome: true,
            grids: BTreeMap::new(),
            created_at: None,
            address: DEFAULT_ADDRESS.into(),
            static_dir: None,
            threads: None,
        }
    }
}

fn positive(e: &Entry) -> Result<usize, KvError> {
    let v: usize = e.parse()?;
    if v == 0 {
        return Err(e.invalid("must be at least 1"));
    }
    Ok(v)
}

impl RunConfig {
    pub fn from_kv(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        for e in kv::parse(text)? {
            match e.key.as_str() {
                "m" => cfg.m = positive(&e)?,
                "iterations" => cfg.iterations = positive(&e)?,
                "seed" => cfg.seed = e.parse()?,
                "donors" => cfg.donors = positive(&e)?,
                "ridge" => {
                    cfg.ridge = e.parse_f64()?;
                    if cfg.ridge < 0.0 {
                        return Err(e.invalid("must be non-negative").into());
                    }
                }
                "bootstrap" => {
                    cfg.bootstrap = e.parse()?;
                    if cfg.bootstrap < 100 {
                        return Err(e.invalid("needs at least 100 resamples").into());
                    }
                }
                "evaluation_uses_outcome" => cfg.evaluation_uses_outcome = e.parse()?,
                "created_at" => {
                    DateTime::parse_from_rfc3339(&e.value).map_err(|_| e.invalid("expected an RFC 3339 timestamp"))?;
                    cfg.created_at = Some(e.value.clone());
                }
                "address" => cfg.address = e.value.clone(),
                "static_dir" => cfg.static_dir = Some(e.value.clone()),
                "threads" => cfg.threads = Some(positive(&e)?),
                key => {
                    let Some(rest) = key.strip_prefix("grid.") else { return Err(e.unknown().into()) };
                    let (learner, param) = rest.split_once('.').ok_or_else(|| e.unknown())?;
                    let kind = LearnerKind::parse(learner).ok_or_else(|| e.unknown())?;
                    if !kind.keys().contains(&param) {
                        return Err(e.unknown().into());
                    }
                    cfg.grids.insert((kind, param.to_string()), e.parse_list()?);
                }
            }
        }
        Ok(cfg)
    }

    /// The grid axes for one learner over `p` encoded features.
    pub fn axes(&self, kind: LearnerKind, p: usize) -> GridAxes {
        default_axes(kind, p)
            .into_iter()
            .map(|(key, values)| {
                let values = self.grids.get(&(kind, key.clone())).cloned().unwrap_or(values);
                (key, values)
            })
            .collect()
    }

    /// Timestamp recorded in artifacts: the configured value, else
    /// `SOURCE_DATE_EPOCH`, else the Unix epoch. Never the wall clock, so
    /// repeated runs produce identical files.
    pub fn created_at(&self) -> String {
        if let Some(t) = &self.created_at {
            return t.clone();
        }
        let secs = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|v| v.parse::<i64>().ok()).unwrap_or(0);
        DateTime::<Utc>::from_timestamp(secs, 0).unwrap_or_default().format("%Y-%m-%dT%H:%M:%SZ").to_string()
    }

    pub fn to_kv(&self) -> String {
        let mut s = format!(
            "m = {}\niterations = {}\nseed = {}\ndonors = {}\nridge = {}\nbootstrap = {}\nevaluation_uses_outcome = {}\naddress = {}\n",
            self.m, self.iterations, self.seed, self.donors, self.ridge, self.bootstrap, self.evaluation_uses_outcome, self.address
        );
        if let Some(t) = &self.created_at {
            s.push_str(&format!("created_at = {t}\n"));
        }
        if let Some(d) = &self.static_dir {
            s.push_str(&format!("static_dir = {d}\n"));
        }
        if let Some(t) = self.threads {
            s.push_str(&format!("threads = {t}\n"));
        }
        for ((kind, key), values) in &self.grids {
            let list: Vec<String> = values.iter().map(f64::to_string).collect();
            s.push_str(&format!("grid.{}.{} = {}\n", kind.name(), key, list.join(", ")));
        }
        s
    }
}
