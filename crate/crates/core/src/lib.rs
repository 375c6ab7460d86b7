//! Surgical case-duration prediction: cohort handling, chained-equation
//! imputation, leave-one-cluster-out tuning, four base learners, convex
//! stacking, locked model artifacts and calibration-focused metrics.

pub mod artifact;
pub mod config;
pub mod fsutil;
pub mod iecv;
pub mod ingest;
pub mod kv;
pub mod learners;
pub mod linalg;
pub mod metrics;
pub mod pipeline;
pub mod mice;
pub mod report;
pub mod schema;
pub mod seed;
pub mod stack;
pub mod synthdata;
