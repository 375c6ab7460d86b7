use durastack_core::artifact::{self, ArtifactError};
use durastack_core::config::RunConfig;
use durastack_core::iecv::{impute_folds, make_folds, ImputerContext, IecvError};
use durastack_core::mice::ImputerOptions;
use durastack_core::pipeline::{develop, predict_records, prepare_development, validate, DevelopOutput, PipelineError};
use durastack_core::report::{calibration_deciles, report_csv, CSV_HEADER};
use durastack_core::schema::CaseRecord;
use durastack_core::stack::FORMAT_VERSION;
use durastack_core::synthdata::{generate, GeneratorConfig, SynthOutput};

fn cohort(per_cell: usize, seed: u64) -> SynthOutput {
    let mut cfg = GeneratorConfig::default();
    for v in cfg.cells.values_mut() {
        *v = per_cell;
    }
    cfg.seed = seed;
    generate(&cfg).unwrap()
}

fn fast_config() -> RunConfig {
    RunConfig::from_kv(
        "m = 2\niterations = 2\nbootstrap = 100\nseed = 5\n\
         grid.elastic_net.lambda = 0.001, 0.01\ngrid.elastic_net.alpha = 0.5\n\
         grid.gam.lambda_s = 1\ngrid.gam.knots = 6\n\
         grid.random_forest.n_trees = 15\ngrid.random_forest.min_node = 10\n\
         grid.gbt.n_rounds = 20\ngrid.gbt.depth = 2\ngrid.gbt.learning_rate = 0.1\n",
    )
    .unwrap()
}

fn developed(seed: u64) -> (SynthOutput, DevelopOutput) {
    let data = cohort(80, seed);
    let out = develop(data.development.clone(), &fast_config()).unwrap();
    (data, out)
}

#[test]
fn develop_produces_report_audit_and_valid_weights() {
    let (data, out) = developed(1);
    assert_eq!(out.model.pipelines.len(), 2);
    assert_eq!(out.iecv.rows.len(), 5);
    let csv = report_csv(&out.iecv).unwrap();
    assert_eq!(csv.lines().next().unwrap(), CSV_HEADER);
    assert_eq!(csv.lines().count(), 7);
    let n = out.exclusions.as_ref().unwrap().stages.last().unwrap().remaining;
    assert_eq!(out.iecv.overall.n, n);
    assert!(n < data.development.len() + 1);
    for s in &out.audit.streams {
        let best = s.learner_oof_mse.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(s.stack_oof_mse <= best + 1e-12, "{} vs {}", s.stack_oof_mse, best);
        assert!((s.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert!(s.weights.iter().all(|&w| w >= -1e-12));
    }
    assert_eq!(out.model.provenance.tune_digest, out.audit.digest());
    assert_eq!(out.model.provenance.created_at, "1970-01-01T00:00:00Z");
}

#[test]
fn repeated_develop_gives_identical_artifacts() {
    let data = cohort(50, 2);
    let a = artifact::to_bytes(&develop(data.development.clone(), &fast_config()).unwrap().model).unwrap();
    let b = artifact::to_bytes(&develop(data.development, &fast_config()).unwrap().model).unwrap();
    assert!(a == b, "artifacts differ");
}

#[test]
fn artifact_round_trip_and_corruption() {
    let (data, out) = developed(3);
    let bytes = artifact::to_bytes(&out.model).unwrap();
    let (manifest, back) = artifact::from_bytes(&bytes).unwrap();
    assert_eq!(back, out.model);
    assert_eq!(manifest.pipelines, 2);
    assert_eq!(manifest.format_version, FORMAT_VERSION);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.dsm");
    artifact::save_file(&out.model, &path).unwrap();
    let loaded = artifact::load_file(&path).unwrap();
    let cfg = fast_config();
    let before = validate(&out.model, data.test.clone(), &cfg).unwrap();
    let after = validate(&loaded, data.test, &cfg).unwrap();
    for (p, q) in before.predictions.iter().zip(&after.predictions) {
        for (a, b) in p.iter().zip(q) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    let mut flipped = bytes.clone();
    let mid = bytes.len() / 2;
    flipped[mid] ^= 0x40;
    assert!(matches!(artifact::from_bytes(&flipped), Err(ArtifactError::Corrupt(_))));
    assert!(matches!(artifact::from_bytes(&bytes[..bytes.len() - 1]), Err(ArtifactError::Corrupt(_))));
    assert!(matches!(artifact::from_bytes(&bytes[..3]), Err(ArtifactError::BadMagic)));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(artifact::from_bytes(&magic), Err(ArtifactError::BadMagic)));
    let mut version = bytes.clone();
    version[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    assert!(matches!(artifact::from_bytes(&version), Err(ArtifactError::Version { .. })));
    let mut trailing = bytes;
    trailing.push(0);
    assert!(matches!(artifact::from_bytes(&trailing), Err(ArtifactError::Corrupt(_))));
}

#[test]
fn validate_reports_test_clusters_and_deciles() {
    let (data, out) = developed(4);
    let v = validate(&out.model, data.test, &fast_config()).unwrap();
    let labels: Vec<&str> = v.report.rows.iter().map(|r| r.cluster.as_str()).collect();
    assert_eq!(labels, ["S1 at 2024", "S2 at 2024"]);
    assert_eq!(calibration_deciles(&v.plot).unwrap().len(), 10);
    assert!(v.report.summary.adjusted_r2.is_finite());
    let empty = validate(&out.model, Vec::new(), &fast_config());
    assert!(matches!(empty, Err(PipelineError::Cohort(_))));
}

#[test]
fn single_cluster_development_is_rejected() {
    let data = cohort(40, 5);
    let one: Vec<CaseRecord> = data.development.into_iter().filter(|r| r.site_id == "S1" && r.surgery_date.format("%Y").to_string() == "2021").collect();
    let err = develop(one, &fast_config()).err().expect("single cluster must fail");
    assert!(err.is_data());
    assert!(err.to_string().contains("LOCO requires ≥2 clusters"), "{err}");
}

#[test]
fn batch_prediction_imputes_missing_fields_and_reports_bad_rows() {
    let (data, out) = developed(6);
    let mut records: Vec<CaseRecord> = data.test.iter().take(3).cloned().collect();
    records[0].bmi = None;
    records[0].actual_duration_min = None;
    records[2].surgery_date = chrono::NaiveDate::from_ymd_opt(2024, 6, 1).unwrap();
    let rows = predict_records(&out.model, &records, 9);
    assert!(rows[0].imputed_fields.split(';').any(|f| f == "bmi"));
    assert!(rows[0].predicted_minutes.unwrap() > 0.0);
    assert!(rows[1].error.is_empty());
    assert!(!rows[2].error.is_empty(), "a Saturday cannot be encoded");
    assert_eq!(predict_records(&out.model, &records, 9), rows);
}

#[test]
fn fold_imputers_ignore_held_out_outcomes() {
    let data = cohort(40, 7);
    let (encoded, _) = prepare_development(data.development).unwrap();
    let plan = make_folds(&encoded).unwrap();
    let ctx = ImputerContext { options: ImputerOptions::new(1, 2, 11), stream: 0, validation_uses_outcome: true };
    let base = impute_folds(&encoded, &plan, &ctx).unwrap();
    for (f, fold) in plan.folds.iter().enumerate() {
        let mut mutated = encoded.clone();
        for &i in &fold.validation {
            mutated.y[i] += 3.0;
        }
        let again = impute_folds(&mutated, &plan, &ctx).unwrap();
        assert!(again[f].models == base[f].models, "fold {} imputer changed", fold.held_out);
    }
    assert_eq!(make_folds(&encoded.subset(&plan.folds[0].validation)).unwrap_err(), IecvError::TooFewClusters(1));
}
