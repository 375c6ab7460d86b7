//! Python bindings: synthesise cohorts, develop and load locked models, and
//! predict single cases from plain dictionaries.

use std::path::PathBuf;

use durastack_core::artifact;
use durastack_core::config::RunConfig;
use durastack_core::ingest::parse_csv;
use durastack_core::pipeline::develop as develop_records;
use durastack_core::schema::{Predictors, PREDICTOR_FIELDS};
use durastack_core::stack::LockedModel;
use durastack_core::synthdata::{generate, GeneratorConfig};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyFloat, PyInt, PyString};

fn value_error(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Textual form of one Python value, or `None` when the field is absent.
fn field_text(name: &str, value: &Bound<'_, PyAny>) -> PyResult<Option<String>> {
    if value.is_none() {
        Ok(None)
    } else if value.is_instance_of::<PyBool>() {
        Ok(Some(if value.extract::<bool>()? { "1" } else { "0" }.to_string()))
    } else if value.is_instance_of::<PyInt>() || value.is_instance_of::<PyFloat>() || value.is_instance_of::<PyString>() {
        Ok(Some(value.str()?.to_string()))
    } else {
        Err(value_error(format!("{name}: unsupported value type {}", value.get_type().name()?)))
    }
}

fn predictors_from(fields: &Bound<'_, PyDict>) -> PyResult<Predictors> {
    let mut predictors = Predictors::default();
    let mut errors = Vec::new();
    for (key, value) in fields.iter() {
        let name: String = key.extract()?;
        match field_text(&name, &value)? {
            Some(text) => {
                if let Err(e) = predictors.set_field(&name, &text) {
                    errors.push(format!("{}: {}", e.field, e.reason));
                }
            }
            None if !PREDICTOR_FIELDS.contains(&name.as_str()) => errors.push(format!("{name}: unknown field")),
            None => {}
        }
    }
    if errors.is_empty() {
        Ok(predictors)
    } else {
        Err(value_error(errors.join("; ")))
    }
}

/// A locked model loaded from a `model.dsm` artifact.
#[pyclass(frozen)]
struct Model {
    model: LockedModel,
    version: String,
}

#[pymethods]
impl Model {
    /// SHA-256 of the artifact payload.
    #[getter]
    fn model_version(&self) -> &str {
        &self.version
    }

    #[getter]
    fn pipelines(&self) -> usize {
        self.model.pipelines.len()
    }

    /// Predicts one case. Absent or `None` fields are imputed and listed
    /// under `imputed_fields`.
    #[pyo3(signature = (fields, seed = 0))]
    fn predict<'py>(&self, py: Python<'py>, fields: &Bound<'py, PyDict>, seed: u64) -> PyResult<Bound<'py, PyDict>> {
        let predictors = predictors_from(fields)?;
        let p = self.model.predict_one(&predictors, seed).map_err(value_error)?;
        let out = PyDict::new(py);
        out.set_item("predicted_minutes", p.predicted_minutes)?;
        out.set_item("log_prediction_mean", p.log_pred_mean)?;
        out.set_item("per_pipeline_log", p.log_pred_per_pipeline)?;
        out.set_item("pipeline_spread", p.pipeline_spread)?;
        out.set_item("imputed_fields", p.imputed_fields)?;
        out.set_item("model_version", &self.version)?;
        Ok(out)
    }
}

#[pyfunction]
fn load_model(path: PathBuf) -> PyResult<Model> {
    let bytes = std::fs::read(&path).map_err(|e| PyIOError::new_err(format!("{}: {e}", path.display())))?;
    let (manifest, model) = artifact::from_bytes(&bytes).map_err(value_error)?;
    Ok(Model { model, version: manifest.payload_sha256 })
}

/// Writes a synthetic cohort to `out_dir` and returns the record counts.
#[pyfunction]
#[pyo3(signature = (out_dir, seed = None, config = None))]
fn synth(out_dir: PathBuf, seed: Option<u64>, config: Option<&str>) -> PyResult<(usize, usize)> {
    let mut cfg = match config {
        Some(text) => GeneratorConfig::from_kv(text).map_err(value_error)?,
        None => GeneratorConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let out = generate(&cfg).map_err(value_error)?;
    out.write_to_dir(&out_dir).map_err(|e| PyIOError::new_err(e.to_string()))?;
    Ok((out.development.len(), out.test.len()))
}

/// Develops a locked model from a case CSV, writes it to `model_path` and
/// returns its version.
#[pyfunction]
#[pyo3(signature = (train_csv, model_path, config = None))]
fn develop(train_csv: PathBuf, model_path: PathBuf, config: Option<&str>) -> PyResult<String> {
    let cfg = match config {
        Some(text) => RunConfig::from_kv(text).map_err(value_error)?,
        None => RunConfig::default(),
    };
    let file = std::fs::File::open(&train_csv).map_err(|e| PyIOError::new_err(format!("{}: {e}", train_csv.display())))?;
    let (records, errors) = parse_csv(file).map_err(value_error)?;
    if let Some(first) = errors.first() {
        return Err(value_error(format!("{} invalid rows, first at line {}", errors.len(), first.line)));
    }
    let out = develop_records(records, &cfg).map_err(value_error)?;
    let bytes = artifact::to_bytes(&out.model).map_err(value_error)?;
    std::fs::write(&model_path, &bytes).map_err(|e| PyIOError::new_err(format!("{}: {e}", model_path.display())))?;
    let (manifest, _) = artifact::from_bytes(&bytes).map_err(value_error)?;
    Ok(manifest.payload_sha256)
}

#[pyfunction]
fn predictor_fields() -> Vec<&'static str> {
    PREDICTOR_FIELDS.to_vec()
}

#[pymodule]
fn durastack(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(load_model, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(develop, m)?)?;
    m.add_function(wrap_pyfunction!(predictor_fields, m)?)?;
    Ok(())
}
