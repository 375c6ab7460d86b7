//! HTTP JSON service around a locked model.
//!
//! Routes:
//!
//! - `POST /api/v1/predict`: any subset of the predictor fields plus an
//!   optional `seed`; absent fields are imputed.
//! - `GET /api/v1/schema`: field list with types, ranges and levels.
//! - `GET /api/v1/health`: 503 until a model is installed.
//! - `GET /api/v1/model`: version and provenance.
//! - everything else: optional static directory for the calculator UI.

use std::future::Future;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use durastack_core::artifact::{self, ArtifactError, Manifest};
use durastack_core::schema::{FieldError, Predictors, POSITION_FIELDS, PREDICTOR_FIELDS, SCHEMA_VERSION};
use durastack_core::stack::LockedModel;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use tokio::net::TcpListener;
use tower_http::services::ServeDir;

pub const DISCLAIMER: &str = "For research use only. Predictions are not validated for clinical decision-making.";

/// A model ready to answer requests, with its precomputed documents.
pub struct LoadedModel {
    pub model: LockedModel,
    pub manifest: Manifest,
    schema_doc: Bytes,
    schema_etag: String,
}

impl LoadedModel {
    pub fn new(model: LockedModel, manifest: Manifest) -> Self {
        let doc = serde_json::to_vec_pretty(&schema_document(&manifest)).expect("schema serialises");
        let schema_etag = format!("\"{}\"", &hex::encode(Sha256::digest(&doc))[..32]);
        LoadedModel { model, manifest, schema_doc: Bytes::from(doc), schema_etag }
    }

    pub fn from_artifact(bytes: &[u8]) -> Result<Self, ArtifactError> {
        let (manifest, model) = artifact::from_bytes(bytes)?;
        Ok(LoadedModel::new(model, manifest))
    }

    pub fn model_version(&self) -> &str {
        &self.manifest.payload_sha256
    }
}

/// Shared state. The model slot is filled once; until then the service
/// reports itself as unavailable.
#[derive(Clone, Default)]
pub struct AppState {
    slot: Arc<OnceLock<Arc<LoadedModel>>>,
}

impl AppState {
    pub fn empty() -> Self {
        AppState::default()
    }

    pub fn with_model(loaded: LoadedModel) -> Self {
        let state = AppState::empty();
        state.install(loaded);
        state
    }

    /// Installs the model. Later calls are ignored so a running service
    /// never changes models underneath in-flight requests.
    pub fn install(&self, loaded: LoadedModel) -> bool {
        self.slot.set(Arc::new(loaded)).is_ok()
    }

    pub fn loaded(&self) -> Option<Arc<LoadedModel>> {
        self.slot.get().cloned()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub predicted_minutes: f64,
    pub log_prediction_mean: f64,
    pub per_pipeline_log: Vec<f64>,
    /// Range of the per-pipeline log predictions.
    pub pipeline_spread: f64,
    pub imputed_fields: Vec<String>,
    pub model_version: String,
    pub schema_version: u32,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fields: Vec<FieldError>,
}

fn error(status: StatusCode, message: impl Into<String>, fields: Vec<FieldError>) -> Response {
    (status, Json(ErrorBody { error: message.into(), fields })).into_response()
}

fn unavailable() -> Response {
    error(StatusCode::SERVICE_UNAVAILABLE, "model is not loaded yet", vec![])
}

enum FieldType {
    Date,
    Flag,
    Number,
    Sex,
    Asa,
}

fn field_type(name: &str) -> FieldType {
    match name {
        "surgery_date" => FieldType::Date,
        "scheduled_duration_min" | "age_years" | "bmi" => FieldType::Number,
        "sex" => FieldType::Sex,
        "asa" => FieldType::Asa,
        _ => FieldType::Flag,
    }
}

fn field_doc(name: &str) -> Value {
    let mut doc = match field_type(name) {
        FieldType::Date => json!({"type": "date", "format": "YYYY-MM-DD", "weekdays_only": true}),
        FieldType::Flag => json!({"type": "boolean"}),
        FieldType::Sex => json!({"type": "enum", "levels": ["female", "male"]}),
        FieldType::Asa => json!({"type": "integer", "enum": [1, 2, 3, 4]}),
        FieldType::Number => match name {
            "scheduled_duration_min" => json!({"type": "number", "exclusive_minimum": 0, "unit": "minutes"}),
            "age_years" => json!({"type": "number", "minimum": 0, "unit": "years"}),
            _ => json!({"type": "number", "exclusive_minimum": 0, "unit": "kg/m2"}),
        },
    };
    let group = if POSITION_FIELDS.contains(&name) { "position" } else { "case" };
    let obj = doc.as_object_mut().expect("object");
    obj.insert("name".into(), json!(name));
    obj.insert("required".into(), json!(false));
    obj.insert("group".into(), json!(group));
    doc
}

pub fn schema_document(manifest: &Manifest) -> Value {
    json!({
        "schema_version": SCHEMA_VERSION,
        "encoding_fingerprint": manifest.encoding_fingerprint,
        "missing_fields": "omit the key or send null; the service imputes it",
        "fields": PREDICTOR_FIELDS.iter().map(|f| field_doc(f)).collect::<Vec<_>>(),
    })
}

/// Converts one JSON value to the textual form accepted by
/// [`Predictors::set_field`], checking its JSON type.
fn field_text(name: &str, value: &Value) -> Result<Option<String>, FieldError> {
    let wrong = |expected: &str| FieldError::new(name, format!("expected {expected}, got {value}"));
    if value.is_null() {
        return Ok(None);
    }
    let text = match field_type(name) {
        FieldType::Date | FieldType::Sex => value.as_str().ok_or_else(|| wrong("a string"))?.to_string(),
        FieldType::Flag => match value {
            Value::Bool(b) => if *b { "1" } else { "0" }.to_string(),
            Value::Number(n) if n.as_u64() == Some(0) || n.as_u64() == Some(1) => n.to_string(),
            _ => return Err(wrong("true, false, 0 or 1")),
        },
        FieldType::Number => value.as_f64().map(|v| v.to_string()).ok_or_else(|| wrong("a number"))?,
        FieldType::Asa => value.as_i64().map(|v| v.to_string()).ok_or_else(|| wrong("an integer"))?,
    };
    if text.trim().is_empty() {
        return Err(FieldError::new(name, "empty value; omit the key for an unknown field"));
    }
    Ok(Some(text))
}

/// Parses a request body into predictors and an optional seed, collecting
/// every field problem.
pub fn parse_request(body: &[u8]) -> Result<(Predictors, Option<u64>), Vec<FieldError>> {
    let map: Map<String, Value> = match serde_json::from_slice(body) {
        Ok(Value::Object(m)) => m,
        Ok(_) => return Err(vec![FieldError::new("$", "request body must be a JSON object")]),
        Err(e) => return Err(vec![FieldError::new("$", format!("invalid JSON: {e}"))]),
    };
    let mut predictors = Predictors::default();
    let mut seed = None;
    let mut errors = Vec::new();
    for (key, value) in &map {
        if key == "seed" {
            match value {
                Value::Null => {}
                v => match v.as_u64() {
                    Some(s) => seed = Some(s),
                    None => errors.push(FieldError::new("seed", "expected a non-negative integer")),
                },
            }
            continue;
        }
        if !PREDICTOR_FIELDS.contains(&key.as_str()) {
            errors.push(FieldError::new(key.as_str(), "unknown field"));
            continue;
        }
        match field_text(key, value) {
            Ok(Some(text)) => {
                if let Err(e) = predictors.set_field(key, &text) {
                    errors.push(e);
                }
            }
            Ok(None) => {}
            Err(e) => errors.push(e),
        }
    }
    if errors.is_empty() {
        Ok((predictors, seed))
    } else {
        Err(errors)
    }
}

async fn predict(State(state): State<AppState>, body: Bytes) -> Response {
    let Some(loaded) = state.loaded() else { return unavailable() };
    let (predictors, seed) = match parse_request(&body) {
        Ok(p) => p,
        Err(fields) => return error(StatusCode::BAD_REQUEST, "invalid request", fields),
    };
    let seed = seed.unwrap_or_else(rand::random);
    let job = tokio::task::spawn_blocking(move || {
        let result = loaded.model.predict_one(&predictors, seed);
        (loaded, result)
    });
    match job.await {
        Ok((loaded, Ok(p))) => Json(PredictResponse {
            predicted_minutes: p.predicted_minutes,
            log_prediction_mean: p.log_pred_mean,
            per_pipeline_log: p.log_pred_per_pipeline,
            pipeline_spread: p.pipeline_spread,
            imputed_fields: p.imputed_fields,
            model_version: loaded.model_version().to_string(),
            schema_version: SCHEMA_VERSION,
            seed,
        })
        .into_response(),
        Ok((_, Err(e))) => {
            log::error!("prediction failed: {e}");
            error(StatusCode::INTERNAL_SERVER_ERROR, format!("prediction failed: {e}"), vec![])
        }
        Err(e) => {
            log::error!("prediction task failed: {e}");
            error(StatusCode::INTERNAL_SERVER_ERROR, "prediction task failed", vec![])
        }
    }
}

async fn schema(State(state): State<AppState>, headers: HeaderMap) -> Response {
    let Some(loaded) = state.loaded() else { return unavailable() };
    let etag = HeaderValue::from_str(&loaded.schema_etag).expect("hex etag");
    let cache = [(header::ETAG, etag.clone()), (header::CACHE_CONTROL, HeaderValue::from_static("public, max-age=300"))];
    if headers.get(header::IF_NONE_MATCH) == Some(&etag) {
        return (StatusCode::NOT_MODIFIED, cache).into_response();
    }
    (cache, [(header::CONTENT_TYPE, HeaderValue::from_static("application/json"))], loaded.schema_doc.clone()).into_response()
}

async fn health(State(state): State<AppState>) -> Response {
    match state.loaded() {
        Some(l) => Json(json!({"status": "ok", "pipelines": l.model.pipelines.len()})).into_response(),
        None => (StatusCode::SERVICE_UNAVAILABLE, Json(json!({"status": "loading"}))).into_response(),
    }
}

async fn model_info(State(state): State<AppState>) -> Response {
    let Some(loaded) = state.loaded() else { return unavailable() };
    Json(json!({
        "model_version": loaded.model_version(),
        "schema_version": SCHEMA_VERSION,
        "format_version": loaded.manifest.format_version,
        "manifest": loaded.manifest,
        "pipeline_spread": "range of the per-imputation log predictions; an addition of this service, not a validated uncertainty interval",
        "disclaimer": DISCLAIMER,
    }))
    .into_response()
}

pub fn router(state: AppState, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/v1/predict", post(predict))
        .route("/api/v1/schema", get(schema))
        .route("/api/v1/health", get(health))
        .route("/api/v1/model", get(model_info))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("server error: {0}")]
    Io(#[from] std::io::Error),
}

pub async fn bind(addr: &str) -> Result<TcpListener, ServeError> {
    TcpListener::bind(addr).await.map_err(|source| ServeError::Bind { addr: addr.to_string(), source })
}

/// Serves until `shutdown` resolves, then drains in-flight requests.
pub async fn run<F>(listener: TcpListener, app: Router, shutdown: F) -> Result<(), ServeError>
where
    F: Future<Output = ()> + Send + 'static,
{
    let addr: Option<SocketAddr> = listener.local_addr().ok();
    log::info!("listening on {addr:?}");
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await?;
    Ok(())
}
