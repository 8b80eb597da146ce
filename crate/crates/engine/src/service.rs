//! `/v1` JSON API over the model store.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use bidscape_core::auction_log::LogFormat;
use serde::de::DeserializeOwned;
use serde_json::{json, Value};
use tower_http::services::ServeDir;

use crate::pipeline::{
    self, BuildRequest, CurvesRequest, FieldError, PipelineError, RecommendRequest,
};
use crate::store::{ModelStore, StoreError};

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<ModelStore>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    fields: Vec<FieldError>,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
            fields: Vec::new(),
        }
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        use bidscape_core::optimizer::OptimizerError;
        let status = match &e {
            PipelineError::Invalid(_)
            | PipelineError::NothingIngested(_)
            | PipelineError::Optimizer(OptimizerError::InvalidInput { .. }) => {
                StatusCode::BAD_REQUEST
            }
            PipelineError::Store(StoreError::NotFound(_)) => StatusCode::NOT_FOUND,
            PipelineError::NoLogs | PipelineError::Optimizer(OptimizerError::EmptyLandscape) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            PipelineError::Optimizer(OptimizerError::Landscape(_))
            | PipelineError::Landscape(_) => StatusCode::UNPROCESSABLE_ENTITY,
            PipelineError::Store(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            tracing::error!(error = %e, "request failed");
        }
        Self {
            status,
            fields: e.field_errors(),
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message });
        if !self.fields.is_empty() {
            let fields: BTreeMap<_, _> = self
                .fields
                .into_iter()
                .map(|f| (f.field, f.message))
                .collect();
            body["fields"] = json!(fields);
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Parses a JSON body; an empty body reads as `{}`.
fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    let bytes: &[u8] = if body.iter().all(u8::is_ascii_whitespace) {
        b"{}"
    } else {
        body
    };
    serde_json::from_slice(bytes).map_err(|e| ApiError::bad_request(format!("invalid body: {e}")))
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, PipelineError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: format!("worker failed: {e}"),
            fields: Vec::new(),
        })?
        .map_err(ApiError::from)
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

async fn ingest_logs(
    State(state): State<AppState>,
    Query(params): Query<BTreeMap<String, String>>,
    body: Bytes,
) -> ApiResult<pipeline::IngestSummary> {
    let format: LogFormat = params
        .get("format")
        .map(|f| f.parse())
        .transpose()
        .map_err(ApiError::bad_request)?
        .unwrap_or(LogFormat::Jsonl);
    let store = state.store.clone();
    let summary = blocking(move || pipeline::ingest(&store, body.as_ref(), format)).await?;
    Ok(Json(summary))
}

async fn build(State(state): State<AppState>, body: Bytes) -> ApiResult<pipeline::BuildSummary> {
    let request: BuildRequest = parse_body(&body)?;
    let store = state.store.clone();
    Ok(Json(
        blocking(move || pipeline::build(&store, &request)).await?,
    ))
}

async fn list_groups(State(state): State<AppState>) -> ApiResult<Value> {
    let groups = state.store.groups().map_err(PipelineError::from)?;
    Ok(Json(json!({ "groups": groups })))
}

async fn get_landscape(
    State(state): State<AppState>,
    Path(group): Path<String>,
) -> Result<Response, ApiError> {
    let l = state
        .store
        .load_model(&group)
        .map_err(PipelineError::from)?;
    Ok(Json(l).into_response())
}

fn query_number<T: std::str::FromStr>(
    params: &BTreeMap<String, String>,
    name: &str,
    default: Option<T>,
    errors: &mut Vec<FieldError>,
) -> Option<T> {
    match params.get(name) {
        Some(raw) => match raw.parse() {
            Ok(v) => Some(v),
            Err(_) => {
                errors.push(FieldError {
                    field: name.into(),
                    message: "must be a number".into(),
                });
                None
            }
        },
        None if default.is_some() => default,
        None => {
            errors.push(FieldError {
                field: name.into(),
                message: "is required".into(),
            });
            None
        }
    }
}

async fn get_curves(
    State(state): State<AppState>,
    Path(group): Path<String>,
    Query(params): Query<BTreeMap<String, String>>,
) -> ApiResult<pipeline::CurvesResponse> {
    let mut errors = Vec::new();
    let from = query_number(&params, "from", None, &mut errors);
    let to = query_number(&params, "to", None, &mut errors);
    let step = query_number(&params, "step", None, &mut errors);
    let impressions = query_number(&params, "impressions", Some(0u64), &mut errors);
    let pctr = query_number(&params, "pctr", None, &mut errors);
    let pcvr = query_number(&params, "pcvr", None, &mut errors);
    let (Some(from), Some(to), Some(step), Some(impressions), Some(pctr), Some(pcvr)) =
        (from, to, step, impressions, pctr, pcvr)
    else {
        return Err(PipelineError::Invalid(errors).into());
    };
    let request = CurvesRequest {
        from,
        to,
        step,
        impressions,
        pctr,
        pcvr,
    };
    Ok(Json(pipeline::curves(&state.store, &group, &request)?))
}

async fn recommend(
    State(state): State<AppState>,
    body: Bytes,
) -> ApiResult<bidscape_core::optimizer::Recommendation> {
    let request: RecommendRequest = parse_body(&body)?;
    Ok(Json(pipeline::recommend(&state.store, &request)?))
}

async fn not_found() -> ApiError {
    ApiError {
        status: StatusCode::NOT_FOUND,
        message: "no such endpoint".into(),
        fields: Vec::new(),
    }
}

pub fn router(store: Arc<ModelStore>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/v1/health", get(health))
        .route("/v1/logs", post(ingest_logs))
        .route("/v1/landscape", get(list_groups))
        .route("/v1/landscape/build", post(build))
        .route("/v1/landscape/{group}", get(get_landscape))
        .route("/v1/landscape/{group}/curves", get(get_curves))
        .route("/v1/recommend", post(recommend))
        .with_state(AppState { store });
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.fallback(not_found),
    }
}

/// Serves until Ctrl-C.
pub async fn serve(
    store: Arc<ModelStore>,
    addr: std::net::SocketAddr,
    static_dir: Option<PathBuf>,
) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(store, static_dir))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
