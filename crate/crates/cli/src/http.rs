//! The gateway's HTTP surface.
//!
//! `POST /v1/predict` is the authenticated client endpoint; the admin
//! endpoints publish commitments and expose counters. Prediction handling
//! (which ends in an fsync per watermarked response) runs on the blocking
//! pool.

use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};

use markgate_core::gateway::{Gateway, GatewayError, WireResponse};
use markgate_core::hashcore::{canonicalize, CanonicalInput, Dtype};

#[derive(Debug, Deserialize)]
pub struct PredictRequest {
    pub input_b64: String,
    pub shape: Vec<u32>,
    pub dtype: String,
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
}

pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(ErrorBody {
                error: self.message,
            }),
        )
            .into_response()
    }
}

impl From<GatewayError> for ApiError {
    fn from(e: GatewayError) -> Self {
        let status = match &e {
            GatewayError::Unauthorized => StatusCode::UNAUTHORIZED,
            GatewayError::Model(markgate_core::model::ModelError::ShapeMismatch { .. })
            | GatewayError::Mapping(_)
            | GatewayError::Hash(_)
            | GatewayError::Permute(_) => StatusCode::BAD_REQUEST,
            GatewayError::EmptyBundle(_) | GatewayError::ModelNotRegistered => StatusCode::CONFLICT,
            GatewayError::Store(markgate_core::triggerstore::StoreError::UnknownClient(_)) => {
                StatusCode::NOT_FOUND
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError {
            status,
            message: e.to_string(),
        }
    }
}

fn parse_input(req: &PredictRequest) -> Result<CanonicalInput, ApiError> {
    if req.dtype != "u8" {
        return Err(ApiError::bad_request(format!(
            "unsupported dtype {:?}",
            req.dtype
        )));
    }
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(&req.input_b64)
        .map_err(|e| ApiError::bad_request(format!("input_b64: {e}")))?;
    canonicalize(Dtype::U8, &req.shape, bytes).map_err(|e| ApiError::bad_request(e.to_string()))
}

fn client_from_headers(gateway: &Gateway, headers: &HeaderMap) -> Result<String, ApiError> {
    let key = headers
        .get("x-api-key")
        .and_then(|v| v.to_str().ok())
        .ok_or_else(|| ApiError {
            status: StatusCode::UNAUTHORIZED,
            message: "missing X-Api-Key".into(),
        })?;
    Ok(gateway.authenticate(key)?)
}

async fn predict(
    State(gateway): State<Arc<Gateway>>,
    headers: HeaderMap,
    Json(req): Json<PredictRequest>,
) -> Result<Json<WireResponse>, ApiError> {
    let client_id = client_from_headers(&gateway, &headers)?;
    let input = parse_input(&req)?;
    let gw = gateway.clone();
    let resp = tokio::task::spawn_blocking(move || gw.handle_predict(&client_id, &input))
        .await
        .map_err(|e| ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: e.to_string(),
        })??;
    Ok(Json(resp))
}

async fn register_model(State(gateway): State<Arc<Gateway>>) -> Result<Response, ApiError> {
    let gw = gateway.clone();
    let entry = tokio::task::spawn_blocking(move || gw.register_model())
        .await
        .map_err(|e| ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: e.to_string(),
        })??;
    Ok(Json(entry).into_response())
}

async fn snapshot(
    State(gateway): State<Arc<Gateway>>,
    Path(client_id): Path<String>,
) -> Result<Response, ApiError> {
    let gw = gateway.clone();
    let receipt = tokio::task::spawn_blocking(move || gw.snapshot_register(&client_id))
        .await
        .map_err(|e| ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: e.to_string(),
        })??;
    Ok(Json(receipt).into_response())
}

async fn stats(State(gateway): State<Arc<Gateway>>) -> Response {
    Json(gateway.stats()).into_response()
}

/// Builds the service router around a gateway.
pub fn router(gateway: Arc<Gateway>) -> Router {
    Router::new()
        .route("/v1/predict", post(predict))
        .route("/v1/admin/register-model", post(register_model))
        .route("/v1/admin/snapshot/:client_id", post(snapshot))
        .route("/v1/admin/stats", get(stats))
        .with_state(gateway)
}
