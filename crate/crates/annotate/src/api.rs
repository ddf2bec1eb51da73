//! REST routes over [`Service`].

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use tower_http::services::ServeDir;

use crate::model::ServiceError;
use crate::service::{CreateProject, FreezeRequest, RatingRequest, Service, Stage1Request};

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) | ServiceError::WrongStage { .. } => StatusCode::CONFLICT,
            ServiceError::Validation(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Forbidden(_) => StatusCode::FORBIDDEN,
            ServiceError::Unauthorized => StatusCode::UNAUTHORIZED,
            ServiceError::Io { .. } | ServiceError::Corrupt(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status.is_server_error() {
            log::error!("{self}");
        }
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

type ApiResult<T> = Result<T, ServiceError>;

fn bearer(headers: &HeaderMap) -> Option<&str> {
    headers.get(header::AUTHORIZATION)?.to_str().ok()?.strip_prefix("Bearer ").map(str::trim)
}

fn require_admin(svc: &Service, headers: &HeaderMap) -> ApiResult<()> {
    match bearer(headers) {
        Some(t) if svc.is_admin(t) => Ok(()),
        Some(_) => Err(ServiceError::Forbidden("admin token required".into())),
        None => Err(ServiceError::Unauthorized),
    }
}

/// Admins may act for any rater; a rater token only for its own rater.
fn require_rater(svc: &Service, headers: &HeaderMap, project: &str, rater: &str) -> ApiResult<()> {
    let token = bearer(headers).ok_or(ServiceError::Unauthorized)?;
    if svc.is_admin(token) {
        return Ok(());
    }
    let state = svc.state();
    let owner = state.project(project)?.rater_for_token(token).ok_or(ServiceError::Unauthorized)?;
    if owner == rater {
        Ok(())
    } else {
        Err(ServiceError::Forbidden(format!("token does not belong to rater {rater:?}")))
    }
}

type Svc = State<Arc<Service>>;

async fn create_project(State(svc): Svc, headers: HeaderMap, Json(req): Json<CreateProject>) -> ApiResult<Response> {
    require_admin(&svc, &headers)?;
    Ok((StatusCode::CREATED, Json(svc.create_project(req)?)).into_response())
}

async fn project_summary(State(svc): Svc, headers: HeaderMap, Path(id): Path<String>) -> ApiResult<Response> {
    require_admin(&svc, &headers)?;
    Ok(Json(svc.summary(&id)?).into_response())
}

#[derive(Deserialize)]
struct RaterQuery {
    rater: String,
}

async fn tasks(State(svc): Svc, headers: HeaderMap, Path(id): Path<String>, Query(q): Query<RaterQuery>) -> ApiResult<Response> {
    require_rater(&svc, &headers, &id, &q.rater)?;
    Ok(Json(svc.tasks(&id, &q.rater)?).into_response())
}

async fn stage1(State(svc): Svc, headers: HeaderMap, Json(req): Json<Stage1Request>) -> ApiResult<Response> {
    require_rater(&svc, &headers, &req.project, &req.rater)?;
    Ok(Json(svc.submit_stage1(req)?).into_response())
}

async fn freeze(State(svc): Svc, headers: HeaderMap, Path(id): Path<String>, Json(req): Json<FreezeRequest>) -> ApiResult<Response> {
    require_admin(&svc, &headers)?;
    Ok(Json(svc.freeze(&id, req)?).into_response())
}

async fn rating(State(svc): Svc, headers: HeaderMap, Json(req): Json<RatingRequest>) -> ApiResult<Response> {
    require_rater(&svc, &headers, &req.project, &req.rater)?;
    Ok(Json(svc.submit_rating(req)?).into_response())
}

async fn close(State(svc): Svc, headers: HeaderMap, Path(id): Path<String>) -> ApiResult<Response> {
    require_admin(&svc, &headers)?;
    Ok(Json(svc.close(&id)?).into_response())
}

#[derive(Deserialize)]
struct ExportQuery {
    #[serde(default)]
    format: Option<String>,
}

async fn export(State(svc): Svc, headers: HeaderMap, Path(id): Path<String>, Query(q): Query<ExportQuery>) -> ApiResult<Response> {
    require_admin(&svc, &headers)?;
    let bundle = svc.export(&id)?;
    let csv = |body: String| ([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], body).into_response();
    Ok(match q.format.as_deref().unwrap_or("json") {
        "json" => Json(bundle).into_response(),
        "difficulty" => csv(bundle.difficulty_csv()),
        "difficulty_matrix" => csv(bundle.difficulty_matrix_csv()),
        "ratings" => csv(bundle.label_ratings_csv()),
        "codes" => csv(bundle.stage1_codes_csv()),
        other => {
            return Err(ServiceError::Validation(format!(
                "unknown export format {other:?} (json, difficulty, difficulty_matrix, ratings, codes)"
            )))
        }
    })
}

/// All routes; when `ui_dir` is given its files are served for every other path.
pub fn router(svc: Arc<Service>, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/projects", post(create_project))
        .route("/projects/{id}", get(project_summary))
        .route("/projects/{id}/tasks", get(tasks))
        .route("/projects/{id}/freeze", post(freeze))
        .route("/projects/{id}/close", post(close))
        .route("/projects/{id}/export", get(export))
        .route("/stage1", post(stage1))
        .route("/stage2/ratings", post(rating))
        .with_state(svc);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serves `router` on `listener` until the process is stopped.
pub async fn serve(listener: tokio::net::TcpListener, router: Router) -> std::io::Result<()> {
    log::info!("annotation service listening on {}", listener.local_addr()?);
    axum::serve(listener, router).await
}
