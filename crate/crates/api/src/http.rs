//! HTTP surface for the instructor dashboard.
//!
//! Everything under `/api/v1` except `health` needs `Authorization: Bearer
//! <token>`. Mutations are issued as slash commands from the API user, so
//! they go through the same validation as commands typed in the guild.

use std::sync::Arc;
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use coursebot_core::analytics::export_report;
use coursebot_core::bot::Change;
use coursebot_core::dispatch::DispatchResult;
use coursebot_core::gateway::{GatewayError, Harness, ScenarioEvent, ScenarioStep};
use coursebot_core::store::DataStore;
use coursebot_core::survey::{SurveyDefinition, SurveyResults};
use coursebot_core::GuildEvent;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::service::{Service, ServiceError};

/// Longest a `/live` request may wait for new changes.
pub const MAX_LIVE_WAIT: Duration = Duration::from_secs(30);

#[derive(Clone)]
pub struct AppState {
    pub service: Service,
    pub token: Arc<str>,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: String,
    pub message: String,
}

impl ApiError {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        Self {
            status: status_of(code),
            code: code.into(),
            message: message.into(),
        }
    }
}

/// HTTP status for an error code.
pub fn status_of(code: &str) -> StatusCode {
    match code {
        "UNAUTHORIZED" => StatusCode::UNAUTHORIZED,
        "PERMISSION_DENIED" | "NOT_INSTRUCTOR" => StatusCode::FORBIDDEN,
        "UNKNOWN_ACTIVITY" | "UNKNOWN_SESSION" | "UNKNOWN_SURVEY" | "UNKNOWN_USER" | "TARGET_MISSING" => {
            StatusCode::NOT_FOUND
        }
        "SESSION_ALREADY_OPEN" | "NO_OPEN_SESSION" | "ALREADY_LAUNCHED" | "ALREADY_ANSWERED" | "STALE_SESSION" => {
            StatusCode::CONFLICT
        }
        "ARG_INVALID" | "EMPTY_KEYWORD" | "EMPTY_ROSTER" | "INVALID_DEFINITION" | "INVALID_BODY"
        | "UNKNOWN_COMMAND" | "UNKNOWN_COMPONENT" | "FOREIGN_MESSAGE" | "NON_MONOTONE_SCENARIO" => {
            StatusCode::UNPROCESSABLE_ENTITY
        }
        "SERVICE_STOPPED" => StatusCode::SERVICE_UNAVAILABLE,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.code, "message": self.message}))).into_response()
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        match &e {
            ServiceError::Stopped => ApiError::new("SERVICE_STOPPED", e.to_string()),
            ServiceError::Gateway(g) => ApiError::new(g.code(), e.to_string()),
            ServiceError::Store(s) => ApiError::new(s.code(), e.to_string()),
            ServiceError::NoInstructor => ApiError::new("CONFIG_INVALID", e.to_string()),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::new("INVALID_BODY", e.body_text())
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: AppState) -> Router {
    let protected = Router::new()
        .route("/report", get(report))
        .route("/attendance/sessions", get(list_sessions).post(start_session))
        .route("/attendance/sessions/{id}", get(get_session))
        .route("/attendance/sessions/{id}/stop", post(stop_session))
        .route("/surveys/{id}/launch", post(launch_survey))
        .route("/surveys/{id}/results", get(survey_results))
        .route("/live", get(live))
        .route("/guild/events", post(guild_event))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .route("/api/v1/health", get(health))
        .nest("/api/v1", protected)
        .with_state(state)
}

async fn require_token(State(state): State<AppState>, headers: HeaderMap, request: Request, next: Next) -> Response {
    let presented = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    if presented != Some(&*state.token) {
        return ApiError::new("UNAUTHORIZED", "missing or invalid bearer token").into_response();
    }
    next.run(request).await
}

async fn health() -> Json<Value> {
    Json(json!({"status": "ok"}))
}

async fn report(State(state): State<AppState>) -> ApiResult<Response> {
    let dir = state.service.data_dir().clone();
    // Run on the loop thread so the CSV files are never read mid-append.
    let doc = state
        .service
        .call(move |h, _| export_report(&DataStore::new(dir), Some(&h.bot().state.course)))
        .await?
        .map_err(|e| ApiError::new(e.code(), e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "application/json")], doc.to_json()).into_response())
}

async fn list_sessions(State(state): State<AppState>) -> ApiResult<Json<Value>> {
    let sessions = state
        .service
        .call(|h, _| json!({"sessions": h.bot().state.attendance.sessions()}))
        .await?;
    Ok(Json(sessions))
}

fn session_json(h: &Harness, id: &str) -> ApiResult<Value> {
    h.bot()
        .state
        .attendance
        .session(id)
        .map(|s| json!(s))
        .ok_or_else(|| ApiError::new("UNKNOWN_SESSION", format!("no attendance session `{id}`")))
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    state.service.call(move |h, _| session_json(h, &id)).await?.map(Json)
}

fn rejected(result: &DispatchResult) -> Option<ApiError> {
    result.rejection.as_ref().map(|r| ApiError::new(r.code, r.message.clone()))
}

fn command(h: &mut Harness, event: GuildEvent) -> ApiResult<DispatchResult> {
    let result = h.deliver(event).map_err(|e| ApiError::new(e.code(), e.to_string()))?;
    match rejected(&result) {
        Some(err) => Err(err),
        None => Ok(result),
    }
}

#[derive(Debug, Deserialize)]
struct StartSession {
    #[serde(default)]
    activity_id: Option<String>,
    keyword: String,
}

async fn start_session(
    State(state): State<AppState>,
    body: Result<Json<StartSession>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let Json(body) = body?;
    let user = state.service.api_user().clone();
    let session = state
        .service
        .call(move |h, now| {
            let mut args = vec![("keyword", body.keyword.as_str())];
            if let Some(a) = &body.activity_id {
                args.push(("activity_id", a.as_str()));
            }
            command(h, GuildEvent::slash_command(now, &user, "attendance-start", args))?;
            let book = &h.bot().state.attendance;
            let opened = book
                .sessions()
                .iter()
                .filter(|s| s.is_open())
                .max_by_key(|s| s.opened_at)
                .expect("a session was just opened");
            Ok::<_, ApiError>(json!(opened))
        })
        .await??;
    Ok((StatusCode::CREATED, Json(session)))
}

async fn stop_session(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let user = state.service.api_user().clone();
    let session = state
        .service
        .call(move |h, now| {
            let session = h
                .bot()
                .state
                .attendance
                .session(&id)
                .ok_or_else(|| ApiError::new("UNKNOWN_SESSION", format!("no attendance session `{id}`")))?;
            if !session.is_open() {
                return Err(ApiError::new("NO_OPEN_SESSION", format!("session `{id}` is already closed")));
            }
            let activity_id = session.activity.id.clone();
            command(
                h,
                GuildEvent::slash_command(now, &user, "attendance-stop", [("activity_id", activity_id.as_str())]),
            )?;
            session_json(h, &id)
        })
        .await??;
    Ok(Json(session))
}

async fn launch_survey(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let user = state.service.api_user().clone();
    let launched = state
        .service
        .call(move |h, now| {
            command(h, GuildEvent::slash_command(now, &user, "survey-launch", [("activity_id", id.as_str())]))?;
            let invited = h.bot().state.surveys.sessions(&id).count();
            Ok::<_, ApiError>(json!({"survey_id": id, "invited": invited, "launched_at": now}))
        })
        .await??;
    Ok(Json(launched))
}

fn results_of(h: &Harness, dir: &std::path::Path, id: &str) -> ApiResult<SurveyResults> {
    let state = &h.bot().state;
    if state.surveys.is_launched(id) {
        return state.surveys.aggregate(id).map_err(|e| ApiError::new(e.code(), e.to_string()));
    }
    // Launched by an earlier run: tally the persisted answers instead.
    let unknown = || ApiError::new("UNKNOWN_SURVEY", format!("survey `{id}` has not been launched"));
    let activity = state.activity(id).ok_or_else(unknown)?;
    let def = SurveyDefinition::from_template(&state.template(activity.kind), activity)
        .map_err(|e| ApiError::new(e.code(), e.to_string()))?;
    let store = DataStore::new(dir);
    let category = def.category();
    if !store.path_of(&category).exists() {
        return Err(unknown());
    }
    let rows = store
        .load_records(&category)
        .map_err(|e| ApiError::new(e.code(), e.to_string()))?;
    SurveyResults::from_rows(&def, &rows).map_err(|e| ApiError::new(e.code(), e.to_string()))
}

async fn survey_results(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<SurveyResults>> {
    let dir = state.service.data_dir().clone();
    state.service.call(move |h, _| results_of(h, &dir, &id)).await?.map(Json)
}

#[derive(Debug, Deserialize)]
struct LiveQuery {
    #[serde(default)]
    since: u64,
    #[serde(default)]
    timeout_ms: u64,
}

/// Changes with `seq > since`; waits up to `timeout_ms` when there are none yet.
async fn live(State(state): State<AppState>, Query(q): Query<LiveQuery>) -> ApiResult<Json<Value>> {
    let mut seq = state.service.changes();
    if *seq.borrow() <= q.since && q.timeout_ms > 0 {
        let wait = Duration::from_millis(q.timeout_ms).min(MAX_LIVE_WAIT);
        let _ = tokio::time::timeout(wait, seq.wait_for(|s| *s > q.since)).await;
    }
    let since = q.since;
    let changes: Vec<Change> = state
        .service
        .call(move |h, _| h.bot().state.changes.since(since).to_vec())
        .await?;
    let cursor = changes.last().map_or(since, |c| c.seq);
    Ok(Json(json!({"cursor": cursor, "changes": changes})))
}

/// Inject a guild event as if a member had acted in the guild.
async fn guild_event(
    State(state): State<AppState>,
    body: Result<Json<ScenarioEvent>, JsonRejection>,
) -> ApiResult<Json<Value>> {
    let Json(event) = body?;
    let result = state
        .service
        .call(move |h, now| {
            let event = h.resolve(&ScenarioStep { at: now, event })?;
            h.deliver(event)
        })
        .await?
        .map_err(|e: GatewayError| ApiError::new(e.code(), e.to_string()))?;
    Ok(Json(json!(result)))
}
