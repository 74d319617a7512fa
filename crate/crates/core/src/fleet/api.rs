use std::convert::Infallible;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::sse::{Event as SseEvent, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::broadcast;

use crate::analytics::{harvest_plan, labor_report, LaborParams, ManualCount};
use crate::error::Error;

use super::{Coordinator, Event, Target, Verb};

/// Version of the JSON shapes served under `/api/v1`.
pub const API_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ApiConfig {
    /// Static bearer token required on write endpoints; `None` leaves them open.
    pub token: Option<String>,
    pub labor: LaborParams,
}

#[derive(Clone)]
pub struct ApiState {
    pub coordinator: Arc<Coordinator>,
    pub config: Arc<ApiConfig>,
}

impl ApiState {
    pub fn new(coordinator: Arc<Coordinator>, config: ApiConfig) -> Self {
        ApiState {
            coordinator,
            config: Arc::new(config),
        }
    }
}

struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, code) = match &e {
            Error::UnknownTank(_) | Error::UnknownUnit(_) => (StatusCode::NOT_FOUND, "not_found"),
            Error::IllegalTransition { .. } => (StatusCode::CONFLICT, "illegal_transition"),
            Error::InvalidArgument(_) | Error::InvalidConfig(_) | Error::Protocol(_) | Error::Calibration(_) => {
                (StatusCode::UNPROCESSABLE_ENTITY, "invalid")
            }
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({
            "schema_version": API_SCHEMA_VERSION,
            "error": {"code": self.code, "message": self.message},
        });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult = Result<Json<Value>, ApiError>;

fn envelope(state: &ApiState, data: impl Serialize) -> ApiResult {
    let data = serde_json::to_value(data).map_err(|e| ApiError::from(Error::Json(e)))?;
    Ok(Json(json!({
        "schema_version": API_SCHEMA_VERSION,
        "timestamp": state.coordinator.now(),
        "data": data,
    })))
}

/// Builds the `/api/v1` router.
pub fn router(state: ApiState) -> Router {
    let writes = Router::new()
        .route("/commands", post(post_command))
        .route("/tanks/{tank_id}/manual-counts", post(post_manual_count))
        .route("/tanks/{tank_id}/alerts/{alert_id}/ack", post(post_ack))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    let api = Router::new()
        .route("/schema", get(get_schema))
        .route("/tanks", get(get_tanks))
        .route("/tanks/{tank_id}", get(get_tank))
        .route("/tanks/{tank_id}/series", get(get_series))
        .route("/tanks/{tank_id}/harvest-plan", post(post_harvest_plan))
        .route("/units", get(get_units))
        .route("/units/{unit_id}", get(get_unit))
        .route("/units/{unit_id}/series", get(get_unit_series))
        .route("/health", get(get_health))
        .route("/alerts", get(get_alerts))
        .route("/events", get(get_events))
        .route("/reports/labor", get(get_labor))
        .route("/reports/eval", get(get_eval))
        .merge(writes)
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint") });
    Router::new().nest("/api/v1", api).with_state(state)
}

async fn require_token(State(state): State<ApiState>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.config.token {
        let presented = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(token.as_str()) {
            return ApiError::new(
                StatusCode::UNAUTHORIZED,
                "unauthorized",
                "missing or wrong bearer token",
            )
            .into_response();
        }
    }
    next.run(req).await
}

async fn get_schema(State(s): State<ApiState>) -> ApiResult {
    envelope(&s, schema_document())
}

async fn get_tanks(State(s): State<ApiState>) -> ApiResult {
    envelope(&s, s.coordinator.tanks())
}

async fn get_tank(State(s): State<ApiState>, Path(tank_id): Path<String>) -> ApiResult {
    envelope(&s, s.coordinator.tank_summary(&tank_id)?)
}

async fn get_series(State(s): State<ApiState>, Path(tank_id): Path<String>) -> ApiResult {
    let snap = s.coordinator.series(&tank_id)?;
    envelope(&s, &*snap)
}

async fn get_units(State(s): State<ApiState>) -> ApiResult {
    envelope(&s, s.coordinator.units())
}

async fn get_unit(State(s): State<ApiState>, Path(unit_id): Path<String>) -> ApiResult {
    let unit = s
        .coordinator
        .units()
        .into_iter()
        .find(|u| u.unit_id == unit_id)
        .ok_or_else(|| ApiError::from(Error::UnknownUnit(unit_id)))?;
    envelope(&s, unit)
}

async fn get_unit_series(State(s): State<ApiState>, Path(unit_id): Path<String>) -> ApiResult {
    let series = s.coordinator.unit_series(&unit_id)?.ok_or_else(|| {
        ApiError::new(
            StatusCode::NOT_FOUND,
            "not_found",
            format!("no series for unit {unit_id}"),
        )
    })?;
    envelope(&s, series)
}

async fn get_health(State(s): State<ApiState>) -> ApiResult {
    let rows: Vec<Value> = s
        .coordinator
        .tanks()
        .into_iter()
        .map(|t| {
            json!({
                "tank_id": t.tank_id,
                "health": t.health,
                "latest_fertilization": t.latest_fertilization,
                "open_alerts": t.open_alerts,
            })
        })
        .collect();
    envelope(&s, rows)
}

#[derive(Debug, Deserialize)]
struct AlertQuery {
    tank: Option<String>,
}

async fn get_alerts(State(s): State<ApiState>, Query(q): Query<AlertQuery>) -> ApiResult {
    envelope(&s, s.coordinator.alerts(q.tank.as_deref())?)
}

async fn post_ack(State(s): State<ApiState>, Path((tank_id, alert_id)): Path<(String, u64)>) -> ApiResult {
    if !s.coordinator.acknowledge_alert(&tank_id, alert_id)? {
        return Err(ApiError::new(
            StatusCode::NOT_FOUND,
            "not_found",
            format!("no alert {alert_id} on {tank_id}"),
        ));
    }
    envelope(
        &s,
        json!({"tank_id": tank_id, "alert_id": alert_id, "acknowledged": true}),
    )
}

fn sse_event(e: &Event, now: f64) -> SseEvent {
    let name = match e {
        Event::Telemetry { .. } => "telemetry",
        Event::SeriesUpdated { .. } => "series_updated",
        Event::Alert { .. } => "alert",
        Event::AlertAcknowledged { .. } => "alert_acknowledged",
        Event::ManualCount { .. } => "manual_count",
        Event::Command { .. } => "command",
        Event::UnitConnected { .. } => "unit_connected",
        Event::UnitDisconnected { .. } => "unit_disconnected",
    };
    let body = json!({"schema_version": API_SCHEMA_VERSION, "timestamp": now, "data": e});
    SseEvent::default().event(name).data(body.to_string())
}

async fn get_events(State(s): State<ApiState>) -> Sse<impl Stream<Item = Result<SseEvent, Infallible>>> {
    let rx = s.coordinator.subscribe();
    let coord = s.coordinator.clone();
    let events = stream::unfold((rx, coord), |(mut rx, coord)| async move {
        let ev = match rx.recv().await {
            Ok(e) => sse_event(&e, coord.now()),
            Err(broadcast::error::RecvError::Lagged(n)) => SseEvent::default()
                .event("lagged")
                .data(json!({"schema_version": API_SCHEMA_VERSION, "skipped": n}).to_string()),
            Err(broadcast::error::RecvError::Closed) => return None,
        };
        Some((Ok(ev), (rx, coord)))
    });
    Sse::new(events).keep_alive(KeepAlive::new().interval(Duration::from_secs(15)))
}

#[derive(Debug, Default, Deserialize)]
struct LaborQuery {
    n_tanks: Option<f64>,
    surface_hours: Option<f64>,
    surface_samples_per_hour: Option<f64>,
    subsurface_days: Option<f64>,
    minutes_per_sample: Option<f64>,
    operator_hours: Option<f64>,
}

async fn get_labor(State(s): State<ApiState>, Query(q): Query<LaborQuery>) -> ApiResult {
    let d = s.config.labor;
    let params = LaborParams {
        n_tanks: q.n_tanks.unwrap_or(d.n_tanks),
        surface_hours: q.surface_hours.unwrap_or(d.surface_hours),
        surface_samples_per_hour: q.surface_samples_per_hour.unwrap_or(d.surface_samples_per_hour),
        subsurface_days: q.subsurface_days.unwrap_or(d.subsurface_days),
        minutes_per_sample: q.minutes_per_sample.unwrap_or(d.minutes_per_sample),
        operator_hours: q.operator_hours.unwrap_or(d.operator_hours),
    };
    let report = labor_report(&params)?;
    envelope(&s, json!({"params": params, "report": report}))
}

async fn get_eval(State(s): State<ApiState>) -> ApiResult {
    match s.coordinator.eval_report() {
        Some(r) => envelope(&s, r),
        None => Err(ApiError::new(
            StatusCode::NOT_FOUND,
            "not_found",
            "no evaluation report loaded",
        )),
    }
}

#[derive(Debug, Deserialize)]
struct CommandRequest {
    target: Target,
    #[serde(flatten)]
    verb: Verb,
}

async fn post_command(State(s): State<ApiState>, Json(req): Json<CommandRequest>) -> ApiResult {
    let acks = s.coordinator.dispatch(req.target, req.verb).await?;
    envelope(&s, acks)
}

#[derive(Debug, Deserialize)]
struct ManualCountRequest {
    /// Defaults to the coordinator's current time.
    time: Option<f64>,
    tank_total: u64,
    #[serde(default)]
    method: String,
}

async fn post_manual_count(
    State(s): State<ApiState>,
    Path(tank_id): Path<String>,
    Json(req): Json<ManualCountRequest>,
) -> ApiResult {
    let manual = ManualCount {
        time: req.time.unwrap_or_else(|| s.coordinator.now()),
        tank_total: req.tank_total,
        method: req.method,
    };
    let calibration = s.coordinator.add_manual_count(&tank_id, manual.clone())?;
    envelope(&s, json!({"manual": manual, "calibration": calibration}))
}

#[derive(Debug, Deserialize)]
struct HarvestRequest {
    substrate_units: f64,
    target_density_per_liter: f64,
    settlement_tank_liters: f64,
    /// Defaults to the tank's latest rolling estimate.
    tank_estimate: Option<f64>,
}

async fn post_harvest_plan(
    State(s): State<ApiState>,
    Path(tank_id): Path<String>,
    Json(req): Json<HarvestRequest>,
) -> ApiResult {
    let estimate = match req.tank_estimate {
        Some(e) => e,
        None => s
            .coordinator
            .tank_summary(&tank_id)?
            .latest_tank_estimate
            .ok_or_else(|| {
                ApiError::new(
                    StatusCode::CONFLICT,
                    "no_estimate",
                    format!("{tank_id} has no tank estimate yet"),
                )
            })?,
    };
    let plan = harvest_plan(
        estimate,
        req.substrate_units,
        req.target_density_per_liter,
        req.settlement_tank_liters,
    )?;
    envelope(&s, json!({"tank_id": tank_id, "tank_estimate": estimate, "plan": plan}))
}

fn schema_document() -> Value {
    let ep = |method: &str, path: &str, auth: bool, body: Value, data: &str| json!({"method": method, "path": path, "requires_token": auth, "body": body, "data": data});
    json!({
        "api": "spawnwatch",
        "schema_version": API_SCHEMA_VERSION,
        "base": "/api/v1",
        "envelope": {"schema_version": "integer", "timestamp": "seconds since run start", "data": "endpoint payload"},
        "error": {"schema_version": "integer", "error": {"code": "string", "message": "string"}},
        "endpoints": [
            ep("GET", "/schema", false, Value::Null, "this document"),
            ep("GET", "/tanks", false, Value::Null, "TankSummary[]"),
            ep("GET", "/tanks/{tank_id}", false, Value::Null, "TankSummary"),
            ep("GET", "/tanks/{tank_id}/series", false, Value::Null, "SeriesSnapshot"),
            ep("POST", "/tanks/{tank_id}/harvest-plan", false,
               json!({"substrate_units": "number", "target_density_per_liter": "number",
                      "settlement_tank_liters": "number", "tank_estimate": "number?"}),
               "{tank_id, tank_estimate, plan: HarvestPlan}"),
            ep("POST", "/tanks/{tank_id}/manual-counts", true,
               json!({"time": "number?", "tank_total": "integer", "method": "string?"}),
               "{manual: ManualCount, calibration: Calibration?}"),
            ep("POST", "/tanks/{tank_id}/alerts/{alert_id}/ack", true, Value::Null, "{tank_id, alert_id, acknowledged}"),
            ep("GET", "/units", false, Value::Null, "UnitStatus[]"),
            ep("GET", "/units/{unit_id}", false, Value::Null, "UnitStatus"),
            ep("GET", "/units/{unit_id}/series", false, Value::Null, "SeriesSnapshot"),
            ep("GET", "/health", false, Value::Null, "{tank_id, health, latest_fertilization, open_alerts}[]"),
            ep("GET", "/alerts?tank=", false, Value::Null, "Alert[]"),
            ep("GET", "/events", false, Value::Null,
               "text/event-stream; event names: telemetry, series_updated, alert, alert_acknowledged, manual_count, command, unit_connected, unit_disconnected, lagged"),
            ep("GET", "/reports/labor", false, Value::Null, "{params: LaborParams, report: LaborReport}"),
            ep("GET", "/reports/eval", false, Value::Null, "EvalReport"),
            ep("POST", "/commands", true,
               json!({"target": {"kind": "unit|tank", "unit_id|tank_id": "string"},
                      "verb": "set_mode|set_interval|power_cycle|ping",
                      "mode": "surface|subsurface", "seconds": "number", "downtime_s": "number"}),
               "Ack[]"),
        ],
        "status_codes": {
            "401": "write endpoint without the configured bearer token",
            "404": "unknown tank, unit, alert or endpoint",
            "409": "illegal mode transition, or no tank estimate for a harvest plan",
            "422": "invalid input",
        },
    })
}
