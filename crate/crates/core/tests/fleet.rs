use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use spawnwatch_core::analytics::ManualCount;
use spawnwatch_core::detect::{DetectorNoise, OracleDetector};
use spawnwatch_core::fleet::{
    router, serve_units, AckStatus, ApiConfig, ApiState, CameraUnit, Coordinator, CoordinatorConfig, FleetTopology,
    Hello, SimClock, SimFleet, SimFleetConfig, Target, TelemetryMessage, UnitClient, UnitState, Verb, WireMessage,
    PROTOCOL_VERSION,
};
use spawnwatch_core::simtank::TankConfig;
use spawnwatch_core::{Error, OperationalMode, StageCounts};

fn coordinator(dir: &std::path::Path, tanks: usize, units: usize) -> Arc<Coordinator> {
    let config = CoordinatorConfig {
        command_timeout: Duration::from_millis(300),
        ..CoordinatorConfig::default()
    };
    Coordinator::new(
        FleetTopology::uniform(tanks, units),
        config,
        dir,
        Arc::new(SimClock::new(0.0)),
    )
    .unwrap()
}

fn hello(unit: &str, tank: &str) -> Hello {
    Hello {
        protocol: PROTOCOL_VERSION.into(),
        unit_id: unit.into(),
        tank_id: tank.into(),
        state: None,
    }
}

fn camera(unit: &str, tank: &str) -> CameraUnit {
    CameraUnit::new(
        UnitState::new(unit, tank),
        Arc::new(OracleDetector::new(DetectorNoise::identity(OperationalMode::Surface), 1).unwrap()),
        Arc::new(OracleDetector::new(DetectorNoise::identity(OperationalMode::SubSurface), 2).unwrap()),
        3,
    )
}

/// A unit that answers every command through a local [`CameraUnit`].
async fn responder(addr: std::net::SocketAddr, unit: &str, tank: &str) -> tokio::task::JoinHandle<()> {
    let mut client = UnitClient::connect(addr, hello(unit, tank)).await.unwrap();
    let mut cam = camera(unit, tank);
    tokio::spawn(async move {
        while let Ok(Some(msg)) = client.recv().await {
            if let WireMessage::Command(cmd) = msg {
                let ack = cam.handle(&cmd, 0.0);
                if client.send(&WireMessage::Ack(ack)).await.is_err() {
                    break;
                }
            }
        }
    })
}

async fn listen(coord: &Arc<Coordinator>) -> std::net::SocketAddr {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(serve_units(listener, coord.clone()));
    addr
}

async fn wait_connected(coord: &Coordinator, n: usize) {
    for _ in 0..500 {
        if coord.units().iter().filter(|u| u.connected).count() >= n {
            return;
        }
        tokio::time::sleep(Duration::from_millis(2)).await;
    }
    panic!("units did not connect");
}

#[tokio::test]
async fn tank_mode_switch_over_tcp() {
    let dir = tempfile::tempdir().unwrap();
    let coord = coordinator(dir.path(), 1, 3);
    let addr = listen(&coord).await;
    for u in ["tank-01-a", "tank-01-b", "tank-01-c"] {
        responder(addr, u, "tank-01").await;
    }
    wait_connected(&coord, 3).await;

    let tank = Target::Tank {
        tank_id: "tank-01".into(),
    };
    let acks = coord
        .dispatch(
            tank.clone(),
            Verb::SetMode {
                mode: OperationalMode::SubSurface,
            },
        )
        .await
        .unwrap();
    assert_eq!(acks.len(), 3);
    assert!(acks.iter().all(|a| a.status == AckStatus::Ok));
    assert!(acks
        .iter()
        .all(|a| a.state.as_ref().unwrap().mode == OperationalMode::SubSurface));

    let back = coord
        .dispatch(
            tank,
            Verb::SetMode {
                mode: OperationalMode::Surface,
            },
        )
        .await;
    assert!(matches!(back, Err(Error::IllegalTransition { .. })));

    let acks = coord
        .dispatch(
            Target::Unit {
                unit_id: "tank-01-b".into(),
            },
            Verb::SetInterval { seconds: 300.0 },
        )
        .await
        .unwrap();
    assert_eq!(acks[0].state.as_ref().unwrap().capture_interval_s, 300.0);
}

#[tokio::test]
async fn silent_unit_times_out_individually() {
    let dir = tempfile::tempdir().unwrap();
    let coord = coordinator(dir.path(), 1, 2);
    let addr = listen(&coord).await;
    responder(addr, "tank-01-a", "tank-01").await;
    // Connected but never answers.
    let _mute = UnitClient::connect(addr, hello("tank-01-b", "tank-01")).await.unwrap();
    wait_connected(&coord, 2).await;
    let acks = coord
        .dispatch(
            Target::Tank {
                tank_id: "tank-01".into(),
            },
            Verb::Ping,
        )
        .await
        .unwrap();
    let status: Vec<AckStatus> = acks.iter().map(|a| a.status).collect();
    assert_eq!(status, vec![AckStatus::Ok, AckStatus::Timeout]);
}

#[tokio::test]
async fn handshake_rejections() {
    let dir = tempfile::tempdir().unwrap();
    let coord = coordinator(dir.path(), 1, 1);
    let addr = listen(&coord).await;
    let old = Hello {
        protocol: "spawnwatch/0".into(),
        ..hello("tank-01-a", "tank-01")
    };
    let e = UnitClient::connect(addr, old).await.err().unwrap();
    assert!(e.to_string().contains("unsupported_version"), "{e}");
    let e = UnitClient::connect(addr, hello("nobody", "tank-01"))
        .await
        .err()
        .unwrap();
    assert!(e.to_string().contains("unknown_unit"), "{e}");
    let e = UnitClient::connect(addr, hello("tank-01-a", "tank-02"))
        .await
        .err()
        .unwrap();
    assert!(e.to_string().contains("handshake"), "{e}");
}

#[tokio::test]
async fn telemetry_for_another_unit_is_rejected_but_session_continues() {
    let dir = tempfile::tempdir().unwrap();
    let coord = coordinator(dir.path(), 1, 2);
    let addr = listen(&coord).await;
    let mut client = UnitClient::connect(addr, hello("tank-01-a", "tank-01")).await.unwrap();
    let forged = surface_msg("tank-01-b", 0, 0.0);
    client.send(&WireMessage::Telemetry(forged)).await.unwrap();
    match client.recv().await.unwrap() {
        Some(WireMessage::Error(e)) => assert_eq!(e.code, "rejected"),
        other => panic!("{other:?}"),
    }
    client
        .send(&WireMessage::Telemetry(surface_msg("tank-01-a", 0, 0.0)))
        .await
        .unwrap();
    client.close().await.unwrap();
    assert_eq!(coord.tank_stats("tank-01").unwrap().accepted, 1);
}

fn surface_msg(unit: &str, frame: u64, t: f64) -> TelemetryMessage {
    TelemetryMessage {
        unit_id: unit.into(),
        frame_id: frame,
        timestamp: t,
        mode: OperationalMode::Surface,
        counts: Some(StageCounts {
            eggs: 3,
            advanced: 1,
            ..StageCounts::default()
        }),
        in_focus_count: None,
        detections: None,
        inference_time: 0.01,
        error: None,
    }
}

fn subsurface_msg(unit: &str, frame: u64, t: f64, n: u64) -> TelemetryMessage {
    TelemetryMessage {
        mode: OperationalMode::SubSurface,
        counts: None,
        in_focus_count: Some(n),
        ..surface_msg(unit, frame, t)
    }
}

fn api(coord: Arc<Coordinator>, token: Option<&str>) -> axum::Router {
    router(ApiState::new(
        coord,
        ApiConfig {
            token: token.map(String::from),
            ..ApiConfig::default()
        },
    ))
}

async fn call(
    app: &axum::Router,
    method: &str,
    uri: &str,
    body: Option<Value>,
    token: Option<&str>,
) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header(header::AUTHORIZATION, format!("Bearer {t}"));
    }
    let req = match body {
        Some(b) => req
            .header(header::CONTENT_TYPE, "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

#[tokio::test]
async fn read_endpoints_carry_schema_version() {
    let dir = tempfile::tempdir().unwrap();
    let coord = coordinator(dir.path(), 2, 3);
    for t in 0..30 {
        coord.ingest(surface_msg("tank-01-a", t, t as f64 * 10.0)).unwrap();
    }
    let app = api(coord, None);
    for uri in [
        "/api/v1/schema",
        "/api/v1/tanks",
        "/api/v1/tanks/tank-01",
        "/api/v1/tanks/tank-01/series",
        "/api/v1/units",
        "/api/v1/units/tank-01-a",
        "/api/v1/units/tank-01-a/series",
        "/api/v1/health",
        "/api/v1/alerts",
        "/api/v1/alerts?tank=tank-02",
        "/api/v1/reports/labor",
    ] {
        let (status, body) = call(&app, "GET", uri, None, None).await;
        assert_eq!(status, StatusCode::OK, "{uri}: {body}");
        assert_eq!(body["schema_version"], 1, "{uri}");
        assert!(body["timestamp"].is_number(), "{uri}");
    }
    let (_, tanks) = call(&app, "GET", "/api/v1/tanks", None, None).await;
    assert_eq!(tanks["data"].as_array().unwrap().len(), 2);
    let (_, series) = call(&app, "GET", "/api/v1/tanks/tank-01/series", None, None).await;
    // 30 points at 10 s: those older than the 60 s window are applied.
    assert_eq!(series["data"]["fertilization"].as_array().unwrap().len(), 23);
    assert_eq!(series["data"]["fertilization"][0]["f"], 0.25);
    let (_, labor) = call(&app, "GET", "/api/v1/reports/labor", None, None).await;
    assert_eq!(labor["data"]["report"]["hours_saved"], 5720.0);
    let (_, labor) = call(&app, "GET", "/api/v1/reports/labor?n_tanks=1", None, None).await;
    assert_eq!(labor["data"]["report"]["samples_per_tank"], 288.0);

    for uri in [
        "/api/v1/tanks/tank-09",
        "/api/v1/units/ghost",
        "/api/v1/reports/eval",
        "/api/v1/nope",
    ] {
        let (status, body) = call(&app, "GET", uri, None, None).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{uri}");
        assert_eq!(body["schema_version"], 1);
        assert!(body["error"]["message"].is_string());
    }
}

#[tokio::test]
async fn write_endpoints() {
    let dir = tempfile::tempdir().unwrap();
    let coord = coordinator(dir.path(), 1, 3);
    coord.ingest(subsurface_msg("tank-01-a", 0, 0.0, 5)).unwrap();
    let app = api(coord.clone(), Some("s3cret"));

    let cmd = json!({"target": {"kind": "tank", "tank_id": "tank-01"}, "verb": "ping"});
    let (status, body) = call(&app, "POST", "/api/v1/commands", Some(cmd.clone()), None).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    assert_eq!(body["error"]["code"], "unauthorized");
    let (status, body) = call(&app, "POST", "/api/v1/commands", Some(cmd), Some("s3cret")).await;
    assert_eq!(status, StatusCode::OK);
    // No unit is connected.
    assert_eq!(body["data"].as_array().unwrap().len(), 3);
    assert!(body["data"]
        .as_array()
        .unwrap()
        .iter()
        .all(|a| a["status"] == "timeout"));

    let back = json!({"target": {"kind": "unit", "unit_id": "tank-01-a"}, "verb": "set_mode", "mode": "surface"});
    let (status, body) = call(&app, "POST", "/api/v1/commands", Some(back), Some("s3cret")).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert!(body["error"]["message"].as_str().unwrap().contains("surface"));

    let (status, body) = call(
        &app,
        "POST",
        "/api/v1/tanks/tank-01/manual-counts",
        Some(json!({"time": 0.0, "tank_total": 5000})),
        Some("s3cret"),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert!(body["data"]["calibration"].is_null());
    for t in 1..200 {
        coord
            .ingest(subsurface_msg("tank-01-a", t, t as f64 * 10.0, 5))
            .unwrap();
    }
    let (_, tank) = call(&app, "GET", "/api/v1/tanks/tank-01", None, None).await;
    assert_eq!(tank["data"]["calibration"]["scaling_factor"], 1000.0);
    assert_eq!(tank["data"]["latest_tank_estimate"], 5000.0);

    let plan = json!({"substrate_units": 10.0, "target_density_per_liter": 5.0, "settlement_tank_liters": 50.0});
    let (status, body) = call(&app, "POST", "/api/v1/tanks/tank-01/harvest-plan", Some(plan), None).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["data"]["plan"]["required_larvae"], 2500.0);
    assert_eq!(body["data"]["plan"]["proportion"], 0.5);

    let (status, _) = call(
        &app,
        "POST",
        "/api/v1/tanks/tank-01/alerts/99/ack",
        None,
        Some("s3cret"),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn event_stream_delivers_updates() {
    let dir = tempfile::tempdir().unwrap();
    let coord = coordinator(dir.path(), 1, 1);
    let app = api(coord.clone(), None);
    let resp = app
        .oneshot(Request::get("/api/v1/events").body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()[header::CONTENT_TYPE], "text/event-stream");
    let mut body = resp.into_body();
    coord
        .add_manual_count(
            "tank-01",
            ManualCount {
                time: 0.0,
                tank_total: 10,
                method: String::new(),
            },
        )
        .unwrap();
    let frame = tokio::time::timeout(Duration::from_secs(2), body.frame())
        .await
        .unwrap()
        .unwrap()
        .unwrap();
    let text = String::from_utf8(frame.into_data().unwrap().to_vec()).unwrap();
    assert!(text.starts_with("event: manual_count\n"), "{text}");
    let data: Value = serde_json::from_str(text.lines().nth(1).unwrap().strip_prefix("data: ").unwrap()).unwrap();
    assert_eq!(data["schema_version"], 1);
    assert_eq!(data["data"]["manual"]["tank_total"], 10);
}

#[tokio::test]
async fn simulated_fleet_switches_modes_and_calibrates() {
    let dir = tempfile::tempdir().unwrap();
    let clock = Arc::new(SimClock::new(0.0));
    let coord = Coordinator::new(
        FleetTopology::uniform(2, 3),
        CoordinatorConfig::default(),
        dir.path(),
        clock.clone(),
    )
    .unwrap();
    let tank = TankConfig {
        volume_liters: 5.0,
        surface_fov_area_fraction: 0.01,
        fov_volume_fraction: 0.01,
        ..TankConfig::default()
    };
    let until = tank.timeline().t1 + 2.0 * 3600.0;
    let mut fleet = SimFleet::new(
        SimFleetConfig {
            tank,
            seed: 3,
            ..SimFleetConfig::default()
        },
        coord.clone(),
        clock,
    )
    .unwrap();
    let summary = fleet.run_until(until, None).await.unwrap();
    assert_eq!(summary.rejected, 0);
    assert_eq!(summary.frames, 2 * 3 * (until / 10.0) as u64);
    coord.finalize().unwrap();
    for t in coord.tanks() {
        assert_eq!(t.mode, OperationalMode::SubSurface);
        assert!(t.calibration.is_some(), "{}", t.tank_id);
        assert!(t.latest_tank_estimate.unwrap() > 0.0);
    }
    assert!(coord
        .units()
        .iter()
        .all(|u| u.state.as_ref().unwrap().mode == OperationalMode::SubSurface));
}
