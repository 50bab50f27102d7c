//! An API instance on a manual clock, plus the HTTP-versus-slash-command
//! convergence check.

#![allow(dead_code)]

use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use chrono::{DateTime, TimeDelta, TimeZone, Utc};
use coursebot::http::{router, AppState};
use coursebot::service::{Clock, Service, ServiceConfig};
use coursebot_core::rate_limit::LimiterConfig;
use coursebot_core::sim::{generate_course, SimParams};
use coursebot_core::Timestamp;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

pub const TOKEN: &str = "test-token";

/// Wednesday of week one, five minutes into the tutorial.
pub fn tutorial_time() -> Timestamp {
    Utc.with_ymd_and_hms(2024, 10, 16, 14, 5, 0).unwrap()
}

pub struct TestApp {
    pub router: Router,
    pub service: Service,
    pub now: Arc<Mutex<Timestamp>>,
    pub dir: tempfile::TempDir,
}

impl TestApp {
    pub fn start(students: u32, at: Timestamp) -> Self {
        Self::start_in(tempfile::tempdir().unwrap(), students, at)
    }

    pub fn start_in(dir: tempfile::TempDir, students: u32, at: Timestamp) -> Self {
        let now = Arc::new(Mutex::new(at));
        let read = now.clone();
        let clock: Clock = Arc::new(move || *read.lock().unwrap());
        let config = ServiceConfig {
            course: generate_course(&SimParams { weeks: 2, students, seed: 1 }),
            data_dir: dir.path().to_path_buf(),
            limiter: LimiterConfig::default(),
            catch_up: false,
            tick: Duration::from_millis(5),
        };
        let service = Service::start(config, clock).unwrap();
        let router = router(AppState {
            service: service.clone(),
            token: TOKEN.into(),
        });
        Self { router, service, now, dir }
    }

    pub fn advance(&self, by: TimeDelta) {
        *self.now.lock().unwrap() += by;
    }

    pub async fn send(&self, method: Method, path: &str, body: Option<Value>, token: Option<&str>) -> (StatusCode, Value) {
        let mut req = Request::builder().method(method).uri(path);
        if let Some(t) = token {
            req = req.header("authorization", format!("Bearer {t}"));
        }
        let req = match body {
            Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
            None => req.body(Body::empty()),
        }
        .unwrap();
        let resp = self.router.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        let value = if bytes.is_empty() {
            Value::Null
        } else {
            serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
        };
        (status, value)
    }

    pub async fn get(&self, path: &str) -> (StatusCode, Value) {
        self.send(Method::GET, path, None, Some(TOKEN)).await
    }

    pub async fn post(&self, path: &str, body: Value) -> (StatusCode, Value) {
        self.send(Method::POST, path, Some(body), Some(TOKEN)).await
    }

    /// Let deferred sends drain: step the clock and wait for the loop.
    pub async fn settle(&self) {
        self.service
            .call(|h, _| h.settle().unwrap())
            .await
            .unwrap();
    }

    pub fn stop(self) -> tempfile::TempDir {
        self.service.shutdown();
        self.dir
    }
}

pub fn dm(from: &str, text: &str) -> Value {
    json!({"type": "DIRECT_MESSAGE", "from": from, "text": text})
}

pub fn slash(from: &str, name: &str, args: Value) -> Value {
    json!({"type": "SLASH_COMMAND", "from": from, "name": name, "args": args})
}

/// Replace timestamps with a placeholder and message ids with zero, leaving
/// everything else intact.
pub fn normalize(v: &mut Value) {
    match v {
        Value::String(s) if DateTime::parse_from_rfc3339(s).is_ok() => *s = "<time>".into(),
        Value::Array(items) => items.iter_mut().for_each(normalize),
        Value::Object(map) => {
            for (k, item) in map.iter_mut() {
                if k == "message_id" && item.is_number() {
                    *item = json!(0);
                } else {
                    normalize(item);
                }
            }
        }
        _ => {}
    }
}

/// What a flow leaves behind: sessions, roster CSV, guild output and change log.
#[derive(Debug, PartialEq)]
pub struct Snapshot {
    pub sessions: Value,
    pub csv: Vec<Vec<String>>,
    pub outbound: Value,
    pub changes: Value,
}

async fn snapshot(app: &TestApp) -> Snapshot {
    app.settle().await;
    let (_, mut sessions) = app.get("/api/v1/attendance/sessions").await;
    normalize(&mut sessions);
    let (_, mut changes) = app.get("/api/v1/live?since=0").await;
    normalize(&mut changes);
    let mut outbound = app
        .service
        .call(|h, _| {
            h.transcript()
                .outbound()
                .map(|e| json!({"action": e.action, "message_id": e.message_id}))
                .collect::<Value>()
        })
        .await
        .unwrap();
    normalize(&mut outbound);
    let path = app.dir.path().join("tutorial_session/w01-tutorial-wed/attendance.csv");
    let csv = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(&path)
        .map(|mut r| {
            r.records()
                .map(|rec| {
                    rec.unwrap()
                        .iter()
                        .map(|f| if DateTime::parse_from_rfc3339(f).is_ok() { "<time>".into() } else { f.to_string() })
                        .collect()
                })
                .collect()
        })
        .unwrap_or_default();
    Snapshot {
        sessions,
        csv,
        outbound,
        changes,
    }
}

/// Students and what they type during the check.
pub const SUBMISSIONS: [(&str, &str); 6] = [
    ("s001", "g5"),
    ("s002", "  G5 "),
    ("s003", "g6"),
    ("s001", "g5"),
    ("s004", "G5"),
    ("s003", "g5"),
];

async fn students_reply(app: &TestApp) -> Result<(), String> {
    for (from, text) in SUBMISSIONS {
        app.advance(TimeDelta::seconds(2));
        let (status, body) = app.post("/api/v1/guild/events", dm(from, text)).await;
        if status != StatusCode::OK {
            return Err(format!("DM from {from}: {status} {body}"));
        }
    }
    app.advance(TimeDelta::seconds(2));
    Ok(())
}

/// Run the attendance flow once through the REST endpoints and once as
/// slash commands typed by the instructor, ten minutes apart on separate
/// data directories, and compare what each leaves behind.
pub async fn convergence() -> Result<(Snapshot, Snapshot), String> {
    let via_http = {
        let app = TestApp::start(6, tutorial_time());
        let (status, session) = app.post("/api/v1/attendance/sessions", json!({"keyword": "G5"})).await;
        if status != StatusCode::CREATED {
            return Err(format!("start: {status} {session}"));
        }
        let id = session["session_id"].as_str().ok_or("no session_id")?.to_string();
        students_reply(&app).await?;
        let (status, body) = app.post(&format!("/api/v1/attendance/sessions/{id}/stop"), json!({})).await;
        if status != StatusCode::OK {
            return Err(format!("stop: {status} {body}"));
        }
        let snap = snapshot(&app).await;
        app.stop();
        snap
    };
    let via_slash = {
        let app = TestApp::start(6, tutorial_time() + TimeDelta::minutes(10));
        let (status, body) = app
            .post("/api/v1/guild/events", slash("i01", "attendance-start", json!({"keyword": "G5"})))
            .await;
        if status != StatusCode::OK || !body["rejection"].is_null() {
            return Err(format!("slash start: {status} {body}"));
        }
        students_reply(&app).await?;
        let (status, body) = app
            .post("/api/v1/guild/events", slash("i01", "attendance-stop", json!({})))
            .await;
        if status != StatusCode::OK || !body["rejection"].is_null() {
            return Err(format!("slash stop: {status} {body}"));
        }
        let snap = snapshot(&app).await;
        app.stop();
        snap
    };
    Ok((via_http, via_slash))
}

/// First field that differs between two snapshots, if any.
pub fn difference(a: &Snapshot, b: &Snapshot) -> Option<String> {
    if a.sessions != b.sessions {
        return Some(format!("sessions differ:\n{}\n{}", a.sessions, b.sessions));
    }
    if a.csv != b.csv {
        return Some(format!("roster CSV differs:\n{:?}\n{:?}", a.csv, b.csv));
    }
    if a.outbound != b.outbound {
        return Some(format!("guild output differs:\n{}\n{}", a.outbound, b.outbound));
    }
    if a.changes != b.changes {
        return Some(format!("change log differs:\n{}\n{}", a.changes, b.changes));
    }
    None
}
