//! HTTP collection service: hands out forced-choice trials per subject and
//! journals the answers.
//!
//! All mutable state sits behind one lock, so requests are serialized and a
//! report always sees a consistent prefix of the journal.

use std::collections::{BTreeMap, HashMap};
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use image::{ImageFormat, Rgb, RgbImage};
use serde::Deserialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::io_formats::{read_file, to_json_bytes, trials_from_jsonl, FormatError};
use crate::label_model::Source;
use crate::risk_eval::{estimate_risk, Pooling, RiskError};
use crate::trial_engine::{
    rasterize, record_response, render_trial_spec, session_id_for, Choice, ImageFrame, Journal, JournalError,
    RenderError, ResponseRecord, Session, SessionError, SessionStatus, TrialRecord,
};

const CANVAS: Rgb<u8> = Rgb([128, 128, 128]);

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error("trial file lists {0} twice")]
    DuplicateTrial(String),
    #[error("trial file is empty")]
    NoTrials,
    #[error("journal answers unknown trial {0}")]
    UnknownTrial(String),
    #[error("journal replay for subject {subject}: {source}")]
    Replay {
        subject: String,
        #[source]
        source: SessionError,
    },
    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error(transparent)]
    Render(#[from] RenderError),
}

struct Original {
    bytes: Vec<u8>,
    content_type: &'static str,
}

struct Sessions {
    by_id: BTreeMap<String, Session>,
    responses: Vec<ResponseRecord>,
}

struct Shared {
    trials: Vec<TrialRecord>,
    trial_ids: Vec<String>,
    trial_file: PathBuf,
    composites: HashMap<String, Vec<u8>>,
    originals: HashMap<String, Original>,
    journal: Journal,
    sessions: Mutex<Sessions>,
}

#[derive(Clone)]
pub struct AppState(Arc<Shared>);

fn png_bytes(img: &RgbImage) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).expect("in-memory png encode");
    out.into_inner()
}

fn find_original(dir: &Path, image_id: &str) -> Option<(PathBuf, &'static str)> {
    [("png", "image/png"), ("jpg", "image/jpeg"), ("jpeg", "image/jpeg")]
        .into_iter()
        .map(|(ext, ct)| (dir.join(format!("{image_id}.{ext}")), ct))
        .find(|(p, _)| p.is_file())
}

/// Smallest canvas holding every window drawn on an image.
fn canvas_size<'a>(trials: impl Iterator<Item = &'a TrialRecord>) -> (u32, u32) {
    let mut w = 1u32;
    let mut h = 1u32;
    for t in trials {
        for s in [&t.human_segment, &t.algo_segment] {
            let (top, left) = s.window_origin();
            h = h.max((top.max(0) as u32).saturating_add(s.window_size));
            w = w.max((left.max(0) as u32).saturating_add(s.window_size));
            for &(r, c) in &s.pixels {
                h = h.max(r + 1);
                w = w.max(c + 1);
            }
        }
    }
    (w, h)
}

impl AppState {
    /// Loads trials, pre-renders every stimulus and replays the journal.
    ///
    /// Originals come from `images_dir`; an image without a file is drawn on
    /// a plain gray canvas just large enough for its windows.
    pub fn load(trials_path: &Path, images_dir: Option<&Path>, journal_path: &Path) -> Result<Self, ServiceError> {
        let trials = trials_from_jsonl(&read_file(trials_path)?)?;
        if trials.is_empty() {
            return Err(ServiceError::NoTrials);
        }
        let mut trial_ids = Vec::with_capacity(trials.len());
        for t in &trials {
            if trial_ids.contains(&t.trial_id) {
                return Err(ServiceError::DuplicateTrial(t.trial_id.clone()));
            }
            trial_ids.push(t.trial_id.clone());
        }

        let mut by_image: BTreeMap<&str, Vec<&TrialRecord>> = BTreeMap::new();
        for t in &trials {
            by_image.entry(t.image_id.as_str()).or_default().push(t);
        }
        let mut originals = HashMap::new();
        let mut composites = HashMap::new();
        for (image_id, image_trials) in by_image {
            let found = images_dir.and_then(|d| find_original(d, image_id));
            let (base, original) = match found {
                Some((path, content_type)) => {
                    let bytes = read_file(&path)?;
                    let img = image::load_from_memory(&bytes)
                        .map_err(|e| ServiceError::Image { path: path.clone(), message: e.to_string() })?
                        .to_rgb8();
                    (img, Original { bytes, content_type })
                }
                None => {
                    let (w, h) = canvas_size(image_trials.iter().copied());
                    let img = RgbImage::from_pixel(w, h, CANVAS);
                    let bytes = png_bytes(&img);
                    (img, Original { bytes, content_type: "image/png" })
                }
            };
            let frame = ImageFrame { image_id: image_id.to_string(), width: base.width(), height: base.height() };
            for t in image_trials {
                let spec = render_trial_spec(t, &frame)?;
                composites.insert(t.trial_id.clone(), png_bytes(&rasterize(&spec, &base)?));
            }
            originals.insert(image_id.to_string(), original);
        }

        let replay = Journal::replay(journal_path)?;
        let journal = Journal::open(journal_path)?;
        let mut per_subject: BTreeMap<&str, Vec<&ResponseRecord>> = BTreeMap::new();
        for r in &replay.records {
            if !trial_ids.contains(&r.trial_id) {
                return Err(ServiceError::UnknownTrial(r.trial_id.clone()));
            }
            per_subject.entry(r.subject_id.as_str()).or_default().push(r);
        }
        let mut by_id = BTreeMap::new();
        for (subject, records) in per_subject {
            let s = Session::replay(subject, &trial_ids, records)
                .map_err(|source| ServiceError::Replay { subject: subject.to_string(), source })?;
            by_id.insert(s.session_id.clone(), s);
        }

        Ok(Self(Arc::new(Shared {
            trials,
            trial_ids,
            trial_file: trials_path.to_path_buf(),
            composites,
            originals,
            journal,
            sessions: Mutex::new(Sessions { by_id, responses: replay.records }),
        })))
    }

    pub fn router(self) -> Router {
        Router::new()
            .route("/api/sessions", post(create_session))
            .route("/api/sessions/{id}/next", get(next_trial))
            .route("/api/sessions/{id}/response", post(submit_response))
            .route("/api/sessions/{id}/summary", get(summary))
            .route("/api/report", get(report))
            .route("/api/trials/{trial_id}/composite", get(composite))
            .route("/api/images/{image_id}/original", get(original))
            .with_state(self)
    }
}

/// Serves until interrupted.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, state.router())
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

fn error(status: StatusCode, message: impl std::fmt::Display) -> Response {
    (status, Json(json!({ "error": message.to_string() }))).into_response()
}

fn parse_body(body: &Bytes) -> Result<serde_json::Map<String, Value>, Response> {
    match serde_json::from_slice::<Value>(body) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(error(StatusCode::BAD_REQUEST, "body must be a JSON object")),
        Err(e) => Err(error(StatusCode::BAD_REQUEST, format!("malformed JSON: {e}"))),
    }
}

fn lock(state: &AppState) -> std::sync::MutexGuard<'_, Sessions> {
    state.0.sessions.lock().unwrap_or_else(|p| p.into_inner())
}

async fn create_session(State(state): State<AppState>, body: Bytes) -> Response {
    let map = match parse_body(&body) {
        Ok(m) => m,
        Err(r) => return r,
    };
    let subject = match map.get("subject_id") {
        Some(Value::String(s)) if !s.trim().is_empty() => s.clone(),
        _ => return error(StatusCode::BAD_REQUEST, "subject_id must be a nonempty string"),
    };
    match map.get("trial_file_ref") {
        None | Some(Value::Null) => {}
        Some(Value::String(r)) => {
            let file = &state.0.trial_file;
            let name = file.file_name().map(|n| n.to_string_lossy().into_owned());
            if Path::new(r) != file && Some(r) != name.as_ref() {
                return error(StatusCode::BAD_REQUEST, format!("unknown trial file {r:?}"));
            }
        }
        Some(_) => return error(StatusCode::BAD_REQUEST, "trial_file_ref must be a string"),
    }
    let mut sessions = lock(&state);
    let id = session_id_for(&subject);
    if sessions.by_id.contains_key(&id) {
        return error(StatusCode::CONFLICT, format!("subject {subject} already has a session"));
    }
    let session = Session::new(subject, &state.0.trial_ids);
    let n_trials = session.total();
    sessions.by_id.insert(id.clone(), session);
    (StatusCode::CREATED, Json(json!({ "session_id": id, "n_trials": n_trials }))).into_response()
}

fn progress(s: &Session) -> Value {
    json!({ "done": s.cursor, "total": s.total() })
}

async fn next_trial(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Response {
    let sessions = lock(&state);
    let Some(s) = sessions.by_id.get(&id) else {
        return error(StatusCode::NOT_FOUND, format!("no session {id}"));
    };
    let Some(trial_id) = s.current_trial() else {
        return Json(json!({ "status": "complete", "progress": progress(s) })).into_response();
    };
    let trial = state.0.trials.iter().find(|t| t.trial_id == trial_id).expect("sessions only hold known trials");
    Json(json!({
        "status": "active",
        "trial_id": trial_id,
        "composite_image_url": format!("/api/trials/{trial_id}/composite"),
        "original_image_url": format!("/api/images/{}/original", trial.image_id),
        "progress": progress(s),
    }))
    .into_response()
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

async fn submit_response(State(state): State<AppState>, UrlPath(id): UrlPath<String>, body: Bytes) -> Response {
    let map = match parse_body(&body) {
        Ok(m) => m,
        Err(r) => return r,
    };
    let Some(Value::String(trial_id)) = map.get("trial_id") else {
        return error(StatusCode::UNPROCESSABLE_ENTITY, "trial_id must be a string");
    };
    let choice: Choice = match map.get("choice").cloned().map(serde_json::from_value) {
        Some(Ok(c)) => c,
        _ => {
            return error(
                StatusCode::UNPROCESSABLE_ENTITY,
                "choice must be \"left_stronger\" or \"right_stronger\"",
            )
        }
    };
    let Some(rt_ms) = map.get("rt_ms").and_then(Value::as_u64) else {
        return error(StatusCode::UNPROCESSABLE_ENTITY, "rt_ms must be a nonnegative integer");
    };
    let ts = match map.get("ts") {
        None | Some(Value::Null) => now_ms(),
        Some(v) => match v.as_u64() {
            Some(ts) => ts,
            None => return error(StatusCode::UNPROCESSABLE_ENTITY, "ts must be a nonnegative integer"),
        },
    };

    let mut sessions = lock(&state);
    let Some(session) = sessions.by_id.get_mut(&id) else {
        return error(StatusCode::NOT_FOUND, format!("no session {id}"));
    };
    let record = ResponseRecord {
        trial_id: trial_id.clone(),
        subject_id: session.subject_id.clone(),
        choice,
        rt_ms,
        ts,
    };
    match record_response(session, &record, &state.0.journal) {
        Ok(()) => {
            let next_available = session.status == SessionStatus::Active;
            sessions.responses.push(record);
            Json(json!({ "accepted": true, "next_available": next_available })).into_response()
        }
        Err(SessionError::Journal(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
        Err(e) => error(StatusCode::CONFLICT, e),
    }
}

async fn summary(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Response {
    let sessions = lock(&state);
    let Some(s) = sessions.by_id.get(&id) else {
        return error(StatusCode::NOT_FOUND, format!("no session {id}"));
    };
    let mut human = 0usize;
    let mut algorithm = 0usize;
    for r in sessions.responses.iter().filter(|r| r.subject_id == s.subject_id) {
        let t = state.0.trials.iter().find(|t| t.trial_id == r.trial_id).expect("journaled trials are known");
        let picked_left = r.choice == Choice::LeftStronger;
        match (picked_left, t.left) {
            (true, Source::Human) | (false, Source::Algorithm) => human += 1,
            _ => algorithm += 1,
        }
    }
    Json(json!({
        "session_id": s.session_id,
        "subject_id": s.subject_id,
        "status": s.status,
        "done": s.cursor,
        "total": s.total(),
        "human_chosen": human,
        "algorithm_chosen": algorithm,
    }))
    .into_response()
}

#[derive(Deserialize)]
struct ReportQuery {
    pooling: Option<String>,
}

async fn report(State(state): State<AppState>, Query(q): Query<ReportQuery>) -> Response {
    let pooling = match q.pooling.as_deref() {
        None | Some("mode") => Pooling::ModeVote,
        Some("mean") => Pooling::PerSubjectMean,
        Some(other) => return error(StatusCode::BAD_REQUEST, format!("unknown pooling {other:?}")),
    };
    let sessions = lock(&state);
    let complete: Vec<&str> = sessions
        .by_id
        .values()
        .filter(|s| s.status == SessionStatus::Complete)
        .map(|s| s.subject_id.as_str())
        .collect();
    let responses: Vec<ResponseRecord> = sessions
        .responses
        .iter()
        .filter(|r| complete.contains(&r.subject_id.as_str()))
        .cloned()
        .collect();
    if responses.is_empty() {
        return error(StatusCode::NOT_FOUND, "no complete sessions");
    }
    match estimate_risk(&state.0.trials, &responses, pooling) {
        Ok(report) => ([(header::CONTENT_TYPE, "application/json")], to_json_bytes(&report)).into_response(),
        Err(RiskError::NoData) => error(StatusCode::NOT_FOUND, "no data"),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

async fn composite(State(state): State<AppState>, UrlPath(trial_id): UrlPath<String>) -> Response {
    match state.0.composites.get(&trial_id) {
        Some(png) => ([(header::CONTENT_TYPE, "image/png")], png.clone()).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("no trial {trial_id}")),
    }
}

async fn original(State(state): State<AppState>, UrlPath(image_id): UrlPath<String>) -> Response {
    match state.0.originals.get(&image_id) {
        Some(o) => ([(header::CONTENT_TYPE, o.content_type)], o.bytes.clone()).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("no image {image_id}")),
    }
}
