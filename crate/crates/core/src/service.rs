//! HTTP service for live retrieval sessions.
//!
//! A witness (human or scripted) creates a session, reads the shown
//! candidate, submits per-attribute feedback and eventually confirms a match.
//! Retrieval is always greedy and never repeats a candidate within a session.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dialog_model::{step, ModelParameters, RoundInput};
use crate::feedback_sim::{DisclosureMode, DisclosureSchedule, RelevanceVector};
use crate::gallery::Gallery;
use crate::retriever::{greedy_candidate, scan_top_k, FeatureMatrix};
use crate::rng::SeedStream;
use crate::trainer::{Checkpoint, EpisodeSeeds};

pub const DEFAULT_TTL: Duration = Duration::from_secs(30 * 60);

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub rounds: usize,
    pub k: usize,
    pub mode: DisclosureMode,
    pub schedule: DisclosureSchedule,
    pub ttl: Duration,
    /// Directory holding `<id>.jpg` or `<id>.png` images.
    pub asset_dir: Option<PathBuf>,
    /// Seeds sessions created without an explicit seed.
    pub seed: u64,
}

impl ServiceConfig {
    pub fn from_checkpoint(c: &Checkpoint) -> Self {
        Self {
            rounds: c.config.rounds,
            k: c.config.k,
            mode: c.config.mode,
            schedule: c.config.schedule.clone(),
            ttl: DEFAULT_TTL,
            asset_dir: None,
            seed: c.config.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TranscriptEntry {
    pub round: usize,
    pub candidate_id: String,
    pub relevance: RelevanceVector,
}

struct Session {
    id: String,
    mode: DisclosureMode,
    schedule: DisclosureSchedule,
    h: Vec<f64>,
    /// Feedback rounds completed.
    completed: usize,
    candidate: usize,
    shown: Vec<usize>,
    done: bool,
    matched: bool,
    transcript: Vec<TranscriptEntry>,
    last_used: Instant,
}

type SessionHandle = Arc<tokio::sync::Mutex<Session>>;

pub struct AppState {
    gallery: Gallery,
    model: Option<ModelParameters>,
    config: ServiceConfig,
    sessions: Mutex<HashMap<String, SessionHandle>>,
    counter: AtomicU64,
}

impl AppState {
    pub fn new(gallery: Gallery, model: Option<ModelParameters>, config: ServiceConfig) -> crate::Result<Self> {
        if let Some(p) = &model {
            let d = p.dims();
            crate::error::check_len("gallery attributes", d.attrs, gallery.attrs())?;
            crate::error::check_len("gallery features", d.features, gallery.feat_dim())?;
        }
        if config.mode.masks() && config.schedule.rounds() < config.rounds {
            return Err(crate::Error::Config("schedule is shorter than the round limit".into()));
        }
        Ok(Self {
            gallery,
            model,
            config,
            sessions: Mutex::new(HashMap::new()),
            counter: AtomicU64::new(0),
        })
    }

    fn lookup(&self, id: &str) -> Result<SessionHandle, ApiError> {
        self.sweep();
        self.sessions
            .lock()
            .expect("session table poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown session {id}")))
    }

    /// Drop sessions idle for longer than the TTL. Sessions busy in a
    /// request are skipped.
    fn sweep(&self) {
        let ttl = self.config.ttl;
        self.sessions
            .lock()
            .expect("session table poisoned")
            .retain(|_, s| match s.try_lock() {
                Ok(s) => s.last_used.elapsed() < ttl,
                Err(_) => true,
            });
    }

    fn session_count(&self) -> usize {
        self.sessions.lock().expect("session table poisoned").len()
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }

    fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

/// Parse a JSON body: syntax errors are 400, shape errors 422.
fn parse_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    let bytes: &[u8] = if body.is_empty() { b"{}" } else { body };
    serde_json::from_slice(bytes).map_err(|e| {
        let status = if e.is_data() {
            StatusCode::UNPROCESSABLE_ENTITY
        } else {
            StatusCode::BAD_REQUEST
        };
        ApiError::new(status, e.to_string())
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateCard {
    pub id: String,
    pub attributes: Vec<i8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_url: Option<String>,
}

fn card(state: &AppState, index: usize) -> CandidateCard {
    let r = state.gallery.record(index);
    CandidateCard {
        id: r.id.to_owned(),
        attributes: r.attributes.to_vec(),
        image_url: state
            .config
            .asset_dir
            .as_ref()
            .map(|_| format!("/gallery/items/{}/image", r.id)),
    }
}

fn budget(state: &AppState, s: &Session) -> Option<usize> {
    if s.done {
        return None;
    }
    let attrs = state.gallery.attrs();
    if s.mode.masks() {
        s.schedule.budget(s.completed, attrs).ok()
    } else {
        Some(attrs)
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateRequest {
    mode: Option<String>,
    schedule: Option<Vec<f64>>,
    seed: Option<u64>,
}

async fn create_session(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let req: CreateRequest = parse_body(&body)?;
    if state.model.is_none() {
        return Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no model loaded"));
    }
    let mode = match &req.mode {
        Some(m) => m
            .parse::<DisclosureMode>()
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?,
        None => state.config.mode,
    };
    let schedule = match req.schedule {
        Some(p) => DisclosureSchedule::new(p).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?,
        None => state.config.schedule.clone(),
    };
    if mode.masks() && schedule.rounds() < state.config.rounds {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            format!("schedule needs {} entries", state.config.rounds),
        ));
    }
    if state.gallery.is_empty() {
        return Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "gallery is empty"));
    }
    state.sweep();
    let serial = state.counter.fetch_add(1, Ordering::Relaxed);
    let seed = req
        .seed
        .unwrap_or_else(|| SeedStream::new(state.config.seed).child("session").index(serial).value());
    let candidate = EpisodeSeeds::new(SeedStream::new(seed))
        .initial(state.gallery.len())
        .map_err(|e| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, e.to_string()))?;
    let id = format!("s{serial:08x}{:016x}", SeedStream::new(seed).child("token").index(serial).value());
    let hidden = state.model.as_ref().map_or(0, |p| p.dims().hidden);
    let session = Session {
        id: id.clone(),
        mode,
        schedule,
        h: vec![0.0; hidden],
        completed: 0,
        candidate,
        shown: vec![candidate],
        done: false,
        matched: false,
        transcript: Vec::new(),
        last_used: Instant::now(),
    };
    let body = json!({
        "session_id": id,
        "round": 1,
        "rounds": state.config.rounds,
        "mode": mode,
        "candidate": card(&state, candidate),
        "disclosure_budget": budget(&state, &session),
    });
    state
        .sessions
        .lock()
        .expect("session table poisoned")
        .insert(id, Arc::new(tokio::sync::Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

#[derive(Debug, Deserialize)]
struct FeedbackRequest {
    relevance: Vec<i64>,
}

async fn submit_feedback(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<serde_json::Value>, ApiError> {
    let handle = state.lookup(&id)?;
    let mut s = handle.lock().await;
    s.last_used = Instant::now();
    if s.done {
        return Err(ApiError::conflict("session is finished"));
    }
    let req: FeedbackRequest = parse_body(&body)?;
    let attrs = state.gallery.attrs();
    if req.relevance.len() != attrs {
        return Err(ApiError::unprocessable(format!(
            "relevance must have {attrs} entries, got {}",
            req.relevance.len()
        )));
    }
    if let Some(bad) = req.relevance.iter().find(|v| !(-1..=1).contains(*v)) {
        return Err(ApiError::unprocessable(format!("relevance value {bad} is not -1, 0 or 1")));
    }
    let relevance = RelevanceVector::new(req.relevance.iter().map(|&v| v as i8).collect())
        .map_err(|e| ApiError::unprocessable(e.to_string()))?;
    let allowed = budget(&state, &s).unwrap_or(0);
    if relevance.nonzero_count() > allowed {
        return Err(ApiError::unprocessable(format!(
            "round {} allows at most {allowed} disclosed attributes, got {}",
            s.completed + 1,
            relevance.nonzero_count()
        )));
    }

    let p = state
        .model
        .as_ref()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no model loaded"))?;
    let cand = state.gallery.record(s.candidate);
    let input = RoundInput {
        relevance: relevance.clone(),
        cand_attrs: cand.attributes.to_vec(),
        cand_features: cand.features.to_vec(),
    };
    let internal = |e: crate::Error| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string());
    let (_, agg) = step(p, &input, &s.h, s.mode).map_err(internal)?;
    let result = scan_top_k(FeatureMatrix::of(&state.gallery), &agg.s, state.config.k, &s.shown);
    let next = match result {
        Ok(r) => Some(greedy_candidate(&r).map_err(internal)?),
        Err(crate::Error::EmptyResult) => None,
        Err(e) => return Err(internal(e)),
    };

    let round = s.completed + 1;
    s.transcript.push(TranscriptEntry {
        round,
        candidate_id: cand.id.to_owned(),
        relevance,
    });
    s.h = agg.gru.h;
    s.completed = round;
    match next {
        Some(n) => {
            s.candidate = n;
            s.shown.push(n);
        }
        // Every record has been shown.
        None => s.done = true,
    }
    if s.completed >= state.config.rounds {
        s.done = true;
    }
    Ok(Json(json!({
        "round": s.completed + 1,
        "candidate": card(&state, s.candidate),
        "done": s.done,
        "disclosure_budget": budget(&state, &s),
    })))
}

#[derive(Debug, Deserialize)]
struct ConfirmRequest {
    candidate_id: String,
}

async fn confirm_match(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<serde_json::Value>, ApiError> {
    let handle = state.lookup(&id)?;
    let mut s = handle.lock().await;
    s.last_used = Instant::now();
    let req: ConfirmRequest = parse_body(&body)?;
    if s.matched {
        return Err(ApiError::conflict("session already confirmed"));
    }
    let current = state.gallery.record(s.candidate).id;
    if req.candidate_id != current {
        return Err(ApiError::conflict(format!(
            "{} is not the current candidate",
            req.candidate_id
        )));
    }
    s.done = true;
    s.matched = true;
    Ok(Json(json!({ "done": true, "matched": true, "rounds": s.completed + 1 })))
}

async fn get_state(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let handle = state.lookup(&id)?;
    let mut s = handle.lock().await;
    s.last_used = Instant::now();
    let history: Vec<&str> = s.shown.iter().map(|&i| state.gallery.ids()[i].as_str()).collect();
    Ok(Json(json!({
        "session_id": s.id,
        "mode": s.mode,
        "round": s.completed + 1,
        "rounds": state.config.rounds,
        "done": s.done,
        "matched": s.matched,
        "candidate": card(&state, s.candidate),
        "disclosure_budget": budget(&state, &s),
        "transcript": s.transcript,
        "history": history,
    })))
}

async fn get_item(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<CandidateCard>, ApiError> {
    let index = state
        .gallery
        .index_of(&id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown gallery item {id}")))?;
    Ok(Json(card(&state, index)))
}

async fn get_image(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let not_found = || ApiError::new(StatusCode::NOT_FOUND, format!("no image for {id}"));
    let dir = state.config.asset_dir.as_ref().ok_or_else(not_found)?;
    if state.gallery.index_of(&id).is_none() || id.contains(['/', '\\']) || id.starts_with('.') {
        return Err(not_found());
    }
    for (ext, mime) in [("jpg", "image/jpeg"), ("jpeg", "image/jpeg"), ("png", "image/png")] {
        if let Ok(bytes) = tokio::fs::read(dir.join(format!("{id}.{ext}"))).await {
            return Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response());
        }
    }
    Err(not_found())
}

async fn healthz(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "model_loaded": state.model.is_some(),
        "gallery_size": state.gallery.len(),
        "attrs": state.gallery.attrs(),
        "sessions": state.session_count(),
    }))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_state))
        .route("/sessions/{id}/feedback", post(submit_feedback))
        .route("/sessions/{id}/confirm", post(confirm_match))
        .route("/gallery/items/{id}", get(get_item))
        .route("/gallery/items/{id}/image", get(get_image))
        .route("/healthz", get(healthz))
        .with_state(state)
}

/// Bind `addr` and serve until `shutdown` resolves.
pub async fn serve(
    addr: SocketAddr,
    state: Arc<AppState>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}
