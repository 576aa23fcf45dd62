//! HTTP front end for live sessions. The model is shared read-only;
//! requests on one session are serialized by its lock.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use negotiator::agents::{EngineConfig, Policy};
use negotiator::corpus::Vocabulary;
use negotiator::env::{sample_scenario, GeneratorConfig, Selection, NUM_ITEMS};
use negotiator::model::NegotiationModel;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::live::{Event, LiveSession, OutcomeView, SessionError, SessionState, SessionView};

const INDEX_HTML: &str = include_str!("../static/index.html");

pub struct ServiceConfig {
    pub policy: Policy,
    pub engine: EngineConfig,
    pub generator: GeneratorConfig,
    pub seed: u64,
    pub max_sessions: usize,
}

type SessionHandle = Arc<Mutex<LiveSession<'static>>>;

pub struct AppState {
    model: &'static NegotiationModel,
    vocab: &'static Vocabulary,
    cfg: ServiceConfig,
    sessions: Mutex<HashMap<String, SessionHandle>>,
    created: AtomicU64,
}

impl AppState {
    pub fn new(model: &'static NegotiationModel, vocab: &'static Vocabulary, cfg: ServiceConfig) -> Self {
        Self {
            model,
            vocab,
            cfg,
            sessions: Mutex::new(HashMap::new()),
            created: AtomicU64::new(0),
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/", get(|| async { Html(INDEX_HTML) }))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/message", post(post_message))
        .route("/sessions/{id}/selection", post(post_selection))
        .with_state(state)
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    error: String,
    detail: String,
}

impl ApiError {
    fn bad_request(error: &str, detail: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            error: error.into(),
            detail: detail.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.error, "detail": self.detail }))).into_response()
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let status = match e {
            SessionError::Model(_) | SessionError::Corpus(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        Self {
            status,
            error: e.kind().into(),
            detail: e.to_string(),
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize)]
pub struct CreateResponse {
    pub id: String,
    pub pool: [u32; NUM_ITEMS],
    pub values: [u32; NUM_ITEMS],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MessageRequest {
    pub text: String,
}

#[derive(Debug, Serialize)]
pub struct MessageResponse {
    pub events: Vec<Event>,
    pub state: SessionState,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum Take {
    Counts([u32; NUM_ITEMS]),
    Keyword(String),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionRequest {
    pub take: Take,
}

#[derive(Debug, Serialize)]
pub struct SelectionResponse {
    pub agreed: bool,
    pub reward_human: u32,
    pub reward_agent: u32,
    pub agent_values: [u32; NUM_ITEMS],
    pub pareto: Option<bool>,
}

impl From<OutcomeView> for SelectionResponse {
    fn from(o: OutcomeView) -> Self {
        Self {
            agreed: o.agreed,
            reward_human: o.reward_human,
            reward_agent: o.reward_agent,
            agent_values: o.agent_values,
            pareto: o.pareto,
        }
    }
}

fn parse_body<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request("bad_request", e.to_string()))
}

fn lookup(state: &AppState, id: &str) -> Result<SessionHandle, ApiError> {
    state
        .sessions
        .lock()
        .expect("session table lock")
        .get(id)
        .cloned()
        .ok_or_else(|| ApiError {
            status: StatusCode::NOT_FOUND,
            error: "not_found".into(),
            detail: format!("no session {id:?}"),
        })
}

/// Runs `f` on the session off the async executor; agent turns can take a
/// while.
async fn with_session<T, F>(state: Arc<AppState>, id: String, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&mut LiveSession<'static>) -> Result<T, ApiError> + Send + 'static,
{
    let handle = lookup(&state, &id)?;
    tokio::task::spawn_blocking(move || {
        let mut s = handle.lock().expect("session lock");
        f(&mut s)
    })
    .await
    .map_err(|e| ApiError {
        status: StatusCode::INTERNAL_SERVER_ERROR,
        error: "internal".into(),
        detail: e.to_string(),
    })?
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> Result<Json<CreateResponse>, ApiError> {
    let req: CreateRequest = if body.iter().all(u8::is_ascii_whitespace) {
        CreateRequest::default()
    } else {
        parse_body(&body)?
    };
    let now = Instant::now();
    let mut table = state.sessions.lock().expect("session table lock");
    table.retain(|_, s| {
        let mut s = s.lock().expect("session lock");
        s.expire_if_idle(now);
        s.state() != SessionState::Done || now.duration_since(s.last_active()) <= crate::live::IDLE_TIMEOUT
    });
    if table.len() >= state.cfg.max_sessions {
        return Err(ApiError {
            status: StatusCode::SERVICE_UNAVAILABLE,
            error: "at_capacity".into(),
            detail: format!("service holds {} sessions", table.len()),
        });
    }
    let n = state.created.fetch_add(1, Ordering::Relaxed);
    let seed = req.seed.unwrap_or_else(|| state.cfg.seed.wrapping_add(n));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scenario = sample_scenario(&mut rng, &state.cfg.generator)
        .map_err(|e| ApiError::bad_request("scenario", e.to_string()))?;
    let id = format!("s{n:06}");
    let session = LiveSession::new(
        id.clone(),
        state.model,
        state.vocab,
        scenario,
        state.cfg.policy,
        &state.cfg.engine,
        seed,
        now,
    )?;
    table.insert(id.clone(), Arc::new(Mutex::new(session)));
    Ok(Json(CreateResponse {
        id,
        pool: scenario.pool.counts,
        values: scenario.valuation_a.values,
    }))
}

async fn get_session(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<SessionView>, ApiError> {
    with_session(state, id, |s| {
        s.expire_if_idle(Instant::now());
        Ok(s.view())
    })
    .await
    .map(Json)
}

async fn post_message(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<MessageResponse>, ApiError> {
    let req: MessageRequest = parse_body(&body)?;
    with_session(state, id, move |s| {
        let events = s.post_message(&req.text, Instant::now())?;
        Ok(MessageResponse {
            events,
            state: s.state(),
        })
    })
    .await
    .map(Json)
}

async fn post_selection(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<SelectionResponse>, ApiError> {
    let req: SelectionRequest = parse_body(&body)?;
    let take = match req.take {
        Take::Counts(c) => Selection::claim(c),
        Take::Keyword(k) if k == "no_agreement" => Selection::NoAgreement,
        Take::Keyword(k) => {
            return Err(ApiError::bad_request(
                "bad_selection",
                format!("take must be three counts or \"no_agreement\", got {k:?}"),
            ))
        }
    };
    with_session(state, id, move |s| Ok(s.post_selection(take, Instant::now())?.into()))
        .await
        .map(Json)
}
