//! Read-only JSON-over-HTTP facade over a trained checkpoint.
//!
//! Endpoints:
//!
//! * `GET /meta`
//! * `GET /items/{id}/neighbors?n=N`
//! * `POST /control`
//! * `GET /users/{id}/components`
//!
//! Every endpoint answers 503 until a [`Snapshot`] has been installed, and
//! errors are JSON objects `{"error": code, "message": text}`.

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use macrid::control::{select_trajectory, ControlQuery, ControlTrajectory};
use macrid::corpus::{InteractionMatrix, SplitSpec};
use macrid::metrics::confidences;
use macrid::model::{infer_posteriors, ConceptAssignment, ModelParams, UserPosterior};
use macrid::Error;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::{Arc, OnceLock};
use tower_http::cors::CorsLayer;

pub const DEFAULT_NEIGHBORS: usize = 10;

/// Immutable state shared by all handlers once loaded.
pub struct Snapshot {
    params: ModelParams,
    assignment: ConceptAssignment,
    concepts: Vec<usize>,
    item_ids: Vec<String>,
    item_index: HashMap<String, usize>,
    user_index: HashMap<String, usize>,
    user_rows: Vec<Vec<u32>>,
    posteriors: Vec<UserPosterior>,
}

impl Snapshot {
    /// Builds the snapshot and caches the posterior of every user. Item
    /// indices in `users` refer to `item_ids`.
    pub fn new(
        params: ModelParams,
        item_ids: Vec<String>,
        users: Vec<(String, Vec<u32>)>,
    ) -> macrid::Result<Self> {
        params.validate()?;
        if item_ids.len() != params.n_items() {
            return Err(Error::Dimension(format!(
                "{} item ids for {} items",
                item_ids.len(),
                params.n_items()
            )));
        }
        let rows: Vec<&[u32]> = users.iter().map(|(_, r)| r.as_slice()).collect();
        let (assignment, posteriors) = infer_posteriors(&params, &rows)?;
        let concepts = assignment.concepts();
        let item_index = item_ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        let user_index = users.iter().enumerate().map(|(u, (s, _))| (s.clone(), u)).collect();
        let user_rows = users.into_iter().map(|(_, r)| r).collect();
        Ok(Self {
            params,
            assignment,
            concepts,
            item_ids,
            item_index,
            user_index,
            user_rows,
            posteriors,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn meta(&self) -> Meta {
        Meta {
            m: self.params.n_items(),
            k: self.params.k(),
            d: self.params.d(),
            tau: self.params.tau,
            sigma0: self.params.sigma0,
            counts: self.assignment.counts(),
        }
    }

    /// The `n` items of the same concept with the highest cosine similarity
    /// to `item`, ties by ascending index.
    pub fn neighbors(&self, item: usize, n: usize) -> Vec<(usize, f64)> {
        let h = self.params.item_reps.row(item);
        let k = self.concepts[item];
        let mut scored: Vec<(usize, f64)> = (0..self.params.n_items())
            .filter(|&i| i != item && self.concepts[i] == k)
            .map(|i| (i, cosine(h, self.params.item_reps.row(i))))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(n);
        scored
    }

    pub fn components(&self, user: usize) -> Vec<Component> {
        let conf = confidences(&self.assignment, &self.user_rows[user]);
        let post = &self.posteriors[user];
        (0..self.params.k())
            .map(|k| Component {
                k,
                confidence: conf[k],
                mu: post.mu.row(k).to_vec(),
                sigma: post.sigma.row(k).to_vec(),
            })
            .collect()
    }

    /// Resolves an anchor to the vector being altered.
    pub fn anchor(&self, anchor: &Anchor) -> Result<Vec<f32>, ApiError> {
        match anchor {
            Anchor::Item { item } => {
                let i = self.item_index.get(item).ok_or_else(|| {
                    ApiError::bad_request(format!("unknown anchor item {item:?}"))
                })?;
                Ok(self.params.item_reps.row(*i).to_vec())
            }
            Anchor::User { user, k } => {
                let u = self.user_index.get(user).ok_or_else(|| {
                    ApiError::bad_request(format!("unknown anchor user {user:?}"))
                })?;
                if *k >= self.params.k() {
                    return Err(ApiError::bad_request(format!(
                        "component {k} out of {}",
                        self.params.k()
                    )));
                }
                Ok(self.posteriors[*u].mu.row(*k).to_vec())
            }
        }
    }

    pub fn control(&self, req: &ControlRequest) -> Result<ControlResponse, ApiError> {
        let d = self.params.d();
        if req.dim >= d {
            return Err(ApiError::bad_request(format!("dim {} out of {d}", req.dim)));
        }
        let mut q = ControlQuery::new(self.anchor(&req.anchor)?, req.dim);
        q.b = req.b.unwrap_or(q.b);
        q.gamma = req.gamma.unwrap_or(q.gamma);
        q.beam_width = req.beam.unwrap_or(q.beam_width);
        q.tau = req.tau;
        let trajectory = select_trajectory(&q, &self.params)?;
        let item_ids = trajectory.items.iter().map(|&i| self.item_ids[i].clone()).collect();
        Ok(ControlResponse { item_ids, trajectory })
    }
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    dot / ((na + 1e-8) * (nb + 1e-8))
}

/// Users of `corpus` with the items the service may see: the fold-in part
/// for held-out users of `split`, the full row otherwise. Item indices are
/// remapped to `item_ids`.
pub fn corpus_users(
    corpus: &InteractionMatrix,
    split: Option<&SplitSpec>,
    item_ids: &[String],
) -> macrid::Result<Vec<(String, Vec<u32>)>> {
    let index: HashMap<&str, u32> = item_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i as u32))
        .collect();
    let remap = corpus
        .item_vocab()
        .iter()
        .map(|s| {
            index
                .get(s.as_str())
                .copied()
                .ok_or_else(|| Error::Format(format!("corpus item {s:?} is not in the checkpoint")))
        })
        .collect::<macrid::Result<Vec<u32>>>()?;
    let mut foldin: HashMap<u32, &[u32]> = HashMap::new();
    if let Some(split) = split {
        for h in split.validation.iter().chain(&split.test) {
            foldin.insert(h.user, &h.foldin);
        }
    }
    Ok((0..corpus.n_users())
        .map(|u| {
            let row = foldin.get(&(u as u32)).copied().unwrap_or(corpus.row(u));
            let mut items: Vec<u32> = row.iter().map(|&i| remap[i as usize]).collect();
            items.sort_unstable();
            (corpus.user_vocab()[u].clone(), items)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub d: usize,
    pub tau: f64,
    pub sigma0: f64,
    /// Items per concept under the hard assignment.
    pub counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: String,
    pub similarity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborsResponse {
    pub item: String,
    pub concept: usize,
    pub neighbors: Vec<Neighbor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub k: usize,
    pub confidence: f64,
    pub mu: Vec<f32>,
    pub sigma: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentsResponse {
    pub user: String,
    pub components: Vec<Component>,
}

/// An item representation, or component `k` of a user's posterior mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Anchor {
    Item { item: String },
    User { user: String, k: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlRequest {
    pub anchor: Anchor,
    pub dim: usize,
    pub b: Option<usize>,
    pub gamma: Option<f64>,
    pub beam: Option<usize>,
    pub tau: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlResponse {
    /// External ids of `trajectory.items`.
    pub item_ids: Vec<String>,
    #[serde(flatten)]
    pub trajectory: ControlTrajectory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eligible: Option<usize>,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                error: code.into(),
                message: message.into(),
                eligible: None,
            },
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    pub fn unavailable() -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "loading", "model is still loading")
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::InsufficientItems { eligible, .. } => {
                let mut err =
                    Self::new(StatusCode::UNPROCESSABLE_ENTITY, "insufficient_items", e.to_string());
                err.body.eligible = Some(eligible);
                err
            }
            Error::Dimension(_) | Error::Precondition(_) => Self::bad_request(e.to_string()),
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

/// Handle to the snapshot, empty until [`AppState::install`] is called.
#[derive(Clone, Default)]
pub struct AppState {
    slot: Arc<OnceLock<Arc<Snapshot>>>,
}

impl AppState {
    pub fn loaded(snapshot: Snapshot) -> Self {
        let state = Self::default();
        state.install(snapshot);
        state
    }

    /// Installs the snapshot; later calls are ignored.
    pub fn install(&self, snapshot: Snapshot) {
        let _ = self.slot.set(Arc::new(snapshot));
    }

    fn get(&self) -> Result<Arc<Snapshot>, ApiError> {
        self.slot.get().cloned().ok_or_else(ApiError::unavailable)
    }
}

async fn meta(State(state): State<AppState>) -> Result<Json<Meta>, ApiError> {
    Ok(Json(state.get()?.meta()))
}

async fn neighbors(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(query): Query<HashMap<String, String>>,
) -> Result<Json<NeighborsResponse>, ApiError> {
    let snap = state.get()?;
    let n = match query.get("n") {
        None => DEFAULT_NEIGHBORS,
        Some(s) => s
            .parse()
            .map_err(|_| ApiError::bad_request(format!("n must be a count, got {s:?}")))?,
    };
    let item = *snap
        .item_index
        .get(&id)
        .ok_or_else(|| ApiError::not_found(format!("unknown item {id:?}")))?;
    let neighbors = snap
        .neighbors(item, n)
        .into_iter()
        .map(|(i, similarity)| Neighbor {
            id: snap.item_ids[i].clone(),
            similarity,
        })
        .collect();
    Ok(Json(NeighborsResponse {
        item: id,
        concept: snap.concepts[item],
        neighbors,
    }))
}

async fn control(
    State(state): State<AppState>,
    body: Result<Json<ControlRequest>, JsonRejection>,
) -> Result<Json<ControlResponse>, ApiError> {
    let snap = state.get()?;
    let Json(req) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    Ok(Json(snap.control(&req)?))
}

async fn components(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<ComponentsResponse>, ApiError> {
    let snap = state.get()?;
    let user = *snap
        .user_index
        .get(&id)
        .ok_or_else(|| ApiError::not_found(format!("unknown user {id:?}")))?;
    Ok(Json(ComponentsResponse {
        user: id,
        components: snap.components(user),
    }))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/meta", get(meta))
        .route("/items/{id}/neighbors", get(neighbors))
        .route("/control", post(control))
        .route("/users/{id}/components", get(components))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Serves `state` on `listener` until the future resolves or ctrl-c.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
