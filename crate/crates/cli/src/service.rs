//! JSON API over frozen models.
//!
//! Each sampled episode becomes a session holding its [`EpisodeState`].
//! Sessions are independent; requests against one session are serialized
//! by its own lock.

use std::collections::HashMap;
use std::io::Cursor;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use ifsl_core::dataset::{AttributeDataset, Protocol};
use ifsl_core::harness::Artifacts;
use ifsl_core::inference::{EpisodeState, EpisodeTruth, InterventionOutcome, Space};
use ifsl_core::intervention::InterventionTarget;
use ifsl_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub struct Session {
    pub split: String,
    pub seed: u64,
    pub state: EpisodeState,
    pub truth: EpisodeTruth,
}

pub struct AppState {
    pub artifacts: Artifacts,
    sessions: Mutex<HashMap<u64, Arc<Mutex<Session>>>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(artifacts: Artifacts) -> Self {
        Self {
            artifacts,
            sessions: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
        }
    }

    fn session(&self, id: u64) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.sessions
            .lock()
            .expect("session table poisoned")
            .get(&id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("episode {id} does not exist")))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
}

impl ApiError {
    fn not_found(message: String) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            kind: "not-found",
            message,
        }
    }

    fn bad_request(message: String) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            kind: "bad-request",
            message,
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, kind) = match &e {
            Error::InterventionRejected(_) => {
                (StatusCode::UNPROCESSABLE_ENTITY, "intervention-rejected")
            }
            Error::Sampling(_) | Error::Validation(_) | Error::Config(_) | Error::Split(_) => {
                (StatusCode::BAD_REQUEST, "bad-request")
            }
            Error::MissingDependency(_) => (StatusCode::CONFLICT, "missing-dependency"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self {
            status,
            kind,
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(serde_json::json!({ "error": self.kind, "message": self.message })),
        )
            .into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Debug, Deserialize)]
pub struct CreateEpisode {
    pub split: String,
    #[serde(rename = "N")]
    pub ways: usize,
    #[serde(rename = "K")]
    pub shots: usize,
    #[serde(rename = "Q")]
    pub queries: usize,
    pub seed: Option<u64>,
    /// Defaults to the mixed space when a gate is available.
    pub space: Option<Space>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub episode_id: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageView {
    pub image_index: usize,
    pub image_id: String,
    /// `data:image/png;base64,...`
    pub image: String,
    /// f_h output, or the intervened row for queries.
    pub predicted_attributes: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassView {
    pub class_id: u32,
    pub name: String,
    pub support: Vec<ImageView>,
    /// Human-friendly block of the prototype.
    pub prototype: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryView {
    #[serde(flatten)]
    pub item: ImageView,
    pub label: usize,
    pub probabilities: Vec<f64>,
    pub prediction: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeView {
    pub episode_id: u64,
    pub split: String,
    pub seed: u64,
    pub space: Space,
    pub attribute_names: Vec<String>,
    pub pi: Vec<f64>,
    pub mask: Vec<f64>,
    pub gate: Option<f64>,
    pub human_friendly: bool,
    pub classes: Vec<ClassView>,
    pub queries: Vec<QueryView>,
}

#[derive(Debug, Deserialize)]
pub struct InterveneRequest {
    pub query_idx: usize,
    pub attr_idx: usize,
    pub target: InterventionTarget,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ModelEntry {
    pub role: String,
    pub name: String,
    pub digest: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ModelsView {
    pub config_hash: String,
    pub dataset_fingerprint: String,
    pub checkpoints: Vec<ModelEntry>,
    pub spaces: Vec<Space>,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/episodes", post(create_episode))
        .route("/api/episodes/{id}", get(get_episode))
        .route("/api/episodes/{id}/intervene", post(intervene))
        .route("/api/episodes/{id}/reset", post(reset))
        .route("/api/attributes", get(attributes))
        .route("/api/models", get(models))
        .with_state(state)
}

fn png_data_uri(dataset: &AttributeDataset, i: usize) -> Result<String, ApiError> {
    let mut buf = Cursor::new(Vec::new());
    dataset
        .image(i)
        .write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| ApiError::from(Error::from(e)))?;
    Ok(format!(
        "data:image/png;base64,{}",
        base64::engine::general_purpose::STANDARD.encode(buf.into_inner())
    ))
}

fn view(app: &AppState, id: u64, s: &Session) -> Result<EpisodeView, ApiError> {
    let ds = &app.artifacts.dataset;
    let st = &s.state;
    let a = st.human_width;
    let probs = st.classify()?;
    let image = |i: usize, attrs: Vec<f64>| -> Result<ImageView, ApiError> {
        Ok(ImageView {
            image_index: i,
            image_id: ds.image_id(i).to_string(),
            image: png_data_uri(ds, i)?,
            predicted_attributes: attrs,
        })
    };
    let classes = st
        .episode
        .classes
        .iter()
        .enumerate()
        .map(|(c, &class)| {
            let support = st.episode.support[c]
                .iter()
                .map(|&i| image(i, app.artifacts.human[i].clone()))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(ClassView {
                class_id: ds.class_ids()[class],
                name: ds.class_names()[class].clone(),
                support,
                prototype: st.features.prototypes[c][..a].to_vec(),
            })
        })
        .collect::<Result<Vec<_>, ApiError>>()?;
    let queries = st
        .episode
        .query_items()
        .into_iter()
        .enumerate()
        .map(|(q, (i, label))| {
            Ok(QueryView {
                item: image(i, st.features.queries[q][..a].to_vec())?,
                label,
                probabilities: probs.probs[q].clone(),
                prediction: probs.predictions[q],
            })
        })
        .collect::<Result<Vec<_>, ApiError>>()?;
    Ok(EpisodeView {
        episode_id: id,
        split: s.split.clone(),
        seed: s.seed,
        space: st.space,
        attribute_names: ds.attribute_names().to_vec(),
        pi: st.selection.pi.clone(),
        mask: st.selection.mask.clone(),
        gate: st.gate,
        human_friendly: st.human_friendly(),
        classes,
        queries,
    })
}

async fn create_episode(
    State(app): State<Arc<AppState>>,
    Json(req): Json<CreateEpisode>,
) -> ApiResult<Created> {
    let art = &app.artifacts;
    let pool = art.splits.by_name(&req.split).ok_or_else(|| {
        ApiError::bad_request(format!(
            "unknown split '{}' (expected base, val or novel)",
            req.split
        ))
    })?;
    let id = app.next_id.fetch_add(1, Ordering::Relaxed);
    let seed = req.seed.unwrap_or(id);
    let protocol = Protocol {
        ways: req.ways,
        shots: req.shots,
        queries: req.queries,
    };
    let episode = protocol.sample(pool, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let models = art.frozen();
    let space = req.space.unwrap_or(if models.unknown.is_some() {
        Space::Mixed
    } else {
        Space::HumanFriendly
    });
    let state = EpisodeState::new(&models, &episode, space)?;
    let truth = EpisodeTruth::new(&art.dataset, &episode);
    let session = Session {
        split: req.split,
        seed,
        state,
        truth,
    };
    app.sessions
        .lock()
        .expect("session table poisoned")
        .insert(id, Arc::new(Mutex::new(session)));
    Ok(Json(Created { episode_id: id }))
}

async fn get_episode(
    State(app): State<Arc<AppState>>,
    Path(id): Path<u64>,
) -> ApiResult<EpisodeView> {
    let session = app.session(id)?;
    let s = session.lock().expect("session poisoned");
    Ok(Json(view(&app, id, &s)?))
}

async fn intervene(
    State(app): State<Arc<AppState>>,
    Path(id): Path<u64>,
    Json(req): Json<InterveneRequest>,
) -> ApiResult<InterventionOutcome> {
    let session = app.session(id)?;
    let mut s = session.lock().expect("session poisoned");
    let targets = req.target.resolve(&s.truth, req.query_idx, req.attr_idx)?;
    Ok(Json(s.state.intervene(
        req.query_idx,
        req.attr_idx,
        &targets,
    )?))
}

async fn reset(State(app): State<Arc<AppState>>, Path(id): Path<u64>) -> ApiResult<EpisodeView> {
    let session = app.session(id)?;
    let mut s = session.lock().expect("session poisoned");
    s.state.reset();
    Ok(Json(view(&app, id, &s)?))
}

async fn attributes(State(app): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "names": app.artifacts.dataset.attribute_names() }))
}

async fn models(State(app): State<Arc<AppState>>) -> Json<ModelsView> {
    let art = &app.artifacts;
    let checkpoints = art
        .manifest
        .checkpoints
        .iter()
        .map(|r| ModelEntry {
            role: r.role.clone(),
            name: r
                .stem
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            digest: r.digest.clone(),
        })
        .collect();
    let mut spaces = vec![Space::HumanFriendly];
    if art.frozen().unknown.is_some() {
        spaces.push(Space::Mixed);
    }
    Json(ModelsView {
        config_hash: art.manifest.config_hash.clone(),
        dataset_fingerprint: art.manifest.dataset_fingerprint.clone(),
        checkpoints,
        spaces,
    })
}
