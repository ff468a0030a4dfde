//! HTTP/JSON what-if service over a frozen model snapshot.

use std::collections::BTreeMap;
use std::net::{IpAddr, SocketAddr};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use axum::extract::{Path, Query, State};
use axum::http::{HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use cfjoint_core::geom::{Futures, Scene};
use cfjoint_core::metrics::EvalRecord;
use cfjoint_core::model::{record_of, Model};
use cfjoint_core::potentials::{composite, PerTerm};
use cfjoint_core::predictor::PredV1;
use cfjoint_core::synth::Dataset;
use cfjoint_core::tokenizer::TokenBank;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

pub const BIND_ENV: &str = "CFJOINT_BIND";
pub const ORIGIN_ENV: &str = "CFJOINT_UI_ORIGIN";
pub const DEFAULT_POOL: usize = 4;

#[derive(Clone, Debug)]
pub struct SceneEntry {
    pub scene: Scene,
    pub gt: Option<Futures>,
}

pub struct AppState {
    model: RwLock<Arc<Model>>,
    scenes: RwLock<BTreeMap<String, Arc<SceneEntry>>>,
    pool: Arc<Semaphore>,
    uploads: AtomicU64,
}

impl AppState {
    pub fn new(model: Model, scenes: BTreeMap<String, SceneEntry>, pool: usize) -> Arc<Self> {
        Arc::new(Self {
            model: RwLock::new(Arc::new(model)),
            scenes: RwLock::new(scenes.into_iter().map(|(k, v)| (k, Arc::new(v))).collect()),
            pool: Arc::new(Semaphore::new(pool.max(1))),
            uploads: AtomicU64::new(0),
        })
    }

    /// Scenes keyed by manifest index.
    pub fn scenes_from(ds: &Dataset) -> BTreeMap<String, SceneEntry> {
        let eps = ds.train.iter().chain(&ds.val);
        let mut entries: Vec<_> = ds.manifest.episodes.iter().filter(|e| e.split == "train").collect();
        entries.extend(ds.manifest.episodes.iter().filter(|e| e.split != "train"));
        entries
            .into_iter()
            .zip(eps)
            .map(|(m, ep)| {
                (
                    m.index.to_string(),
                    SceneEntry {
                        scene: ep.scene.clone(),
                        gt: Some(ep.gt_futures.clone()),
                    },
                )
            })
            .collect()
    }

    pub fn snapshot(&self) -> Arc<Model> {
        self.model.read().expect("model lock").clone()
    }

    /// Replaces the whole model at once; in-flight requests keep the old one.
    pub fn swap(&self, model: Model) {
        *self.model.write().expect("model lock") = Arc::new(model);
    }

    fn scene(&self, id: &str) -> Result<Arc<SceneEntry>, ApiError> {
        self.scenes
            .read()
            .expect("scene lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown scene {id:?}")))
    }
}

#[derive(Debug)]
pub struct ApiError(pub StatusCode, pub String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

#[derive(Debug, Deserialize)]
pub struct PredictQuery {
    pub token: Option<usize>,
    pub refine: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PotentialSummary {
    pub total: f64,
    pub per_term: PerTerm,
}

/// `pred/v1` plus the composite potential of every scene and, when ground
/// truth is known, the metric record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    #[serde(flatten)]
    pub pred: PredV1,
    pub refined: bool,
    pub potentials: Vec<PotentialSummary>,
    pub metrics: Option<EvalRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub id: String,
}

async fn get_scene(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<Scene>, ApiError> {
    Ok(Json(st.scene(&id)?.scene.clone()))
}

async fn get_intents(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<TokenBank>, ApiError> {
    let entry = st.scene(&id)?;
    let model = st.snapshot();
    let _permit = st.pool.clone().acquire_owned().await.expect("pool open");
    let bank = tokio::task::spawn_blocking(move || model.intents(&entry.scene))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(Json(bank))
}

pub fn predict_blocking(model: &Model, entry: &SceneEntry, token: Option<usize>, refine: bool) -> Result<PredictResponse, ApiError> {
    let bank = model.intents(&entry.scene);
    let k = token.unwrap_or(bank.tokens[0].index);
    let tok = bank.by_index(k).ok_or_else(|| {
        ApiError(StatusCode::BAD_REQUEST, format!("token index {k} out of range 0..{}", bank.len()))
    })?;
    let mut opts = model.inference_options();
    opts.refine = refine;
    let p = model
        .predict(&entry.scene, tok.endpoint, &opts)
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let potentials = p
        .scenes
        .iter()
        .map(|s| {
            let r = composite(&s.futures, &entry.scene, tok.endpoint, &model.cfg.potentials);
            PotentialSummary {
                total: r.total,
                per_term: r.per_term,
            }
        })
        .collect();
    let metrics = entry
        .gt
        .as_ref()
        .map(|gt| record_of(&entry.scene, &p.scenes, gt, model.cfg.eval.miss_threshold));
    Ok(PredictResponse {
        pred: p.to_v1(Some(k)),
        refined: refine,
        potentials,
        metrics,
    })
}

async fn predict(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<PredictQuery>,
) -> Result<Json<PredictResponse>, ApiError> {
    let entry = st.scene(&id)?;
    let model = st.snapshot();
    let _permit = st.pool.clone().acquire_owned().await.expect("pool open");
    let refine = q.refine.unwrap_or(true);
    let out = tokio::task::spawn_blocking(move || predict_blocking(&model, &entry, q.token, refine))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(out))
}

async fn post_scene(State(st): State<Arc<AppState>>, Json(scene): Json<Scene>) -> Result<(StatusCode, Json<Created>), ApiError> {
    let t_p = st.snapshot().cfg.model.t_p;
    scene
        .validate(t_p)
        .map_err(|e| ApiError(StatusCode::BAD_REQUEST, format!("invalid scene: {e}")))?;
    let id = format!("custom-{}", st.uploads.fetch_add(1, Ordering::SeqCst));
    st.scenes
        .write()
        .expect("scene lock")
        .insert(id.clone(), Arc::new(SceneEntry { scene, gt: None }));
    Ok((StatusCode::CREATED, Json(Created { id })))
}

async fn list_scenes(State(st): State<Arc<AppState>>) -> Json<Vec<String>> {
    Json(st.scenes.read().expect("scene lock").keys().cloned().collect())
}

fn cors() -> CorsLayer {
    let origin = match std::env::var(ORIGIN_ENV) {
        Ok(o) => match HeaderValue::from_str(&o) {
            Ok(v) => AllowOrigin::exact(v),
            Err(_) => AllowOrigin::any(),
        },
        Err(_) => AllowOrigin::any(),
    };
    CorsLayer::new()
        .allow_origin(origin)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers(Any)
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/scene", get(list_scenes).post(post_scene))
        .route("/scene/{id}", get(get_scene))
        .route("/scene/{id}/intents", get(get_intents))
        .route("/scene/{id}/predict", get(predict))
        .layer(cors())
        .with_state(state)
}

/// Host from `CFJOINT_BIND` (default loopback) and the given port.
pub fn bind_addr(port: u16) -> Result<SocketAddr, String> {
    let host = std::env::var(BIND_ENV).unwrap_or_else(|_| "127.0.0.1".into());
    let ip: IpAddr = host.parse().map_err(|e| format!("{BIND_ENV}={host:?}: {e}"))?;
    Ok(SocketAddr::new(ip, port))
}

pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
