//! HTTP API over the corpus, the trained models and single-mask inpainting.
//!
//! State is loaded once and shared immutably between requests; the service
//! never writes to the corpus or the weights.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use inpaint_core::augment::{apply_plan, window_start, AugmentError, AugmentPlan, WINDOW_WIDTH};
use inpaint_core::corpus::{CorpusSplit, SplitRole, TileAlphabet, TileGrid};
use inpaint_core::dataset::MaskRect;
use inpaint_core::markov::{GenerationMode, MarkovInpainter, MarkovModel};
use inpaint_core::models::{Inpainter, NeuralInpainter};
use inpaint_core::store::{load_network, MAGIC};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tower_http::cors::CorsLayer;

/// Suffix of the run manifest written next to each artifact.
pub const MANIFEST_SUFFIX: &str = ".manifest.json";

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot load model {path}: {message}")]
    Model { path: PathBuf, message: String },
    #[error("two models share the id {0}")]
    DuplicateModel(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub id: String,
    /// `autoencoder`, `unet` or `markov`.
    pub kind: String,
    pub parameters: Option<usize>,
    /// SHA-256 of the run manifest that produced the model, when present.
    pub manifest_hash: Option<String>,
    pub corpus_hash: Option<String>,
}

pub struct LoadedModel {
    pub info: ModelInfo,
    pub inpainter: Box<dyn Inpainter<f32>>,
}

pub struct AppState {
    pub alphabet: TileAlphabet,
    pub split: CorpusSplit,
    pub models: BTreeMap<String, LoadedModel>,
}

fn manifest_hash(artifact: &Path) -> Option<String> {
    let mut name = artifact.file_name()?.to_os_string();
    name.push(MANIFEST_SUFFIX);
    let bytes = std::fs::read(artifact.with_file_name(name)).ok()?;
    Some(hex::encode(Sha256::digest(&bytes)))
}

fn model_id(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    match name.split_once('.') {
        Some((stem, _)) if !stem.is_empty() => stem.to_owned(),
        _ => name,
    }
}

/// Loads one artifact: a weight store (recognized by its magic bytes) or a
/// Markov count table (any other `.json`). Returns `None` for other files.
pub fn load_model(path: &Path, alphabet: &TileAlphabet) -> Result<Option<LoadedModel>, LoadError> {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    if name.ends_with(MANIFEST_SUFFIX) || !path.is_file() {
        return Ok(None);
    }
    let io = |source| LoadError::Io {
        path: path.to_path_buf(),
        source,
    };
    let model_err = |message: String| LoadError::Model {
        path: path.to_path_buf(),
        message,
    };
    let id = model_id(path);
    let head = {
        use std::io::Read;
        let mut buf = [0u8; 8];
        let mut f = std::fs::File::open(path).map_err(io)?;
        let n = f.read(&mut buf).map_err(io)?;
        buf[..n].to_vec()
    };
    if head == MAGIC {
        let (net, meta) = load_network::<f32>(path, alphabet).map_err(|e| model_err(e.to_string()))?;
        let info = ModelInfo {
            id: id.clone(),
            kind: serde_json::to_value(meta.model.architecture)
                .ok()
                .and_then(|v| v.as_str().map(str::to_owned))
                .unwrap_or_default(),
            parameters: Some(net.param_count()),
            manifest_hash: manifest_hash(path),
            corpus_hash: meta.corpus_hash,
        };
        let inpainter = NeuralInpainter {
            id,
            net,
            alphabet: alphabet.clone(),
        };
        return Ok(Some(LoadedModel {
            info,
            inpainter: Box::new(inpainter),
        }));
    }
    if name.ends_with(".json") {
        let model = MarkovModel::load(path, alphabet).map_err(|e| model_err(e.to_string()))?;
        let info = ModelInfo {
            id: id.clone(),
            kind: "markov".into(),
            parameters: None,
            manifest_hash: manifest_hash(path),
            corpus_hash: None,
        };
        let inpainter = MarkovInpainter {
            id,
            model,
            alphabet: alphabet.clone(),
            mode: GenerationMode::Sample,
        };
        return Ok(Some(LoadedModel {
            info,
            inpainter: Box::new(inpainter),
        }));
    }
    Ok(None)
}

impl AppState {
    /// Loads every model artifact directly inside `weights_dir`.
    pub fn load(weights_dir: &Path, alphabet: TileAlphabet, split: CorpusSplit) -> Result<Self, LoadError> {
        let io = |source| LoadError::Io {
            path: weights_dir.to_path_buf(),
            source,
        };
        let mut paths: Vec<PathBuf> = std::fs::read_dir(weights_dir)
            .map_err(io)?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()
            .map_err(io)?;
        paths.sort();
        let mut models = BTreeMap::new();
        for p in paths {
            if let Some(m) = load_model(&p, &alphabet)? {
                log::info!("loaded model {} ({})", m.info.id, m.info.kind);
                if models.contains_key(&m.info.id) {
                    return Err(LoadError::DuplicateModel(m.info.id));
                }
                models.insert(m.info.id.clone(), m);
            }
        }
        Ok(Self {
            alphabet,
            split,
            models,
        })
    }
}

/// Error body: a stable machine-readable `error` code plus a human message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    pub error: String,
    pub message: String,
    #[serde(skip)]
    pub status: u16,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            error: code.into(),
            message: message.into(),
            status: status.as_u16(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelSummary {
    pub id: String,
    pub game: String,
    pub label: String,
    pub split: SplitRole,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelBody {
    pub id: String,
    pub split: SplitRole,
    pub rows: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InpaintRequest {
    pub grid: Vec<String>,
    pub mask: MaskRect,
    pub model: String,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilledCell {
    pub row: usize,
    pub col: usize,
    pub symbol: char,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InpaintResponse {
    pub cells: Vec<FilledCell>,
    pub model: String,
    pub latency_ms: f64,
}

async fn list_levels(State(state): State<Arc<AppState>>) -> Json<Vec<LevelSummary>> {
    Json(
        state
            .split
            .levels()
            .map(|(l, role)| LevelSummary {
                id: l.id.clone(),
                game: l.game.clone(),
                label: l.label(),
                split: role,
                height: l.grid.height(),
                width: l.grid.width(),
            })
            .collect(),
    )
}

async fn get_level(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<LevelBody>, ApiError> {
    let (level, role) = state
        .split
        .find(&id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_level", format!("no level named {id}")))?;
    Ok(Json(LevelBody {
        id,
        split: role,
        rows: level.grid.to_rows(),
    }))
}

async fn list_models(State(state): State<Arc<AppState>>) -> Json<Vec<ModelInfo>> {
    Json(state.models.values().map(|m| m.info.clone()).collect())
}

fn bad_request(code: &str, message: impl Into<String>) -> ApiError {
    ApiError::new(StatusCode::BAD_REQUEST, code, message)
}

/// Checks a request against the loaded state and returns the parsed grid.
pub fn validate(state: &AppState, req: &InpaintRequest) -> Result<TileGrid, ApiError> {
    if !state.models.contains_key(&req.model) {
        return Err(ApiError::new(
            StatusCode::NOT_FOUND,
            "unknown_model",
            format!("no model named {}", req.model),
        ));
    }
    if req.mask.width > WINDOW_WIDTH {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "mask_too_wide",
            format!("mask is {} tiles wide, at most {WINDOW_WIDTH} allowed", req.mask.width),
        ));
    }
    if req.grid.is_empty() {
        return Err(bad_request("empty_grid", "grid has no rows"));
    }
    let grid = TileGrid::from_rows(&req.grid, &state.alphabet).map_err(|e| bad_request("invalid_grid", e.to_string()))?;
    window_start(grid.height(), grid.width(), &req.mask).map_err(|e| match e {
        AugmentError::BadLevel { .. } => bad_request("invalid_grid_size", e.to_string()),
        _ => bad_request("mask_out_of_bounds", e.to_string()),
    })?;
    Ok(grid)
}

/// Fills one mask; the cells returned are exactly the mask interior.
pub fn run_inpaint(state: &AppState, req: &InpaintRequest) -> Result<InpaintResponse, ApiError> {
    let started = Instant::now();
    let grid = validate(state, req)?;
    let model = &state.models[&req.model];
    let plan = AugmentPlan {
        level_id: String::new(),
        masks: vec![req.mask],
        model_id: req.model.clone(),
        seed: req.seed.unwrap_or(0),
    };
    let out = apply_plan(&grid, &state.alphabet, &plan, model.inpainter.as_ref())
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "inpaint_failed", e.to_string()))?;
    let cells = req
        .mask
        .cells()
        .map(|(row, col)| FilledCell {
            row,
            col,
            symbol: out.get(row, col),
        })
        .collect();
    Ok(InpaintResponse {
        cells,
        model: req.model.clone(),
        latency_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

async fn inpaint(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<InpaintResponse>, ApiError> {
    let req: InpaintRequest =
        serde_json::from_slice(&body).map_err(|e| bad_request("malformed_request", e.to_string()))?;
    tokio::task::spawn_blocking(move || run_inpaint(&state, &req))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "worker_failed", e.to_string()))?
        .map(Json)
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/levels", get(list_levels))
        .route("/api/levels/{id}", get(get_level))
        .route("/api/models", get(list_models))
        .route("/api/inpaint", post(inpaint))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(state: Arc<AppState>, bind: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
