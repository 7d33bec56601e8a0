//! JSON-over-HTTP facade for the studio loop: pick a pose, get a parsing from
//! shape text, optionally repaint it, then render it with texture text.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::{rejection::JsonRejection, State};
use axum::http::{header, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use figuregen::error::Error;
use figuregen::io::{image_to_png, labels_from_png, labels_to_png};
use figuregen::pipeline::generate::Provenance;
use figuregen::pipeline::Models;
use figuregen::synth::{gen_sample, AttributeSpec, FigureImage, ParsingMap, PoseMap};
use figuregen::textattr::{Lexicon, ShapeText};
use serde::{Deserialize, Serialize};
use tower_http::cors::{Any, CorsLayer};

/// Seeds of the poses shipped with the service.
pub const POSE_SEEDS: [u64; 8] = [2001, 2002, 2003, 2004, 2005, 2006, 2007, 2008];

const POSE_PALETTE: [[u8; 3]; 7] = [[255, 255, 255], [230, 190, 150], [60, 90, 160], [200, 70, 70], [70, 160, 90], [220, 170, 40], [140, 80, 170]];

#[derive(Clone, Debug)]
pub struct Pose {
    pub id: String,
    pub map: PoseMap,
}

pub fn bundled_poses() -> Vec<Pose> {
    POSE_SEEDS
        .iter()
        .enumerate()
        .map(|(i, &seed)| Pose { id: format!("pose-{:02}", i + 1), map: gen_sample(seed, &AttributeSpec::default()).expect("bundled pose").pose })
        .collect()
}

/// Colour rendering of a pose's part ids.
pub fn pose_thumbnail(pose: &PoseMap) -> figuregen::error::Result<Vec<u8>> {
    let g = pose.grid();
    let rgb: Vec<u8> = g.data().iter().flat_map(|&p| POSE_PALETTE[p as usize % POSE_PALETTE.len()]).collect();
    image_to_png(&FigureImage::from_rgb8(g.height(), g.width(), &rgb)?)
}

#[derive(Clone, Debug)]
pub struct SessionState {
    pub pose: PoseMap,
    pub shape_text: String,
    pub parsing: ParsingMap,
    pub shape: ShapeText,
    pub seeds: Vec<u64>,
}

pub struct AppState {
    models: Result<Arc<Models>, String>,
    poses: Vec<Pose>,
    sessions: Mutex<HashMap<String, SessionState>>,
    next_session: AtomicU64,
}

impl AppState {
    /// `models` is `Err(reason)` when checkpoints are unavailable; model
    /// endpoints then answer 409.
    pub fn new(models: Result<Models, String>) -> Self {
        Self { models: models.map(Arc::new), poses: bundled_poses(), sessions: Mutex::new(HashMap::new()), next_session: AtomicU64::new(1) }
    }

    pub fn from_checkpoints(dir: &Path, lexicon: Lexicon) -> Self {
        let models = Models::load(dir, lexicon).map_err(|e| e.to_string());
        if let Err(e) = &models {
            log::warn!("serving without models: {e}");
        }
        Self::new(models)
    }

    pub fn session(&self, id: &str) -> Option<SessionState> {
        self.sessions.lock().expect("session lock").get(id).cloned()
    }

    fn models(&self) -> Result<Arc<Models>, ApiError> {
        self.models.clone().map_err(|e| ApiError(StatusCode::CONFLICT, e))
    }

    fn pose(&self, id: &str) -> Result<PoseMap, ApiError> {
        self.poses.iter().find(|p| p.id == id).map(|p| p.map.clone()).ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown pose {id}")))
    }
}

#[derive(Debug)]
pub struct ApiError(pub StatusCode, pub String);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::NoContentTokens
            | Error::LowSimilarity { .. }
            | Error::InvalidAttribute(_)
            | Error::InvalidLabels(_)
            | Error::Image(_)
            | Error::Shape(_) => StatusCode::BAD_REQUEST,
            Error::MissingCheckpoint(_) => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError(StatusCode::BAD_REQUEST, r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

fn bad(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

fn decode_png(b64: &str) -> Result<Vec<u8>, ApiError> {
    B64.decode(b64.trim()).map_err(|e| bad(format!("base64: {e}")))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParsingRequest {
    pub pose_id: Option<String>,
    pub pose_png_base64: Option<String>,
    pub shape_text: String,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ParsingResponse {
    pub parsing_png_base64: String,
    pub attributes: ShapeText,
    pub session_id: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRequest {
    pub session_id: Option<String>,
    pub parsing_png_base64: Option<String>,
    pub texture_text: String,
    #[serde(default)]
    pub seed: u64,
    /// Only for requests without a session.
    pub shape_text: Option<String>,
    pub pose_id: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ImageResponse {
    pub image_png_base64: String,
    pub provenance: Provenance,
    pub session_id: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PoseEntry {
    pub id: String,
    pub thumbnail_png_base64: String,
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

async fn poses(State(app): State<Arc<AppState>>) -> Result<Json<Vec<PoseEntry>>, ApiError> {
    let entries = app
        .poses
        .iter()
        .map(|p| Ok(PoseEntry { id: p.id.clone(), thumbnail_png_base64: B64.encode(pose_thumbnail(&p.map)?) }))
        .collect::<Result<_, Error>>()?;
    Ok(Json(entries))
}

async fn parsing(State(app): State<Arc<AppState>>, req: Result<Json<ParsingRequest>, JsonRejection>) -> Result<Json<ParsingResponse>, ApiError> {
    let Json(req) = req?;
    let models = app.models()?;
    let pose = match (&req.pose_id, &req.pose_png_base64) {
        (Some(id), None) => app.pose(id)?,
        (None, Some(b64)) => PoseMap::new(labels_from_png(&decode_png(b64)?)?)?,
        _ => return Err(bad("give exactly one of pose_id and pose_png_base64")),
    };
    let (parsing, shape) = {
        let (pose, text) = (pose.clone(), req.shape_text.clone());
        blocking(move || Ok(models.parse(&pose, &text)?)).await?
    };
    let png = labels_to_png(parsing.grid())?;
    let session_id = format!("s{:06}", app.next_session.fetch_add(1, Ordering::Relaxed));
    let state = SessionState { pose, shape_text: req.shape_text, parsing, shape: shape.clone(), seeds: vec![req.seed] };
    app.sessions.lock().expect("session lock").insert(session_id.clone(), state);
    Ok(Json(ParsingResponse { parsing_png_base64: B64.encode(png), attributes: shape, session_id }))
}

async fn image(State(app): State<Arc<AppState>>, req: Result<Json<ImageRequest>, JsonRejection>) -> Result<Json<ImageResponse>, ApiError> {
    let Json(req) = req?;
    let models = app.models()?;
    let session = match &req.session_id {
        Some(id) => Some(app.session(id).ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown session {id}")))?),
        None => None,
    };
    let parsing_override = match &req.parsing_png_base64 {
        Some(b64) => Some(ParsingMap::new(labels_from_png(&decode_png(b64)?)?)?),
        None => None,
    };
    let (pose, shape_text) = match &session {
        Some(s) => (s.pose.clone(), req.shape_text.clone().unwrap_or_else(|| s.shape_text.clone())),
        None => {
            if parsing_override.is_none() {
                return Err(bad("without a session a parsing override is required"));
            }
            let text = req.shape_text.clone().ok_or_else(|| bad("without a session shape_text is required"))?;
            let pose_id = req.pose_id.clone().unwrap_or_else(|| app.poses[0].id.clone());
            (app.pose(&pose_id)?, text)
        }
    };
    let g = {
        let (texture, seed, edited) = (req.texture_text.clone(), req.seed, parsing_override.clone());
        blocking(move || Ok(models.generate(&pose, &shape_text, &texture, seed, edited)?)).await?
    };
    if let Some(id) = &req.session_id {
        if let Some(s) = app.sessions.lock().expect("session lock").get_mut(id) {
            s.parsing = g.parsing.clone();
            s.seeds.push(req.seed);
        }
    }
    Ok(Json(ImageResponse { image_png_base64: B64.encode(image_to_png(&g.image)?), provenance: g.provenance, session_id: req.session_id }))
}

pub fn router(state: Arc<AppState>) -> Router {
    let cors = CorsLayer::new().allow_origin(Any).allow_methods([Method::GET, Method::POST]).allow_headers([header::CONTENT_TYPE]);
    Router::new()
        .route("/api/poses", get(poses))
        .route("/api/parsing", post(parsing))
        .route("/api/image", post(image))
        .layer(cors)
        .with_state(state)
}

pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("studio listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(state))).await
}
