//! Local HTTP service behind the preview viewer.
//!
//! | method | path               | body / result                                   |
//! |--------|--------------------|-------------------------------------------------|
//! | GET    | `/api/health`      | `ok`                                            |
//! | GET    | `/api/model`       | configuration, settings length, accepted ranges |
//! | GET    | `/api/pointclouds` | `[{cloud_id, point_count}]`                     |
//! | POST   | `/api/pointclouds` | XYZ or ASCII PLY bytes -> id and normalization  |
//! | POST   | `/api/render`      | [`RenderRequest`] JSON -> PNG + timing headers  |
//!
//! Angles in requests are degrees.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::{header, HeaderName, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::{AllowOrigin, CorsLayer};
use tower_http::services::ServeDir;
use z2p_core::datagen::CameraRig;
use z2p_core::io::{encode_png, parse_point_cloud, Provenance};
use z2p_core::network::{LightPosition, Material, Settings, Z2pModel};
use z2p_core::pipeline::{render, StageTimings};
use z2p_core::projection::{normalize_cloud, Normalization, PointCloud, Vec3, ZBufferParams};
use z2p_core::Error;

pub const MAX_RESOLUTION: usize = 2048;
pub const MAX_UPLOAD_BYTES: usize = 256 << 20;

pub const TIME_PROJECT: &str = "x-time-project-ms";
pub const TIME_ZBUFFER: &str = "x-time-zbuffer-ms";
pub const TIME_FORWARD: &str = "x-time-forward-ms";
pub const TIME_TOTAL: &str = "x-time-total-ms";

struct StoredCloud {
    cloud: Arc<PointCloud>,
    normalization: Normalization,
}

/// Loaded weights and uploaded clouds shared by all handlers.
pub struct AppState {
    model: Arc<Z2pModel>,
    provenance: Provenance,
    zbuffer: ZBufferParams,
    clouds: RwLock<BTreeMap<u64, StoredCloud>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(model: Z2pModel, provenance: Provenance) -> Self {
        Self {
            model: Arc::new(model),
            provenance,
            zbuffer: ZBufferParams::default(),
            clouds: RwLock::new(BTreeMap::new()),
            next_id: AtomicU64::new(1),
        }
    }

    pub fn model(&self) -> &Z2pModel {
        &self.model
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
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Parse { .. } | Error::EmptyCloud | Error::DegenerateCloud => StatusCode::BAD_REQUEST,
            Error::Resolution { .. } => StatusCode::CONFLICT,
            Error::InvalidSettings(_) | Error::InvalidCamera(_) | Error::InvalidConfig(_) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct LightDegrees {
    pub azimuth: f64,
    pub elevation: f64,
    pub radius: f64,
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SettingsRequest {
    pub color: [f64; 3],
    pub light: LightDegrees,
    #[serde(default)]
    pub material: Option<Material>,
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CameraDegrees {
    pub yaw: f64,
    pub pitch: f64,
    pub distance: f64,
    #[serde(default = "default_fov")]
    pub fov: f64,
}

fn default_fov() -> f64 {
    60.0
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
#[serde(untagged)]
pub enum Resolution {
    Square(usize),
    Size([usize; 2]),
}

impl Resolution {
    fn size(self) -> (usize, usize) {
        match self {
            Resolution::Square(n) => (n, n),
            Resolution::Size([w, h]) => (w, h),
        }
    }
}

/// Body of `POST /api/render`. Exactly one of `cloud_id` and `points`.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RenderRequest {
    #[serde(default)]
    pub cloud_id: Option<String>,
    #[serde(default)]
    pub points: Option<Vec<[f64; 3]>>,
    pub settings: SettingsRequest,
    pub camera: CameraDegrees,
    pub resolution: Resolution,
}

impl SettingsRequest {
    pub fn to_settings(&self) -> Settings {
        Settings {
            color: self.color,
            light: LightPosition {
                azimuth: self.light.azimuth.to_radians(),
                elevation: self.light.elevation.to_radians(),
                radius: self.light.radius,
            },
            material: self.material,
        }
    }
}

impl CameraDegrees {
    pub fn to_rig(&self) -> CameraRig {
        CameraRig {
            yaw: self.yaw.to_radians(),
            pitch: self.pitch.to_radians(),
            distance: self.distance,
            fov_y: self.fov.to_radians(),
        }
    }
}

async fn health() -> &'static str {
    "ok"
}

async fn model_info(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let config = state.model.config();
    Json(json!({
        "config": config,
        "settings_length": config.settings_length,
        "material_controls": config.settings_length == 8,
        "resolution": {
            "divisor": config.divisor(),
            "max": MAX_RESOLUTION,
        },
        "angle_units": "degrees",
        "ranges": {
            "color": [0.0, 1.0],
            "light_elevation": [-90.0, 90.0],
            "light_radius": "> 0",
            "camera_pitch": [-CameraRig::MAX_PITCH_DEG, CameraRig::MAX_PITCH_DEG],
            "camera_distance": "> 1",
            "camera_fov": "(0, 180)",
            "metallic": [0.0, 1.0],
            "roughness": [0.0, 1.0],
        },
        "defaults": {
            "camera": {"yaw": 0.0, "pitch": 20.0, "distance": 2.2, "fov": 60.0},
            "light": {"azimuth": 30.0, "elevation": 45.0, "radius": 3.0},
        },
        "zbuffer": state.zbuffer,
        "provenance": {
            "train_seed": state.provenance.train_seed,
            "steps": state.provenance.steps,
            "final_loss": state.provenance.final_loss,
        },
    }))
}

fn cloud_key(id: u64) -> String {
    format!("c{id}")
}

fn parse_cloud_key(key: &str) -> Option<u64> {
    key.strip_prefix('c')?.parse().ok()
}

async fn list_clouds(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let clouds = state.clouds.read().expect("cloud store lock");
    let list: Vec<_> = clouds
        .iter()
        .map(|(id, c)| {
            json!({
                "cloud_id": cloud_key(*id),
                "point_count": c.cloud.len(),
                "normalization": { "scale": c.normalization.scale, "centroid": c.normalization.centroid },
            })
        })
        .collect();
    Json(json!(list))
}

async fn upload_cloud(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<serde_json::Value>, ApiError> {
    let (cloud, normalization) = tokio::task::spawn_blocking(move || {
        let raw = parse_point_cloud(&body)?;
        normalize_cloud(&raw)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    let id = state.next_id.fetch_add(1, Ordering::Relaxed);
    let point_count = cloud.len();
    state.clouds.write().expect("cloud store lock").insert(
        id,
        StoredCloud {
            cloud: Arc::new(cloud),
            normalization,
        },
    );
    log::info!("stored cloud {} with {point_count} points", cloud_key(id));
    Ok(Json(json!({
        "cloud_id": cloud_key(id),
        "point_count": point_count,
        "normalization": { "scale": normalization.scale, "centroid": normalization.centroid },
    })))
}

fn timing_header(v: f64) -> HeaderValue {
    HeaderValue::from_str(&format!("{v:.3}")).expect("ascii number")
}

async fn render_handler(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let request: RenderRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("invalid request: {e}")))?;
    let cloud = match (&request.cloud_id, &request.points) {
        (Some(key), None) => {
            let clouds = state.clouds.read().expect("cloud store lock");
            parse_cloud_key(key)
                .and_then(|id| clouds.get(&id))
                .map(|c| Arc::clone(&c.cloud))
                .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown cloud_id {key:?}")))?
        }
        (None, Some(points)) => {
            let raw = PointCloud::new(points.iter().map(|p| Vec3::from(*p)).collect())?;
            Arc::new(normalize_cloud(&raw)?.0)
        }
        _ => {
            return Err(ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "give exactly one of cloud_id and points",
            ))
        }
    };
    let settings = request.settings.to_settings();
    settings.validate()?;
    if settings.len() != state.model.config().settings_length {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!(
                "model takes {} settings values; material controls are {}",
                state.model.config().settings_length,
                if state.model.config().settings_length == 8 { "required" } else { "not supported" }
            ),
        ));
    }
    let rig = request.camera.to_rig();
    rig.validate()?;
    let (width, height) = request.resolution.size();
    if width == 0 || height == 0 || width > MAX_RESOLUTION || height > MAX_RESOLUTION {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("resolution {width}x{height} outside 1..={MAX_RESOLUTION}"),
        ));
    }
    state.model.config().check_resolution(width, height)?;
    let worker = Arc::clone(&state);
    let (png, timings) = tokio::task::spawn_blocking(move || -> Result<(Vec<u8>, StageTimings), Error> {
        let out = render(&worker.model, &cloud, &rig, &settings, (width, height), &worker.zbuffer)?;
        Ok((encode_png(&out.image)?, out.timings))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    let headers = [
        (header::CONTENT_TYPE, HeaderValue::from_static("image/png")),
        (HeaderName::from_static(TIME_PROJECT), timing_header(timings.project_ms)),
        (HeaderName::from_static(TIME_ZBUFFER), timing_header(timings.zbuffer_ms)),
        (HeaderName::from_static(TIME_FORWARD), timing_header(timings.forward_ms)),
        (HeaderName::from_static(TIME_TOTAL), timing_header(timings.total_ms)),
    ];
    Ok((headers, png).into_response())
}

fn is_local_origin(origin: &HeaderValue) -> bool {
    let Ok(origin) = origin.to_str() else {
        return false;
    };
    let Some((_, authority)) = origin.split_once("://") else {
        return false;
    };
    let host = if authority.starts_with('[') {
        authority.split_inclusive(']').next().unwrap_or_default()
    } else {
        authority.split(':').next().unwrap_or_default()
    };
    matches!(host, "localhost" | "127.0.0.1" | "[::1]")
}

pub fn router(state: Arc<AppState>, static_dir: Option<PathBuf>) -> Router {
    let cors = CorsLayer::new()
        .allow_origin(AllowOrigin::predicate(|origin, _| is_local_origin(origin)))
        .allow_methods([axum::http::Method::GET, axum::http::Method::POST])
        .allow_headers([header::CONTENT_TYPE])
        .expose_headers([
            HeaderName::from_static(TIME_PROJECT),
            HeaderName::from_static(TIME_ZBUFFER),
            HeaderName::from_static(TIME_FORWARD),
            HeaderName::from_static(TIME_TOTAL),
        ]);
    let mut app = Router::new()
        .route("/api/health", get(health))
        .route("/api/model", get(model_info))
        .route("/api/pointclouds", get(list_clouds).post(upload_cloud))
        .route("/api/render", post(render_handler))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(state);
    if let Some(dir) = static_dir {
        app = app.fallback_service(ServeDir::new(dir));
    }
    app.layer(cors)
}

/// Serves on an already bound listener until ctrl-c.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>, static_dir: Option<PathBuf>) -> std::io::Result<()> {
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state, static_dir))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
