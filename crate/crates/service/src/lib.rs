//! HTTP API over a project directory: frames, center suggestions and the annotation review
//! workflow. Route reference: `docs/api.md`.
//!
//! Every response carries the label store version in the `X-Store-Version` header, and JSON
//! success bodies repeat it as `"version"`. All label mutations go through the store's single
//! writer, so a mutation made here and the same call made on [`LabelStore`] directly leave the
//! same journal.

mod actor;
mod error;
mod routes;

use std::collections::{BTreeMap, HashMap};
use std::io;
use std::sync::{Arc, Mutex};

use axum::extract::{Request, State};
use axum::http::HeaderValue;
use axum::middleware::{self, Next};
use axum::response::Response;
use axum::routing::{get, put};
use axum::Router;

use cyclodet_core::config::{LabelConfig, ProjectConfig};
use cyclodet_core::cyclone_track::TrackerConfig;
use cyclodet_core::labelstore::{LabelError, LabelStore};
use cyclodet_core::project::{FrameInfo, ProjectLayout};

pub use actor::{SessionActor, SessionRole, ACTOR_HEADER, ROLE_HEADER};
pub use error::ApiError;

pub const VERSION_HEADER: &str = "x-store-version";

/// Shared state behind every route.
#[derive(Debug)]
pub struct AppState {
    pub store: Arc<LabelStore>,
    pub layout: ProjectLayout,
    pub frames: BTreeMap<u32, FrameInfo>,
    pub tracker: TrackerConfig,
    pub labels: LabelConfig,
    pub page_size: usize,
    roles: Mutex<HashMap<String, SessionRole>>,
}

impl AppState {
    pub fn new(layout: ProjectLayout, store: Arc<LabelStore>, frames: Vec<FrameInfo>, cfg: &ProjectConfig) -> Self {
        Self {
            store,
            layout,
            frames: frames.into_iter().map(|f| (f.index, f)).collect(),
            tracker: cfg.tracker.clone(),
            labels: cfg.labels.clone(),
            page_size: cfg.service.page_size,
            roles: Mutex::new(HashMap::new()),
        }
    }

    /// Opens the journal and frame index under `cfg.data_dir`.
    pub fn open(cfg: &ProjectConfig) -> Result<Self, LabelError> {
        let layout = ProjectLayout::new(&cfg.data_dir);
        std::fs::create_dir_all(layout.root())?;
        let store = LabelStore::open(layout.journal())?;
        let frames = layout.read_frames()?;
        Ok(Self::new(layout, Arc::new(store), frames, cfg))
    }

    fn frame(&self, index: u32) -> Result<&FrameInfo, ApiError> {
        self.frames.get(&index).ok_or_else(|| ApiError::NotFound(format!("frame {index} not found")))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/frames", get(routes::list_frames))
        .route("/api/frames/{index}/image.png", get(routes::frame_image))
        .route("/api/frames/{index}/suggestions", get(routes::frame_suggestions))
        .route("/api/annotations", get(routes::list_annotations).post(routes::create_annotation))
        .route("/api/annotations/{id}", get(routes::get_annotation).put(routes::edit_annotation))
        .route("/api/annotations/{id}/review", put(routes::review_annotation))
        .route("/api/export", get(routes::export))
        .route("/api/stats", get(routes::stats))
        .layer(middleware::from_fn_with_state(state.clone(), stamp_version))
        .with_state(state)
}

async fn stamp_version(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    let mut res = next.run(req).await;
    res.headers_mut().insert(VERSION_HEADER, HeaderValue::from(state.store.version()));
    res
}

/// Serves until the process is stopped.
pub async fn serve(state: Arc<AppState>, bind: &str) -> io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
