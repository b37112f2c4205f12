use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use cyclodet_core::cyclone_track::find_local_minima;
use cyclodet_core::fsio::write_atomic_bytes;
use cyclodet_core::grid::{encode_png, load_grid, render_image, FieldKind};
use cyclodet_core::labelstore::{
    category_counts, suggest_box, write_records, EditAnnotation, NewAnnotation, ReviewAction, ReviewState, Split,
};
use cyclodet_core::project::{build_manifest, FrameInfo};
use cyclodet_core::{BoundingBox, StageClass};

use crate::actor::{SessionActor, SessionRole};
use crate::error::ApiError;
use crate::AppState;

type ApiResult<T> = Result<T, ApiError>;

/// Box coordinates as sent by clients; geometry is checked after parsing so a bad box is a 422,
/// not a 400.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBox {
    xmin: f64,
    ymin: f64,
    xmax: f64,
    ymax: f64,
}

impl RawBox {
    fn validate(self) -> ApiResult<BoundingBox> {
        BoundingBox::new(self.xmin, self.ymin, self.xmax, self.ymax).map_err(|e| ApiError::Unprocessable(format!("invalid box: {e}")))
    }
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(format!("malformed body: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::Internal(e.to_string()))?
}

// ---- frames ----

#[derive(Debug, Deserialize)]
pub struct PageQuery {
    page: Option<usize>,
    per_page: Option<usize>,
}

#[derive(Debug, Serialize)]
struct FrameSummary<'a> {
    #[serde(flatten)]
    info: &'a FrameInfo,
    annotations: usize,
    by_state: BTreeMap<ReviewState, usize>,
}

pub async fn list_frames(State(s): State<Arc<AppState>>, Query(q): Query<PageQuery>) -> ApiResult<Json<Value>> {
    let per_page = q.per_page.unwrap_or(s.page_size);
    if per_page == 0 {
        return Err(ApiError::BadRequest("per_page must be positive".into()));
    }
    let page = q.page.unwrap_or(0);
    let (annotations, version) = s.store.snapshot();
    let mut counts: BTreeMap<u32, BTreeMap<ReviewState, usize>> = BTreeMap::new();
    for a in &annotations {
        *counts.entry(a.frame_index).or_default().entry(a.review).or_default() += 1;
    }
    let frames: Vec<FrameSummary> = s
        .frames
        .values()
        .skip(page.saturating_mul(per_page))
        .take(per_page)
        .map(|info| {
            let by_state = counts.get(&info.index).cloned().unwrap_or_default();
            FrameSummary { info, annotations: by_state.values().sum(), by_state }
        })
        .collect();
    Ok(Json(json!({ "version": version, "page": page, "per_page": per_page, "total": s.frames.len(), "frames": frames })))
}

pub async fn frame_image(State(s): State<Arc<AppState>>, Path(index): Path<u32>) -> ApiResult<Response> {
    let info = s.frame(index)?.clone();
    if !info.has_ttr {
        return Err(ApiError::NotFound(format!("frame {index} has no TTR grid")));
    }
    let png = blocking(move || cached_png(&s, &info)).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

/// Renders a frame once; later requests read `cache/frame-<index>-<hash>.png`.
fn cached_png(s: &AppState, info: &FrameInfo) -> ApiResult<Vec<u8>> {
    let internal = |e: &dyn std::fmt::Display| ApiError::Internal(format!("frame {}: {e}", info.index));
    let grid_path = s.layout.grid_path(FieldKind::Ttr, info.index);
    let mut grid = None;
    let hash = match info.ttr_hash {
        Some(h) => h,
        None => grid.insert(load_grid(&grid_path, FieldKind::Ttr).map_err(|e| internal(&e))?).content_hash(),
    };
    let path = s.layout.cache_dir().join(format!("frame-{}-{hash:016x}.png", info.index));
    if let Ok(png) = std::fs::read(&path) {
        return Ok(png);
    }
    let grid = match grid {
        Some(g) => g,
        None => load_grid(&grid_path, FieldKind::Ttr).map_err(|e| internal(&e))?,
    };
    let png = encode_png(&render_image(&grid)).map_err(|e| internal(&e))?;
    std::fs::create_dir_all(s.layout.cache_dir()).map_err(|e| internal(&e))?;
    write_atomic_bytes(&path, &png).map_err(|e| internal(&e))?;
    Ok(png)
}

pub async fn frame_suggestions(State(s): State<Arc<AppState>>, Path(index): Path<u32>) -> ApiResult<Json<Value>> {
    if !s.frame(index)?.has_mslp {
        return Err(ApiError::NotFound(format!("frame {index} has no MSLP grid")));
    }
    let state = s.clone();
    let suggestions = blocking(move || {
        let grid = load_grid(state.layout.grid_path(FieldKind::Mslp, index), FieldKind::Mslp)
            .map_err(|e| ApiError::Internal(format!("frame {index}: {e}")))?;
        let centers = find_local_minima(&grid, &state.tracker).map_err(|e| ApiError::Internal(e.to_string()))?;
        Ok(centers
            .into_iter()
            .map(|mut c| {
                c.frame_index = index as usize;
                let bbox = suggest_box(&c, grid.geometry(), state.labels.suggest_half_extent_deg);
                json!({ "possibly_tropical": c.possibly_tropical, "box": bbox, "center": c })
            })
            .collect::<Vec<_>>())
    })
    .await?;
    Ok(Json(json!({ "version": s.store.version(), "frame": index, "suggestions": suggestions })))
}

// ---- annotations ----

#[derive(Debug, Deserialize)]
pub struct AnnotationQuery {
    frame: Option<u32>,
    state: Option<ReviewState>,
}

pub async fn list_annotations(State(s): State<Arc<AppState>>, Query(q): Query<AnnotationQuery>) -> Json<Value> {
    let (all, version) = s.store.snapshot();
    let annotations: Vec<_> = all
        .into_iter()
        .filter(|a| q.frame.is_none_or(|f| a.frame_index == f) && q.state.is_none_or(|st| a.review == st))
        .collect();
    Json(json!({ "version": version, "annotations": annotations }))
}

pub async fn get_annotation(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let version = s.store.version();
    let a = s.store.get(&id).ok_or_else(|| ApiError::NotFound(format!("annotation {id} not found")))?;
    Ok(Json(json!({ "version": version, "annotation": a })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateBody {
    frame_index: u32,
    #[serde(rename = "box")]
    bbox: RawBox,
    stage: StageClass,
    #[serde(default)]
    track_id: Option<u32>,
}

pub async fn create_annotation(State(s): State<Arc<AppState>>, actor: SessionActor, body: Bytes) -> ApiResult<Response> {
    let req: CreateBody = parse_body(&body)?;
    let bbox = req.bbox.validate()?;
    s.frame(req.frame_index)?;
    let new = NewAnnotation { frame_index: req.frame_index, bbox, stage: req.stage, track_id: req.track_id };
    let (a, version) = s.store.create(new, &actor.id)?;
    Ok((StatusCode::CREATED, Json(json!({ "version": version, "annotation": a }))).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EditBody {
    #[serde(default, rename = "box")]
    bbox: Option<RawBox>,
    #[serde(default)]
    stage: Option<StageClass>,
    #[serde(default)]
    note: Option<String>,
}

pub async fn edit_annotation(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
    actor: SessionActor,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    let req: EditBody = parse_body(&body)?;
    let bbox = req.bbox.map(RawBox::validate).transpose()?;
    let (a, version) = s.store.edit(&id, EditAnnotation { bbox, stage: req.stage, note: req.note }, &actor.id)?;
    Ok(Json(json!({ "version": version, "annotation": a })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReviewBody {
    action: ReviewAction,
    #[serde(default)]
    note: Option<String>,
}

pub async fn review_annotation(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
    actor: SessionActor,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    let req: ReviewBody = parse_body(&body)?;
    if matches!(req.action, ReviewAction::Suggest | ReviewAction::Accept) && actor.role != SessionRole::Reviewer {
        return Err(ApiError::Conflict(format!("{} requires the reviewer role", req.action.name())));
    }
    let (a, version) = s.store.transition(&id, req.action, &actor.id, req.note.as_deref())?;
    Ok(Json(json!({ "version": version, "annotation": a })))
}

// ---- dataset ----

#[derive(Debug, Deserialize)]
pub struct ExportQuery {
    split: Option<String>,
}

pub async fn export(State(s): State<Arc<AppState>>, Query(q): Query<ExportQuery>) -> ApiResult<Response> {
    let wanted = match q.split.as_deref().map(str::to_ascii_lowercase).as_deref() {
        None | Some("all") => None,
        Some("train") => Some(Split::Train),
        Some("test") => Some(Split::Test),
        Some(other) => return Err(ApiError::BadRequest(format!("unknown split `{other}`"))),
    };
    let (manifest, skipped) = manifest_of(&s)?;
    let entries: Vec<_> = manifest.entries.into_iter().filter(|e| wanted.is_none_or(|w| e.split == w)).collect();
    let mut body = Vec::new();
    write_records(&mut body, &entries).map_err(|e| ApiError::Internal(e.to_string()))?;
    Ok((
        [(header::CONTENT_TYPE, "application/x-ndjson".to_string()), (header::HeaderName::from_static("x-skipped-annotations"), skipped.to_string())],
        body,
    )
        .into_response())
}

pub async fn stats(State(s): State<Arc<AppState>>) -> ApiResult<Json<Value>> {
    let version = s.store.version();
    let (manifest, skipped) = manifest_of(&s)?;
    let counts = category_counts(&manifest);
    let per_stage: BTreeMap<&str, Value> = StageClass::ALL
        .iter()
        .map(|&st| (st.name(), json!({ "train": counts.get(st, Split::Train), "test": counts.get(st, Split::Test) })))
        .collect();
    Ok(Json(json!({
        "version": version,
        "counts": per_stage,
        "frames": { "train": manifest.frame_count(Split::Train), "test": manifest.frame_count(Split::Test) },
        "boxes": counts.total(),
        "skipped_annotations": skipped,
    })))
}

/// Consensus annotations split by the frozen assignment, if any, then by the configured ratio.
fn manifest_of(s: &AppState) -> ApiResult<(cyclodet_core::labelstore::DatasetManifest, usize)> {
    let fixed = s.layout.read_splits().map_err(|e| ApiError::Internal(format!("splits: {e}")))?;
    let annotations = s.store.list();
    let (m, skipped) = build_manifest(&annotations, fixed.as_ref(), s.labels.test_ratio, s.labels.split_seed)?;
    if !skipped.is_empty() {
        log::warn!("{} non-consensus annotations left out of the dataset", skipped.len());
    }
    Ok((m, skipped.len()))
}
