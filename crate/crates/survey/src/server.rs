//! HTTP/JSON API over a dissection catalog and an annotation log.
//!
//! Reads go against an immutable snapshot of the annotation set that is
//! swapped after every append; appends are serialized through one mutex
//! around the log file.

use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use dissect_core::dataset::PatchRect;
use dissect_core::dissect::{CatalogFile, CATALOG_FILE};
use serde::{Deserialize, Serialize};

use crate::annotation::{Annotation, AnnotationInput, UnitRef};
use crate::error::{Error, Result};
use crate::lexicon::Lexicon;
use crate::report::{build_report, Report};
use crate::store::{AnnotationLog, Submission};

/// URL prefix under which catalog files are served.
pub const ASSET_PREFIX: &str = "/assets";

/// Reads and validates `dir/catalog.json`.
pub fn load_catalog(dir: &Path) -> Result<CatalogFile> {
    let path = dir.join(CATALOG_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let catalog: CatalogFile = serde_json::from_str(&text)?;
    catalog
        .validate()
        .map_err(|e| Error::Catalog(format!("{}: {e}", path.display())))?;
    if catalog.survey_units.is_empty() {
        return Err(Error::Catalog(format!("{}: no survey units selected", path.display())));
    }
    Ok(catalog)
}

struct LoadedCatalog {
    dir: PathBuf,
    file: CatalogFile,
}

impl LoadedCatalog {
    fn unit_ref(&self, unit_index: usize) -> UnitRef {
        UnitRef {
            model: self.file.model_id.clone(),
            layer: self.file.layer_id.clone(),
            unit_index,
        }
    }

    fn in_survey(&self, unit_id: &str) -> bool {
        self.file.survey_units.iter().any(|u| u == unit_id)
    }
}

/// Shared service state.
pub struct SurveyService {
    lexicon: Lexicon,
    catalog: RwLock<Option<Arc<LoadedCatalog>>>,
    log: Mutex<AnnotationLog>,
    snapshot: RwLock<Arc<Vec<Annotation>>>,
}

impl SurveyService {
    /// A service with no catalog yet; unit endpoints answer 503 until
    /// [`SurveyService::attach_catalog`] is called.
    pub fn new(lexicon: Lexicon, log: AnnotationLog) -> Arc<Self> {
        let snapshot = Arc::new(log.annotations().to_vec());
        Arc::new(Self {
            lexicon,
            catalog: RwLock::new(None),
            log: Mutex::new(log),
            snapshot: RwLock::new(snapshot),
        })
    }

    pub fn attach_catalog(&self, dir: &Path, file: CatalogFile) {
        let loaded = LoadedCatalog {
            dir: dir.to_path_buf(),
            file,
        };
        *self.catalog.write().expect("catalog lock") = Some(Arc::new(loaded));
    }

    fn catalog(&self) -> std::result::Result<Arc<LoadedCatalog>, ApiError> {
        self.catalog
            .read()
            .expect("catalog lock")
            .clone()
            .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "catalog not loaded"))
    }

    /// Current immutable view of all stored annotations.
    pub fn annotations(&self) -> Arc<Vec<Annotation>> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    pub fn report(&self) -> Report {
        build_report(&self.annotations(), &self.lexicon)
    }

    fn submit(&self, input: AnnotationInput, unit: UnitRef) -> Result<Submission> {
        let mut log = self.log.lock().expect("log lock");
        let out = log.submit(input, unit, &self.lexicon, now_ms())?;
        if matches!(out, Submission::Created(_)) {
            *self.snapshot.write().expect("snapshot lock") = Arc::new(log.annotations().to_vec());
        }
        Ok(out)
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Debug)]
struct ApiError {
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

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { error: self.message })).into_response()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_id: String,
    pub layer_id: String,
    /// Units in the catalog.
    pub units: usize,
    pub survey_units: usize,
    pub annotations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitSummary {
    pub id: String,
    pub unit_index: usize,
    pub thumbnail: String,
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitList {
    pub reader: Option<String>,
    pub units: Vec<UnitSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchDetail {
    pub rank: usize,
    pub patch_id: String,
    pub score: f32,
    pub argmax_row: usize,
    pub argmax_col: usize,
    pub case_id: String,
    pub rect: PatchRect,
    pub context_image: String,
    pub image_width: usize,
    pub image_height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitDetail {
    pub id: String,
    pub unit_ref: UnitRef,
    pub threshold: f32,
    pub montage: String,
    pub patches: Vec<PatchDetail>,
    /// The requesting reader's earlier reports on this unit.
    pub annotations: Vec<Annotation>,
}

#[derive(Debug, Deserialize)]
struct ReaderQuery {
    reader: Option<String>,
}

fn asset_url(rel: &str) -> String {
    format!("{ASSET_PREFIX}/{rel}")
}

pub fn router(service: Arc<SurveyService>) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/units", get(list_units))
        .route("/api/units/{id}", get(unit_detail))
        .route("/api/units/{id}/annotations", axum::routing::post(post_annotation))
        .route("/api/report", get(report))
        .route("/assets/{*path}", get(asset))
        .with_state(service)
}

/// Serves `router(service)` on an already bound listener until `shutdown`
/// resolves. Nothing needs flushing on exit: every append is already synced.
pub async fn serve(
    listener: tokio::net::TcpListener,
    service: Arc<SurveyService>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(service))
        .with_graceful_shutdown(shutdown)
        .await
}

type ApiResult<T> = std::result::Result<T, ApiError>;

async fn health(State(svc): State<Arc<SurveyService>>) -> ApiResult<Json<Health>> {
    let cat = svc.catalog()?;
    Ok(Json(Health {
        status: "ok".into(),
        model_id: cat.file.model_id.clone(),
        layer_id: cat.file.layer_id.clone(),
        units: cat.file.units.len(),
        survey_units: cat.file.survey_units.len(),
        annotations: svc.annotations().len(),
    }))
}

async fn list_units(
    State(svc): State<Arc<SurveyService>>,
    Query(q): Query<ReaderQuery>,
) -> ApiResult<Json<UnitList>> {
    let cat = svc.catalog()?;
    let annotations = svc.annotations();
    let units = cat
        .file
        .survey_units
        .iter()
        .filter_map(|id| cat.file.unit(id))
        .map(|u| {
            let unit_ref = cat.unit_ref(u.unit_index);
            let complete = q.reader.as_deref().is_some_and(|r| {
                annotations
                    .iter()
                    .any(|a| a.reader_id == r && a.unit_ref == unit_ref)
            });
            UnitSummary {
                id: u.unit_id.clone(),
                unit_index: u.unit_index,
                thumbnail: asset_url(&u.montage),
                complete,
            }
        })
        .collect();
    Ok(Json(UnitList { reader: q.reader, units }))
}

async fn unit_detail(
    State(svc): State<Arc<SurveyService>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<ReaderQuery>,
) -> ApiResult<Json<UnitDetail>> {
    let cat = svc.catalog()?;
    let unit = cat
        .file
        .unit(&id)
        .filter(|_| cat.in_survey(&id))
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown unit `{id}`")))?;
    let mut patches = Vec::with_capacity(unit.top_k.len());
    for (rank, e) in unit.top_k.iter().enumerate() {
        // The catalog was validated on load, so lookups cannot miss.
        let p = cat.file.patch(&e.patch_id).expect("validated catalog");
        let c = cat.file.case(&p.case_id).expect("validated catalog");
        patches.push(PatchDetail {
            rank,
            patch_id: e.patch_id.clone(),
            score: e.score,
            argmax_row: e.argmax_row,
            argmax_col: e.argmax_col,
            case_id: p.case_id.clone(),
            rect: p.rect,
            context_image: asset_url(&c.image),
            image_width: c.width,
            image_height: c.height,
        });
    }
    let unit_ref = cat.unit_ref(unit.unit_index);
    let annotations = match q.reader.as_deref() {
        Some(r) => svc
            .annotations()
            .iter()
            .filter(|a| a.reader_id == r && a.unit_ref == unit_ref)
            .cloned()
            .collect(),
        None => Vec::new(),
    };
    Ok(Json(UnitDetail {
        id: unit.unit_id.clone(),
        unit_ref,
        threshold: unit.threshold,
        montage: asset_url(&unit.montage),
        patches,
        annotations,
    }))
}

async fn post_annotation(
    State(svc): State<Arc<SurveyService>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<Annotation>)> {
    let cat = svc.catalog()?;
    let unit = cat
        .file
        .unit(&id)
        .filter(|_| cat.in_survey(&id))
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown unit `{id}`")))?;
    let input: AnnotationInput = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("malformed annotation: {e}")))?;
    let unit_ref = cat.unit_ref(unit.unit_index);
    // The log write includes an fsync; keep it off the async workers.
    let result = tokio::task::spawn_blocking(move || svc.submit(input, unit_ref))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    match result {
        Ok(Submission::Created(a)) => Ok((StatusCode::CREATED, Json(a))),
        Ok(Submission::Replayed(a)) => Ok((StatusCode::OK, Json(a))),
        Err(e @ Error::Invalid(_)) => Err(ApiError::new(StatusCode::BAD_REQUEST, e.to_string())),
        Err(e @ Error::Conflict { .. }) => Err(ApiError::new(StatusCode::CONFLICT, e.to_string())),
        Err(e) => {
            log::error!("annotation append failed: {e}");
            Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
        }
    }
}

async fn report(State(svc): State<Arc<SurveyService>>) -> Json<Report> {
    Json(svc.report())
}

async fn asset(State(svc): State<Arc<SurveyService>>, UrlPath(rel): UrlPath<String>) -> ApiResult<Response> {
    let cat = svc.catalog()?;
    let rel_path = Path::new(&rel);
    if !rel_path.components().all(|c| matches!(c, Component::Normal(_))) {
        return Err(ApiError::new(StatusCode::NOT_FOUND, "not found"));
    }
    let full = cat.dir.join(rel_path);
    let bytes = tokio::fs::read(&full)
        .await
        .map_err(|_| ApiError::new(StatusCode::NOT_FOUND, "not found"))?;
    let mime = match full.extension().and_then(|e| e.to_str()) {
        Some("png") => "image/png",
        Some("json") => "application/json",
        _ => "application/octet-stream",
    };
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}
