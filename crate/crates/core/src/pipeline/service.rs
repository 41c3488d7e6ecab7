//! HTTP backend of the annotation tool.
//!
//! | method | path                | body / response                                  |
//! |--------|---------------------|--------------------------------------------------|
//! | GET    | `/images`           | `[{image_id, left, right}]` annotation status    |
//! | GET    | `/images/{id}`      | PNG raster                                       |
//! | GET    | `/annotations/{id}` | `{image_id, left, right}` boxes or `null`        |
//! | PUT    | `/annotations/{id}` | `{side, cx, cy}` in original pixels, returns box |
//! | GET    | `/detections/{id}`  | SVM detector prefill, 404 without a model        |
//!
//! Writes go through one mutex and rewrite the CSV via a temp file and rename.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use super::manifest::DatasetManifest;
use crate::detect::{
    annotation_box, detect_svm, preprocess, write_annotations, AnnotationRecord, PreprocessConfig, ScanConfig, Side,
};
use crate::error::{io_err, Error, Result};
use crate::imaging::{encode_png, load_image, BBox};
use crate::svm::LinearSvmModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxJson {
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
}

impl From<BBox> for BoxJson {
    fn from(b: BBox) -> Self {
        Self {
            x: b.x,
            y: b.y,
            w: b.w,
            h: b.h,
        }
    }
}

#[derive(Debug, Serialize)]
struct ImageStatus<'a> {
    image_id: &'a str,
    left: bool,
    right: bool,
}

#[derive(Debug, Serialize)]
struct AnnotationJson {
    image_id: String,
    left: Option<BoxJson>,
    right: Option<BoxJson>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PutBody {
    side: Side,
    cx: i64,
    cy: i64,
}

#[derive(Debug, Serialize)]
struct DetectionJson {
    side: Side,
    #[serde(flatten)]
    bbox: BoxJson,
    score: f64,
}

/// Shared state of the service.
pub struct AnnotationService {
    manifest: DatasetManifest,
    csv: PathBuf,
    scale: f64,
    detector: Option<(LinearSvmModel, PreprocessConfig, ScanConfig)>,
    store: Mutex<BTreeMap<(String, Side), AnnotationRecord>>,
}

impl AnnotationService {
    /// `csv` receives every accepted annotation; existing manifest
    /// annotations seed the store. `scale` is the detection scale the
    /// fixed window size refers to.
    pub fn new(manifest: DatasetManifest, csv: impl Into<PathBuf>, scale: f64) -> Self {
        let store = manifest
            .annotations()
            .into_iter()
            .map(|a| ((a.image_id.clone(), a.side), a))
            .collect();
        Self {
            manifest,
            csv: csv.into(),
            scale,
            detector: None,
            store: Mutex::new(store),
        }
    }

    pub fn with_detector(mut self, model: LinearSvmModel, pre: PreprocessConfig, scan: ScanConfig) -> Self {
        self.detector = Some((model, pre, scan));
        self
    }

    pub fn annotations(&self) -> Vec<AnnotationRecord> {
        self.store.lock().unwrap().values().cloned().collect()
    }

    fn image_path(&self, id: &str) -> Option<&Path> {
        self.manifest.get(id).map(|r| r.path.as_path())
    }
}

fn fail(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(serde_json::json!({ "error": msg.into() }))).into_response()
}

fn not_found(id: &str) -> Response {
    fail(StatusCode::NOT_FOUND, format!("unknown image id {id:?}"))
}

fn internal(e: Error) -> Response {
    fail(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
}

type Shared = State<Arc<AnnotationService>>;

async fn list_images(State(s): Shared) -> Response {
    let store = s.store.lock().unwrap();
    let list: Vec<ImageStatus<'_>> = s
        .manifest
        .records
        .iter()
        .map(|r| ImageStatus {
            image_id: &r.image_id,
            left: store.contains_key(&(r.image_id.clone(), Side::Left)),
            right: store.contains_key(&(r.image_id.clone(), Side::Right)),
        })
        .collect();
    Json(list).into_response()
}

async fn get_image(State(s): Shared, UrlPath(id): UrlPath<String>) -> Response {
    let Some(path) = s.image_path(&id) else {
        return not_found(&id);
    };
    match load_image(path) {
        Ok(img) => ([(header::CONTENT_TYPE, "image/png")], encode_png(&img)).into_response(),
        Err(e) => internal(e),
    }
}

fn annotation_json(s: &AnnotationService, id: &str) -> AnnotationJson {
    let store = s.store.lock().unwrap();
    let at = |side| store.get(&(id.to_string(), side)).map(|a| BoxJson::from(a.bbox));
    AnnotationJson {
        image_id: id.to_string(),
        left: at(Side::Left),
        right: at(Side::Right),
    }
}

async fn get_annotation(State(s): Shared, UrlPath(id): UrlPath<String>) -> Response {
    if s.image_path(&id).is_none() {
        return not_found(&id);
    }
    Json(annotation_json(&s, &id)).into_response()
}

fn write_atomic(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    write_annotations(&tmp, records)?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

async fn put_annotation(State(s): Shared, UrlPath(id): UrlPath<String>, body: Bytes) -> Response {
    let Some(path) = s.image_path(&id) else {
        return not_found(&id);
    };
    let body: PutBody = match serde_json::from_slice(&body) {
        Ok(b) => b,
        Err(e) => return fail(StatusCode::UNPROCESSABLE_ENTITY, format!("malformed body: {e}")),
    };
    let img = match load_image(path) {
        Ok(img) => img,
        Err(e) => return internal(e),
    };
    let bounds = img.bounds();
    if !(0..bounds.w).contains(&body.cx) || !(0..bounds.h).contains(&body.cy) {
        return fail(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!(
                "center ({}, {}) lies outside the {}x{} image",
                body.cx, body.cy, bounds.w, bounds.h
            ),
        );
    }
    let bbox = annotation_box(body.cx, body.cy, s.scale);
    if !bounds.contains_box(&bbox) {
        return fail(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!(
                "a {}x{} box at ({}, {}) leaves the image",
                bbox.w, bbox.h, body.cx, body.cy
            ),
        );
    }
    let record = AnnotationRecord {
        image_id: id.clone(),
        side: body.side,
        bbox,
    };
    let key = (id, body.side);
    let mut store = s.store.lock().unwrap();
    let previous = store.insert(key.clone(), record);
    let all: Vec<AnnotationRecord> = store.values().cloned().collect();
    if let Err(e) = write_atomic(&s.csv, &all) {
        match previous {
            Some(p) => store.insert(key, p),
            None => store.remove(&key),
        };
        return internal(e);
    }
    Json(BoxJson::from(bbox)).into_response()
}

async fn get_detections(State(s): Shared, UrlPath(id): UrlPath<String>) -> Response {
    let Some(path) = s.image_path(&id) else {
        return not_found(&id);
    };
    let Some((model, pre, scan)) = &s.detector else {
        return fail(StatusCode::NOT_FOUND, "no detector model configured");
    };
    let found = load_image(path)
        .and_then(|img| preprocess(&img, pre))
        .and_then(|p| detect_svm(&p, model, scan));
    match found {
        Ok((l, r)) => Json([(Side::Left, l), (Side::Right, r)].map(|(side, d)| DetectionJson {
            side,
            bbox: d.to_original().into(),
            score: d.score,
        }))
        .into_response(),
        Err(e) => internal(e),
    }
}

pub fn annotation_router(service: Arc<AnnotationService>) -> Router {
    Router::new()
        .route("/images", get(list_images))
        .route("/images/{id}", get(get_image))
        .route("/annotations/{id}", get(get_annotation).put(put_annotation))
        .route("/detections/{id}", get(get_detections))
        .with_state(service)
}

/// Serves the annotation API on `127.0.0.1:port` until the process ends.
pub fn serve_annotation(service: AnnotationService, port: u16) -> Result<()> {
    let addr = SocketAddr::from(([127, 0, 0, 1], port));
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_io()
        .build()
        .map_err(io_err("tokio runtime"))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(io_err(format!("{addr}")))?;
        axum::serve(listener, annotation_router(Arc::new(service)))
            .await
            .map_err(io_err(format!("{addr}")))
    })
}
