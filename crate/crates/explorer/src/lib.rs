//! HTTP service over a directory of bitstreams: list them, read their
//! metadata and decode any of them at a receiver-chosen β.
//!
//! Store layout: `<id>.mrc` bitstreams, optionally with the original image
//! as `<id>.png` next to it (then `/decode` also reports PSNR).

use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::extract::{Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use lru::LruCache;
use mrc_core::codec::{bpp_of, decode_latent, reconstruct, BitstreamHeader, HEADER_LEN};
use mrc_core::conditioning::RealismWeight;
use mrc_core::data::{load_image, Dims};
use mrc_core::metrics::{cap_psnr, psnr};
use mrc_core::model::{model_id_hex, CodecModel};
use mrc_core::Error;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

pub const BITSTREAM_EXT: &str = "mrc";
/// Cache keys quantize β to multiples of `1 / BETA_STEPS`.
pub const BETA_STEPS: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredItem {
    pub id: String,
    pub filename: String,
    pub bpp: f64,
    pub orig_dims: Dims,
    pub model_id: String,
}

/// A decoded reconstruction as served.
#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub png: Vec<u8>,
    pub bpp: f64,
    pub psnr: Option<f64>,
}

pub struct AppState {
    model: Arc<CodecModel>,
    store: PathBuf,
    cache: Mutex<LruCache<(String, u32), Arc<Rendered>>>,
    workers: Semaphore,
}

impl AppState {
    pub fn new(model: CodecModel, store: impl Into<PathBuf>, cache_capacity: usize, workers: usize) -> Self {
        AppState {
            model: Arc::new(model),
            store: store.into(),
            cache: Mutex::new(LruCache::new(NonZeroUsize::new(cache_capacity.max(1)).unwrap())),
            workers: Semaphore::new(workers.max(1)),
        }
    }

    pub fn store(&self) -> &Path {
        &self.store
    }

    pub fn cached_entries(&self) -> usize {
        self.cache.lock().unwrap().len()
    }
}

/// Checks `0 <= β <= 2.56` and returns the cache grid index.
pub fn beta_key(beta: f64) -> mrc_core::Result<u32> {
    RealismWeight::infer(beta)?;
    Ok((beta * BETA_STEPS).round() as u32)
}

fn item_from_file(path: &Path) -> mrc_core::Result<StoredItem> {
    use std::io::Read;
    let mut head = [0u8; HEADER_LEN];
    let mut f = std::fs::File::open(path)?;
    f.read_exact(&mut head)?;
    let header = BitstreamHeader::parse(&head)?;
    let len = f.metadata()?.len() as usize;
    let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
    Ok(StoredItem {
        id,
        filename: path.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string(),
        bpp: bpp_of(len, header.orig_dims()),
        orig_dims: header.orig_dims(),
        model_id: model_id_hex(&header.model_id),
    })
}

/// Every readable bitstream in `dir`, sorted by id. Files whose header does
/// not parse are skipped.
pub fn list_items(dir: &Path) -> mrc_core::Result<Vec<StoredItem>> {
    if !dir.is_dir() {
        return Err(Error::Data(format!("store directory {} does not exist", dir.display())));
    }
    let mut items = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some(BITSTREAM_EXT) || !path.is_file() {
            continue;
        }
        match item_from_file(&path) {
            Ok(item) => items.push(item),
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    items.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(items)
}

fn find_item(dir: &Path, id: &str) -> Result<StoredItem, ApiError> {
    list_items(dir)?
        .into_iter()
        .find(|i| i.id == id)
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown id {id}")))
}

/// Decodes `item` at the β of grid index `key`.
pub fn render(model: &CodecModel, dir: &Path, item: &StoredItem, key: u32) -> mrc_core::Result<Rendered> {
    let beta = RealismWeight::infer(key as f64 / BETA_STEPS)?;
    let bytes = std::fs::read(dir.join(&item.filename))?;
    let latent = decode_latent(&bytes, model)?;
    let img = reconstruct(&latent, beta, model)?;
    let original = dir.join(format!("{}.png", item.id));
    let psnr = if original.is_file() {
        Some(cap_psnr(psnr(&load_image(&original)?, &img)?))
    } else {
        None
    };
    Ok(Rendered {
        png: img.encode_png()?,
        bpp: bpp_of(bytes.len(), latent.header.orig_dims()),
        psnr,
    })
}

#[derive(Debug)]
pub struct ApiError(pub StatusCode, pub String);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::OutOfRange(_) => StatusCode::BAD_REQUEST,
            Error::ModelMismatch { .. } => StatusCode::CONFLICT,
            Error::Bitstream(_) | Error::Truncated => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

#[derive(Deserialize)]
pub struct DecodeQuery {
    id: String,
    beta: String,
}

#[derive(Deserialize)]
pub struct MetaQuery {
    id: String,
}

async fn items_handler(State(st): State<Arc<AppState>>) -> Result<Json<Vec<StoredItem>>, ApiError> {
    Ok(Json(list_items(&st.store)?))
}

async fn meta_handler(State(st): State<Arc<AppState>>, Query(q): Query<MetaQuery>) -> Result<Json<StoredItem>, ApiError> {
    Ok(Json(find_item(&st.store, &q.id)?))
}

async fn decode_handler(State(st): State<Arc<AppState>>, Query(q): Query<DecodeQuery>) -> Result<Response, ApiError> {
    let beta: f64 = q
        .beta
        .trim()
        .parse()
        .map_err(|_| ApiError(StatusCode::BAD_REQUEST, format!("beta {:?} is not a number", q.beta)))?;
    let key = beta_key(beta)?;
    let item = find_item(&st.store, &q.id)?;
    let cache_key = (item.id.clone(), key);
    let hit = st.cache.lock().unwrap().get(&cache_key).cloned();
    let rendered = match hit {
        Some(r) => r,
        None => {
            let _permit = st
                .workers
                .acquire()
                .await
                .map_err(|e| ApiError(StatusCode::SERVICE_UNAVAILABLE, e.to_string()))?;
            let (model, dir) = (st.model.clone(), st.store.clone());
            let r = tokio::task::spawn_blocking(move || render(&model, &dir, &item, key))
                .await
                .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
            let r = Arc::new(r);
            st.cache.lock().unwrap().put(cache_key, r.clone());
            r
        }
    };
    let mut resp = (StatusCode::OK, rendered.png.clone()).into_response();
    let h = resp.headers_mut();
    h.insert(header::CONTENT_TYPE, HeaderValue::from_static("image/png"));
    h.insert("x-bpp", HeaderValue::from_str(&format!("{:.6}", rendered.bpp)).unwrap());
    if let Some(p) = rendered.psnr {
        h.insert("x-psnr", HeaderValue::from_str(&format!("{p:.4}")).unwrap());
    }
    Ok(resp)
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/items", get(items_handler))
        .route("/meta", get(meta_handler))
        .route("/decode", get(decode_handler))
        .with_state(state)
}
