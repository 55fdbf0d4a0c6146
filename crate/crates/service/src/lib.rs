//! Local HTTP inference service.
//!
//! Routes:
//! - `POST /v1/infer` multipart `lr` (image), `map` (8-bit grayscale image at
//!   LR size) or `t` (number), optional `model`. Responds with a PNG; headers
//!   carry the model id, scale, elapsed time and resolved map statistics.
//! - `POST /v1/sweep` multipart `lr`, optional `ts` (`start:end:step` or a
//!   comma list, default eleven values over `[0, 1]`), optional `model`.
//!   Responds with a tar archive holding one PNG per `t`.
//! - `GET /v1/models` lists loaded models.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use axum::extract::{DefaultBodyLimit, Multipart, State};
use axum::http::{header, HeaderMap, HeaderName, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use fxsr::generator::StyleMap;
use fxsr::inference::{decode_style_map, default_ts, parse_t_list, sweep_entry_name, SrModel};
use fxsr::raster::Image;
use fxsr::schedules::check_style_value;
use tower_http::cors::CorsLayer;

pub mod registry;

pub use registry::{ModelInfo, Registry};

pub const MAX_BODY: usize = 64 << 20;

pub const HEADER_MODEL: &str = "x-fxsr-model";
pub const HEADER_SCALE: &str = "x-fxsr-scale";
pub const HEADER_ELAPSED: &str = "x-fxsr-elapsed-ms";
pub const HEADER_MAP_MIN: &str = "x-fxsr-map-min";
pub const HEADER_MAP_MAX: &str = "x-fxsr-map-max";
pub const HEADER_MAP_MEAN: &str = "x-fxsr-map-mean";
pub const HEADER_TS: &str = "x-fxsr-ts";

/// An error response: status plus a JSON body `{"error": message}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    pub fn bad_request(message: String) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            message,
        }
    }

    pub fn not_found(message: String) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            message,
        }
    }

    pub fn unavailable(message: String) -> Self {
        Self {
            status: StatusCode::SERVICE_UNAVAILABLE,
            message,
        }
    }

    fn internal(message: String) -> Self {
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message,
        }
    }
}

impl From<fxsr::Error> for ApiError {
    fn from(e: fxsr::Error) -> Self {
        use fxsr::Error as E;
        match e {
            E::Domain(_) | E::Shape(_) | E::Data(_) | E::Image(_) => Self::bad_request(e.to_string()),
            other => Self::internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = Json(serde_json::json!({ "error": self.message }));
        (self.status, body).into_response()
    }
}

pub fn router(registry: Arc<Registry>) -> Router {
    Router::new()
        .route("/v1/models", get(models))
        .route("/v1/infer", post(infer))
        .route("/v1/sweep", post(sweep))
        .layer(DefaultBodyLimit::max(MAX_BODY))
        .layer(CorsLayer::permissive())
        .with_state(registry)
}

async fn models(State(registry): State<Arc<Registry>>) -> Json<Vec<ModelInfo>> {
    Json(registry.list())
}

/// Multipart fields by name; each name may appear once.
async fn read_fields(
    mut multipart: Multipart,
    allowed: &[&str],
) -> Result<HashMap<String, Vec<u8>>, ApiError> {
    let mut fields = HashMap::new();
    while let Some(field) = multipart
        .next_field()
        .await
        .map_err(|e| ApiError::bad_request(format!("malformed multipart body: {e}")))?
    {
        let name = field.name().unwrap_or_default().to_string();
        if !allowed.contains(&name.as_str()) {
            return Err(ApiError::bad_request(format!(
                "unexpected field {name:?} (expected one of {})",
                allowed.join(", ")
            )));
        }
        let bytes = field
            .bytes()
            .await
            .map_err(|e| ApiError::bad_request(format!("cannot read field {name:?}: {e}")))?;
        if fields.insert(name.clone(), bytes.to_vec()).is_some() {
            return Err(ApiError::bad_request(format!("field {name:?} given twice")));
        }
    }
    Ok(fields)
}

fn text_field(fields: &HashMap<String, Vec<u8>>, name: &str) -> Result<Option<String>, ApiError> {
    fields
        .get(name)
        .map(|b| {
            String::from_utf8(b.clone())
                .map(|s| s.trim().to_string())
                .map_err(|_| ApiError::bad_request(format!("field {name:?} is not UTF-8 text")))
        })
        .transpose()
}

fn decode_lr(fields: &HashMap<String, Vec<u8>>) -> Result<Image, ApiError> {
    let bytes = fields
        .get("lr")
        .ok_or_else(|| ApiError::bad_request("missing field \"lr\"".into()))?;
    let lr = Image::decode(bytes)
        .map_err(|e| ApiError::bad_request(format!("cannot decode lr image: {e}")))?;
    if lr.channels() != 3 {
        return Err(ApiError::bad_request(format!(
            "lr must be an RGB image, got {} channel(s)",
            lr.channels()
        )));
    }
    Ok(lr)
}

fn resolve_map(fields: &HashMap<String, Vec<u8>>, lr: &Image) -> Result<StyleMap, ApiError> {
    let t = text_field(fields, "t")?;
    match (fields.get("map"), t) {
        (Some(_), Some(_)) => Err(ApiError::bad_request(
            "give either \"map\" or \"t\", not both".into(),
        )),
        (None, None) => Err(ApiError::bad_request("one of \"map\" or \"t\" is required".into())),
        (Some(bytes), None) => Ok(decode_style_map(bytes, lr.dims())?),
        (None, Some(text)) => {
            let t: f64 = text
                .parse()
                .map_err(|_| ApiError::bad_request(format!("t must be a number, got {text:?}")))?;
            check_style_value(t)?;
            Ok(StyleMap::flat(lr.height(), lr.width(), t)?)
        }
    }
}

fn header_value(v: impl ToString) -> HeaderValue {
    HeaderValue::from_str(&v.to_string()).expect("ascii header value")
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

async fn infer(
    State(registry): State<Arc<Registry>>,
    multipart: Multipart,
) -> Result<Response, ApiError> {
    let start = Instant::now();
    let fields = read_fields(multipart, &["lr", "map", "t", "model"]).await?;
    let model = registry.resolve(text_field(&fields, "model")?.as_deref())?;
    let lr = decode_lr(&fields)?;
    let map = resolve_map(&fields, &lr)?;
    let (min, max, mean) = map.stats();
    let m = model.clone();
    let png = blocking(move || Ok(m.super_resolve_map(&lr, &map)?.encode_png()?)).await?;

    let mut headers = HeaderMap::new();
    headers.insert(header::CONTENT_TYPE, HeaderValue::from_static("image/png"));
    headers.insert(HeaderName::from_static(HEADER_MODEL), header_value(model.id()));
    headers.insert(HeaderName::from_static(HEADER_SCALE), header_value(model.scale()));
    headers.insert(HeaderName::from_static(HEADER_MAP_MIN), header_value(min));
    headers.insert(HeaderName::from_static(HEADER_MAP_MAX), header_value(max));
    headers.insert(HeaderName::from_static(HEADER_MAP_MEAN), header_value(mean));
    headers.insert(
        HeaderName::from_static(HEADER_ELAPSED),
        header_value(start.elapsed().as_millis()),
    );
    Ok((StatusCode::OK, headers, png).into_response())
}

fn tar_archive(entries: &[(String, Vec<u8>)]) -> std::io::Result<Vec<u8>> {
    let mut builder = tar::Builder::new(Vec::new());
    for (name, data) in entries {
        let mut h = tar::Header::new_ustar();
        h.set_size(data.len() as u64);
        h.set_mode(0o644);
        h.set_mtime(0);
        h.set_uid(0);
        h.set_gid(0);
        h.set_entry_type(tar::EntryType::Regular);
        builder.append_data(&mut h, name, data.as_slice())?;
    }
    builder.into_inner()
}

fn sweep_archive(model: &SrModel, lr: &Image, ts: &[f64]) -> Result<Vec<u8>, ApiError> {
    let outputs = model.sweep(lr, ts)?;
    let entries = ts
        .iter()
        .zip(outputs)
        .enumerate()
        .map(|(i, (&t, img))| Ok((sweep_entry_name(i, t), img.encode_png()?)))
        .collect::<Result<Vec<_>, ApiError>>()?;
    tar_archive(&entries).map_err(|e| ApiError::internal(format!("archive: {e}")))
}

async fn sweep(
    State(registry): State<Arc<Registry>>,
    multipart: Multipart,
) -> Result<Response, ApiError> {
    let start = Instant::now();
    let fields = read_fields(multipart, &["lr", "ts", "model"]).await?;
    let model = registry.resolve(text_field(&fields, "model")?.as_deref())?;
    let lr = decode_lr(&fields)?;
    let ts = match text_field(&fields, "ts")? {
        Some(spec) => parse_t_list(&spec)?,
        None => default_ts(),
    };
    let ts_header = ts.iter().map(|t| format!("{t}")).collect::<Vec<_>>().join(",");
    let m = model.clone();
    let body = blocking(move || sweep_archive(&m, &lr, &ts)).await?;

    let mut headers = HeaderMap::new();
    headers.insert(header::CONTENT_TYPE, HeaderValue::from_static("application/x-tar"));
    headers.insert(HeaderName::from_static(HEADER_MODEL), header_value(model.id()));
    headers.insert(HeaderName::from_static(HEADER_SCALE), header_value(model.scale()));
    headers.insert(HeaderName::from_static(HEADER_TS), header_value(ts_header));
    headers.insert(
        HeaderName::from_static(HEADER_ELAPSED),
        header_value(start.elapsed().as_millis()),
    );
    Ok((StatusCode::OK, headers, body).into_response())
}

/// Serves `registry` on an already bound listener until the future is dropped.
pub async fn serve(listener: tokio::net::TcpListener, registry: Arc<Registry>) -> std::io::Result<()> {
    axum::serve(listener, router(registry)).await
}

/// Binds `addr`, starts loading every checkpoint in `models_dir` in the
/// background and serves until Ctrl-C.
pub fn run(addr: SocketAddr, models_dir: &Path) -> std::io::Result<()> {
    if !models_dir.is_dir() {
        return Err(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("models directory {} does not exist", models_dir.display()),
        ));
    }
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let registry = Arc::new(Registry::new());
        let listener = tokio::net::TcpListener::bind(addr).await?;
        log::info!("listening on http://{}", listener.local_addr()?);
        let loader = registry.clone();
        let dir: PathBuf = models_dir.to_path_buf();
        tokio::task::spawn_blocking(move || {
            if let Err(e) = loader.load_dir(&dir) {
                log::error!("cannot scan {}: {e}", dir.display());
            }
        });
        axum::serve(listener, router(registry))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    })
}
