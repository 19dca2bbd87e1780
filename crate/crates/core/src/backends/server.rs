//! The mock world served over the wire protocol.

use std::io;
use std::net::{SocketAddr, TcpListener};
use std::thread::{self, JoinHandle};

use axum::body::Bytes;
use axum::http::{HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};
use tokio::sync::oneshot;

use super::mock;
use super::wire::{self, ErrorBody, REQUEST_ID_HEADER};
use super::{BackendError, Capability, EmbedInput};
use crate::imaging::FaceImage;
use crate::instructions::{AttributeEdit, AttributeKind};

struct Failure {
    status: StatusCode,
    body: ErrorBody,
}

impl Failure {
    fn bad_request(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            body: ErrorBody::new("bad_request", message),
        }
    }
}

impl From<BackendError> for Failure {
    fn from(e: BackendError) -> Self {
        let status = match e {
            BackendError::BothOrNeitherInput | BackendError::Imaging(_) => StatusCode::BAD_REQUEST,
            BackendError::NotSyntheticFace(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self {
            status,
            body: ErrorBody::new(e.code(), e.to_string()),
        }
    }
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, Failure> {
    serde_json::from_slice(body).map_err(|e| Failure::bad_request(e.to_string()))
}

fn image(b64: &str) -> Result<FaceImage, Failure> {
    wire::decode_image(b64).map_err(|e| Failure::from(BackendError::from(e)))
}

fn image_reply(img: &FaceImage) -> Result<Value, Failure> {
    let encoded = wire::encode_image(img).map_err(|e| Failure::from(BackendError::from(e)))?;
    Ok(json!({ "image": encoded }))
}

fn dispatch(capability: Capability, body: &[u8]) -> Result<Value, Failure> {
    match capability {
        Capability::Edit => {
            let req: wire::EditRequest = parse(body)?;
            image_reply(&mock::mock_edit(&image(&req.image)?, &req.instruction)?)
        }
        Capability::Sr => {
            let req: wire::ImageRequest = parse(body)?;
            image_reply(&mock::mock_sr(&image(&req.image)?))
        }
        Capability::Caption => {
            let req: wire::ImageRequest = parse(body)?;
            Ok(json!({ "text": mock::mock_caption(&image(&req.image)?)? }))
        }
        Capability::Embed => {
            let req: wire::EmbedRequest = parse(body)?;
            let embedding = match (req.text.as_deref(), req.image.as_deref()) {
                (Some(text), None) => mock::mock_embed(EmbedInput::Text(text))?,
                (None, Some(b64)) => mock::mock_embed(EmbedInput::Image(&image(b64)?))?,
                _ => return Err(BackendError::BothOrNeitherInput.into()),
            };
            let dim = embedding.dim();
            Ok(json!({ "vector": embedding.vector, "dim": dim }))
        }
        Capability::Quality => {
            let req: wire::ImageRequest = parse(body)?;
            Ok(json!({ "score": mock::mock_quality(&image(&req.image)?) }))
        }
        Capability::Judge => {
            let req: wire::JudgeRequest = parse(body)?;
            let kind: AttributeKind = req
                .attribute
                .parse()
                .map_err(|e| Failure::bad_request(format!("{e}")))?;
            let edit = AttributeEdit::new(kind, req.change).map_err(|e| Failure::bad_request(format!("{e}")))?;
            let co_edited = req
                .co_edited
                .iter()
                .map(|k| k.parse::<AttributeKind>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| Failure::bad_request(format!("{e}")))?;
            let correct = mock::mock_judge(&image(&req.input_image)?, &image(&req.output_image)?, &edit, &co_edited)?;
            Ok(json!({ "correct": correct }))
        }
        Capability::Complete => {
            let req: wire::CompleteRequest = parse(body)?;
            Ok(json!({ "text": mock::mock_complete(&req.prompt) }))
        }
        Capability::PairEdit => {
            let req: wire::PairEditRequest = parse(body)?;
            image_reply(&mock::mock_pair_edit(
                &image(&req.image)?,
                &req.source_caption,
                &req.target_caption,
            )?)
        }
    }
}

fn respond(capability: Capability, headers: &HeaderMap, body: &[u8]) -> Response {
    let mut response = match dispatch(capability, body) {
        Ok(value) => Json(value).into_response(),
        Err(f) => {
            log::debug!("{capability}: {} {}", f.status, f.body.error.message);
            (f.status, Json(f.body)).into_response()
        }
    };
    if let Some(id) = headers.get(REQUEST_ID_HEADER) {
        response.headers_mut().insert(REQUEST_ID_HEADER, id.clone());
    } else if let Ok(id) = HeaderValue::from_str("-") {
        response.headers_mut().insert(REQUEST_ID_HEADER, id);
    }
    response
}

/// Router exposing every mock capability at its wire path.
pub fn mock_router() -> Router {
    Capability::ALL.into_iter().fold(Router::new(), |router, cap| {
        router.route(
            cap.path(),
            post(move |headers: HeaderMap, body: Bytes| async move { respond(cap, &headers, &body) }),
        )
    })
}

/// A server running on a background thread; stopped when dropped.
pub struct MockServerHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl MockServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for MockServerHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn runtime() -> io::Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
}

/// Serves `router` on an ephemeral loopback port.
pub fn spawn_router(router: Router) -> io::Result<MockServerHandle> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let rt = runtime()?;
    let (tx, rx) = oneshot::channel();
    let thread = thread::spawn(move || {
        rt.block_on(async move {
            let listener = match tokio::net::TcpListener::from_std(listener) {
                Ok(l) => l,
                Err(e) => {
                    log::error!("mock server: {e}");
                    return;
                }
            };
            let served = axum::serve(listener, router)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
            if let Err(e) = served {
                log::error!("mock server: {e}");
            }
        });
    });
    Ok(MockServerHandle {
        addr,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}

pub fn spawn_mock_server() -> io::Result<MockServerHandle> {
    spawn_router(mock_router())
}

/// Serves the mock world on `addr` until the process exits.
pub fn serve(addr: SocketAddr) -> io::Result<()> {
    runtime()?.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        log::info!("mock backends listening on http://{}", listener.local_addr()?);
        axum::serve(listener, mock_router()).await
    })
}
