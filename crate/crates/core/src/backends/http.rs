//! Blocking HTTP client for the backend wire protocol.
//!
//! Transport failures and 5xx responses are retried with exponential
//! backoff; 4xx responses fail immediately. Every request carries an
//! `x-request-id` header that servers echo back and that is logged with the
//! outcome.

use std::collections::BTreeMap;
use std::thread;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::wire::{self, ErrorBody, REQUEST_ID_HEADER};
use super::{
    AttributeJudge, BackendError, BackendResult, Capability, Captioner, CompletionParams, EmbedInput, Embedder,
    Embedding, ImageEditor, PairedEditor, QualityScorer, SuperResolver, TextCompleter,
};
use crate::imaging::FaceImage;
use crate::instructions::{AttributeEdit, AttributeKind};

fn default_timeout_ms() -> u64 {
    60_000
}

fn default_max_retries() -> u32 {
    2
}

fn default_backoff_ms() -> u64 {
    500
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendEndpoint {
    pub base_url: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// Delay before the first retry; doubles on each further retry.
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    /// Environment variable holding a bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_token_env: Option<String>,
}

impl BackendEndpoint {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            backoff_ms: default_backoff_ms(),
            auth_token_env: None,
        }
    }

    pub fn validate(&self) -> BackendResult<()> {
        if self.timeout_ms == 0 {
            return Err(BackendError::Config("timeout_ms must be positive".into()));
        }
        if !self.base_url.starts_with("http://") && !self.base_url.starts_with("https://") {
            return Err(BackendError::Config(format!(
                "base_url {:?} is not an http(s) URL",
                self.base_url
            )));
        }
        Ok(())
    }

    pub fn url(&self, capability: Capability) -> String {
        format!("{}{}", self.base_url.trim_end_matches('/'), capability.path())
    }
}

/// Backend section of the run configuration.
///
/// ```toml
/// [backends]
/// mock = false
/// [backends.default]
/// base_url = "http://127.0.0.1:8080"
/// [backends.endpoints.complete]
/// base_url = "http://127.0.0.1:9000"
/// auth_token_env = "LLM_TOKEN"
/// ```
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendsConfig {
    #[serde(default)]
    pub mock: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<BackendEndpoint>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub endpoints: BTreeMap<Capability, BackendEndpoint>,
}

impl BackendsConfig {
    pub fn mock() -> Self {
        Self {
            mock: true,
            ..Default::default()
        }
    }

    /// All capabilities served from one base URL.
    pub fn single(endpoint: BackendEndpoint) -> Self {
        Self {
            mock: false,
            default: Some(endpoint),
            endpoints: BTreeMap::new(),
        }
    }

    pub fn endpoint_for(&self, capability: Capability) -> BackendResult<BackendEndpoint> {
        self.endpoints
            .get(&capability)
            .or(self.default.as_ref())
            .cloned()
            .ok_or_else(|| BackendError::Config(format!("no endpoint configured for {capability}")))
    }

    pub fn describe(&self) -> String {
        if self.mock {
            return "mock".into();
        }
        let mut parts = Vec::new();
        if let Some(d) = &self.default {
            parts.push(format!("default={}", d.base_url));
        }
        for (cap, ep) in &self.endpoints {
            parts.push(format!("{cap}={}", ep.base_url));
        }
        parts.join(" ")
    }
}

/// One endpoint, speaking every capability of the wire protocol.
#[derive(Debug)]
pub struct HttpBackend {
    endpoint: BackendEndpoint,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(endpoint: BackendEndpoint) -> BackendResult<Self> {
        endpoint.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(endpoint.timeout_ms))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(Self { endpoint, client })
    }

    pub fn endpoint(&self) -> &BackendEndpoint {
        &self.endpoint
    }

    fn token(&self) -> Option<String> {
        self.endpoint
            .auth_token_env
            .as_deref()
            .and_then(|name| std::env::var(name).ok())
    }

    /// POSTs `request` to the capability's path and decodes the reply.
    pub fn call<Req, Resp>(&self, capability: Capability, request: &Req) -> BackendResult<Resp>
    where
        Req: Serialize,
        Resp: DeserializeOwned,
    {
        let body = serde_json::to_vec(request).map_err(|e| BackendError::Protocol {
            capability,
            message: format!("cannot encode request: {e}"),
        })?;
        let url = self.endpoint.url(capability);
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            let request_id = uuid::Uuid::new_v4().to_string();
            let mut builder = self
                .client
                .post(&url)
                .header("content-type", "application/json")
                .header(REQUEST_ID_HEADER, &request_id)
                .body(body.clone());
            if let Some(token) = self.token() {
                builder = builder.bearer_auth(token);
            }
            let failure = match builder.send() {
                Ok(response) => {
                    let status = response.status();
                    let echoed = response
                        .headers()
                        .get(REQUEST_ID_HEADER)
                        .and_then(|v| v.to_str().ok())
                        .unwrap_or("-")
                        .to_string();
                    log::debug!("{capability} request {request_id} (echo {echoed}) -> {status}");
                    let bytes = response.bytes().map_err(|e| BackendError::Protocol {
                        capability,
                        message: format!("cannot read body: {e}"),
                    });
                    if status.is_success() {
                        return serde_json::from_slice(&bytes?).map_err(|e| BackendError::Protocol {
                            capability,
                            message: format!("response does not match schema: {e}"),
                        });
                    }
                    let (code, message) = match bytes.ok().and_then(|b| serde_json::from_slice::<ErrorBody>(&b).ok()) {
                        Some(body) => (body.error.code, body.error.message),
                        None => ("unknown".to_string(), status.to_string()),
                    };
                    if status.is_client_error() {
                        return Err(BackendError::Rejected {
                            capability,
                            status: status.as_u16(),
                            code,
                            message,
                        });
                    }
                    format!("HTTP {status} {code}: {message}")
                }
                Err(e) => format!("transport: {e}"),
            };
            log::warn!("{capability} request {request_id} attempt {attempts} failed: {failure}");
            if attempts > self.endpoint.max_retries {
                return Err(BackendError::Unavailable {
                    capability,
                    attempts,
                    message: failure,
                });
            }
            let delay = self.endpoint.backoff_ms.saturating_mul(1 << (attempts - 1).min(20));
            thread::sleep(Duration::from_millis(delay));
        }
    }

    fn image_reply(&self, capability: Capability, reply: wire::ImageResponse) -> BackendResult<FaceImage> {
        wire::decode_image(&reply.image).map_err(|e| BackendError::Protocol {
            capability,
            message: format!("bad image: {e}"),
        })
    }
}

impl ImageEditor for HttpBackend {
    fn edit(&self, image: &FaceImage, instruction: &str) -> BackendResult<FaceImage> {
        let req = wire::EditRequest {
            image: wire::encode_image(image)?,
            instruction: instruction.to_string(),
        };
        let reply = self.call(Capability::Edit, &req)?;
        self.image_reply(Capability::Edit, reply)
    }
}

impl SuperResolver for HttpBackend {
    fn upscale(&self, image: &FaceImage) -> BackendResult<FaceImage> {
        let req = wire::ImageRequest {
            image: wire::encode_image(image)?,
        };
        let reply = self.call(Capability::Sr, &req)?;
        self.image_reply(Capability::Sr, reply)
    }
}

impl Captioner for HttpBackend {
    fn caption(&self, image: &FaceImage) -> BackendResult<String> {
        let req = wire::ImageRequest {
            image: wire::encode_image(image)?,
        };
        let reply: wire::TextResponse = self.call(Capability::Caption, &req)?;
        Ok(reply.text)
    }
}

impl Embedder for HttpBackend {
    fn embed(&self, input: EmbedInput<'_>) -> BackendResult<Embedding> {
        let req = match input {
            EmbedInput::Text(t) => wire::EmbedRequest {
                text: Some(t.to_string()),
                image: None,
            },
            EmbedInput::Image(i) => wire::EmbedRequest {
                text: None,
                image: Some(wire::encode_image(i)?),
            },
        };
        let reply: wire::EmbedResponse = self.call(Capability::Embed, &req)?;
        if reply.dim != reply.vector.len() {
            return Err(BackendError::Protocol {
                capability: Capability::Embed,
                message: format!("dim {} but {} values", reply.dim, reply.vector.len()),
            });
        }
        let embedding = Embedding { vector: reply.vector };
        if !embedding.is_no_signal() && (embedding.norm() - 1.0).abs() > 1e-6 {
            return Err(BackendError::Protocol {
                capability: Capability::Embed,
                message: format!("vector norm {} is not 1", embedding.norm()),
            });
        }
        Ok(embedding)
    }
}

impl QualityScorer for HttpBackend {
    fn score(&self, image: &FaceImage) -> BackendResult<f64> {
        let req = wire::ImageRequest {
            image: wire::encode_image(image)?,
        };
        let reply: wire::QualityResponse = self.call(Capability::Quality, &req)?;
        Ok(reply.score)
    }
}

impl AttributeJudge for HttpBackend {
    fn judge(
        &self,
        input: &FaceImage,
        output: &FaceImage,
        edit: &AttributeEdit,
        co_edited: &[AttributeKind],
    ) -> BackendResult<bool> {
        let req = wire::JudgeRequest {
            input_image: wire::encode_image(input)?,
            output_image: wire::encode_image(output)?,
            attribute: edit.kind.to_string(),
            change: edit.change.clone(),
            co_edited: co_edited.iter().map(|k| k.to_string()).collect(),
        };
        let reply: wire::JudgeResponse = self.call(Capability::Judge, &req)?;
        Ok(reply.correct)
    }
}

impl TextCompleter for HttpBackend {
    fn complete(&self, prompt: &str, params: &CompletionParams) -> BackendResult<String> {
        let req = wire::CompleteRequest {
            prompt: prompt.to_string(),
            temperature: params.temperature,
            max_tokens: params.max_tokens,
        };
        let reply: wire::TextResponse = self.call(Capability::Complete, &req)?;
        Ok(reply.text)
    }
}

impl PairedEditor for HttpBackend {
    fn pair_edit(&self, image: &FaceImage, source: &str, target: &str) -> BackendResult<FaceImage> {
        let req = wire::PairEditRequest {
            image: wire::encode_image(image)?,
            source_caption: source.to_string(),
            target_caption: target.to_string(),
        };
        let reply = self.call(Capability::PairEdit, &req)?;
        self.image_reply(Capability::PairEdit, reply)
    }
}
