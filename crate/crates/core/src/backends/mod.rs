//! Model backends.
//!
//! Every external model is reached through one of the capability traits
//! below. [`mock`] implements all of them deterministically in-process,
//! [`http`] implements them over the JSON wire protocol in [`wire`], and
//! [`server`] serves the mock world over that same protocol.

pub mod http;
pub mod mock;
pub mod server;
pub mod wire;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{FaceImage, ImagingError};
use crate::instructions::{AttributeEdit, AttributeKind};

pub use http::{BackendEndpoint, BackendsConfig, HttpBackend};
pub use mock::MockBackends;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    Edit,
    Sr,
    Caption,
    Embed,
    Quality,
    Judge,
    Complete,
    PairEdit,
}

impl Capability {
    pub const ALL: [Capability; 8] = [
        Capability::Edit,
        Capability::Sr,
        Capability::Caption,
        Capability::Embed,
        Capability::Quality,
        Capability::Judge,
        Capability::Complete,
        Capability::PairEdit,
    ];

    pub fn path(self) -> &'static str {
        match self {
            Capability::Edit => "/v1/edit",
            Capability::Sr => "/v1/sr",
            Capability::Caption => "/v1/caption",
            Capability::Embed => "/v1/embed",
            Capability::Quality => "/v1/quality",
            Capability::Judge => "/v1/judge",
            Capability::Complete => "/v1/complete",
            Capability::PairEdit => "/v1/pair_edit",
        }
    }

    pub fn as_str(self) -> &'static str {
        &self.path()[4..]
    }
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("{capability} backend unavailable after {attempts} attempt(s): {message}")]
    Unavailable {
        capability: Capability,
        attempts: u32,
        message: String,
    },
    #[error("{capability} backend rejected the request ({status} {code}): {message}")]
    Rejected {
        capability: Capability,
        status: u16,
        code: String,
        message: String,
    },
    #[error("{capability} protocol error: {message}")]
    Protocol { capability: Capability, message: String },
    #[error("not a synthetic face: {0}")]
    NotSyntheticFace(String),
    #[error("exactly one of text or image must be given")]
    BothOrNeitherInput,
    #[error("invalid backend configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

impl BackendError {
    /// Stable machine-readable code used in wire error bodies.
    pub fn code(&self) -> &'static str {
        match self {
            BackendError::Unavailable { .. } => "unavailable",
            BackendError::Rejected { .. } => "rejected",
            BackendError::Protocol { .. } => "protocol_error",
            BackendError::NotSyntheticFace(_) => "not_synthetic_face",
            BackendError::BothOrNeitherInput => "both_or_neither_input",
            BackendError::Config(_) => "config",
            BackendError::Imaging(_) => "bad_image",
        }
    }

    pub fn is_unavailable(&self) -> bool {
        matches!(self, BackendError::Unavailable { .. })
    }
}

pub type BackendResult<T> = Result<T, BackendError>;

/// Instruction-guided image editor.
pub trait ImageEditor: Send + Sync {
    fn edit(&self, image: &FaceImage, instruction: &str) -> BackendResult<FaceImage>;
}

pub trait SuperResolver: Send + Sync {
    fn upscale(&self, image: &FaceImage) -> BackendResult<FaceImage>;
}

pub trait Captioner: Send + Sync {
    fn caption(&self, image: &FaceImage) -> BackendResult<String>;
}

#[derive(Clone, Copy, Debug)]
pub enum EmbedInput<'a> {
    Text(&'a str),
    Image(&'a FaceImage),
}

/// Unit-norm embedding, or the zero vector when the input carried no signal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub vector: Vec<f64>,
}

impl Embedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn is_no_signal(&self) -> bool {
        self.vector.iter().all(|&v| v == 0.0)
    }

    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Cosine similarity; `None` when either side has no signal or the
    /// dimensions differ.
    pub fn cosine(&self, other: &Embedding) -> Option<f64> {
        if self.dim() != other.dim() || self.is_no_signal() || other.is_no_signal() {
            return None;
        }
        let dot: f64 = self.vector.iter().zip(&other.vector).map(|(a, b)| a * b).sum();
        Some(dot / (self.norm() * other.norm()))
    }
}

pub trait Embedder: Send + Sync {
    fn embed(&self, input: EmbedInput<'_>) -> BackendResult<Embedding>;
}

/// Face quality in `[0, 1]`.
pub trait QualityScorer: Send + Sync {
    fn score(&self, image: &FaceImage) -> BackendResult<f64>;
}

/// Decides whether `edit` was applied correctly between `input` and
/// `output`. Attributes in `co_edited` are expected to change as well and
/// are not counted as side effects.
pub trait AttributeJudge: Send + Sync {
    fn judge(
        &self,
        input: &FaceImage,
        output: &FaceImage,
        edit: &AttributeEdit,
        co_edited: &[AttributeKind],
    ) -> BackendResult<bool>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionParams {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for CompletionParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: 512,
        }
    }
}

pub trait TextCompleter: Send + Sync {
    fn complete(&self, prompt: &str, params: &CompletionParams) -> BackendResult<String>;
}

/// Caption-conditioned editor: reconstructs `image` from `source_caption`
/// and regenerates it under `target_caption`.
pub trait PairedEditor: Send + Sync {
    fn pair_edit(&self, image: &FaceImage, source_caption: &str, target_caption: &str) -> BackendResult<FaceImage>;
}

/// One handle per capability.
#[derive(Clone)]
pub struct BackendSet {
    pub editor: Arc<dyn ImageEditor>,
    pub sr: Arc<dyn SuperResolver>,
    pub captioner: Arc<dyn Captioner>,
    pub embedder: Arc<dyn Embedder>,
    pub quality: Arc<dyn QualityScorer>,
    pub judge: Arc<dyn AttributeJudge>,
    pub completer: Arc<dyn TextCompleter>,
    pub pair_editor: Arc<dyn PairedEditor>,
    /// "mock" or a description of the endpoints, recorded in traces.
    pub description: String,
}

impl fmt::Debug for BackendSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BackendSet")
            .field("description", &self.description)
            .finish_non_exhaustive()
    }
}

impl BackendSet {
    pub fn mock() -> Self {
        let m = Arc::new(MockBackends);
        Self {
            editor: m.clone(),
            sr: m.clone(),
            captioner: m.clone(),
            embedder: m.clone(),
            quality: m.clone(),
            judge: m.clone(),
            completer: m.clone(),
            pair_editor: m,
            description: "mock".into(),
        }
    }

    pub fn http(config: &BackendsConfig) -> BackendResult<Self> {
        let client = |cap: Capability| -> BackendResult<Arc<HttpBackend>> {
            Ok(Arc::new(HttpBackend::new(config.endpoint_for(cap)?)?))
        };
        Ok(Self {
            editor: client(Capability::Edit)?,
            sr: client(Capability::Sr)?,
            captioner: client(Capability::Caption)?,
            embedder: client(Capability::Embed)?,
            quality: client(Capability::Quality)?,
            judge: client(Capability::Judge)?,
            completer: client(Capability::Complete)?,
            pair_editor: client(Capability::PairEdit)?,
            description: config.describe(),
        })
    }

    /// Mock set when `config` is absent or declares `mock = true`.
    pub fn from_config(config: Option<&BackendsConfig>) -> BackendResult<Self> {
        match config {
            Some(c) if !c.mock => Self::http(c),
            _ => Ok(Self::mock()),
        }
    }
}
