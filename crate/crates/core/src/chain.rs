//! Step-by-step execution of instruction chains, with optional
//! super-resolution before every step, and the single-shot baseline.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, BackendSet, ImageEditor, SuperResolver};
use crate::imaging::{self, FaceImage, ImagingError};
use crate::instructions::{ChainProvenance, InstructionChain, MultiAttributeInstruction, SingleAttributeInstruction};

pub const TRACE_FILE: &str = "trace.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    Applied,
    BackendError,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditStep {
    /// 1-based.
    pub index: usize,
    pub instruction: SingleAttributeInstruction,
    pub input_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post_sr_ref: Option<String>,
    /// Absent when the step failed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_ref: Option<String>,
    pub wall_time_ms: u64,
    pub status: StepStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Chain,
    SingleShot,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    /// "mock" or the configured endpoints.
    pub backends: String,
    pub sr: bool,
    pub mode: RunMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<ChainProvenance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditTrace {
    pub input_ref: String,
    pub steps: Vec<EditStep>,
    pub final_ref: String,
    pub config_snapshot: ConfigSnapshot,
    /// Every image referenced by the trace, keyed by content id. Persisted
    /// as PNG files beside `trace.json`.
    #[serde(skip)]
    pub image_store: BTreeMap<String, FaceImage>,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed trace: {0}")]
    Format(String),
    #[error("image {0} referenced by the trace is missing")]
    MissingImage(String),
    #[error("image file {file} has content id {actual}")]
    ContentMismatch { file: String, actual: String },
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

/// A step failed; `trace` holds every step up to and including the failed one.
#[derive(Debug, Error)]
#[error("chain aborted at step {step}: {source}")]
pub struct ChainAborted {
    pub step: usize,
    pub trace: Box<EditTrace>,
    #[source]
    pub source: BackendError,
}

impl EditTrace {
    fn start(x0: &FaceImage, config_snapshot: ConfigSnapshot) -> Self {
        let mut trace = Self {
            input_ref: x0.content_id().to_string(),
            steps: Vec::new(),
            final_ref: x0.content_id().to_string(),
            config_snapshot,
            image_store: BTreeMap::new(),
        };
        trace.store(x0);
        trace
    }

    fn store(&mut self, img: &FaceImage) -> String {
        let id = img.content_id().to_string();
        self.image_store.entry(id.clone()).or_insert_with(|| img.clone());
        id
    }

    pub fn image(&self, id: &str) -> Option<&FaceImage> {
        self.image_store.get(id)
    }

    pub fn input_image(&self) -> &FaceImage {
        &self.image_store[&self.input_ref]
    }

    pub fn final_image(&self) -> &FaceImage {
        &self.image_store[&self.final_ref]
    }

    pub fn applied_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.status == StepStatus::Applied).count()
    }

    /// Writes `trace.json` and one PNG per stored image into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), TraceError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| TraceError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        for (id, img) in &self.image_store {
            imaging::save_png(img, dir.join(format!("{id}.png")))?;
        }
        let json = serde_json::to_string_pretty(self).map_err(|e| TraceError::Format(e.to_string()))?;
        let path = dir.join(TRACE_FILE);
        fs::write(&path, json).map_err(io(&path))
    }

    /// Reads a trace written by [`EditTrace::save`], checking that every
    /// referenced image is present and matches its name.
    pub fn load(dir: &Path) -> Result<Self, TraceError> {
        let path = dir.join(TRACE_FILE);
        let text = fs::read_to_string(&path).map_err(|source| TraceError::Io { path, source })?;
        let mut trace: EditTrace = serde_json::from_str(&text).map_err(|e| TraceError::Format(e.to_string()))?;
        for id in trace.referenced_ids() {
            let file = dir.join(format!("{id}.png"));
            if !file.exists() {
                return Err(TraceError::MissingImage(id));
            }
            let img = imaging::load_png(&file)?;
            if img.content_id() != id {
                return Err(TraceError::ContentMismatch {
                    file: file.display().to_string(),
                    actual: img.content_id().to_string(),
                });
            }
            trace.image_store.insert(id, img);
        }
        Ok(trace)
    }

    fn referenced_ids(&self) -> Vec<String> {
        let mut ids = vec![self.input_ref.clone(), self.final_ref.clone()];
        for s in &self.steps {
            ids.push(s.input_ref.clone());
            ids.extend(s.post_sr_ref.clone());
            ids.extend(s.output_ref.clone());
        }
        ids.sort();
        ids.dedup();
        ids
    }
}

/// Runs chains against one editor and, optionally, a super-resolver.
#[derive(Clone, Copy)]
pub struct ChainExecutor<'a> {
    editor: &'a dyn ImageEditor,
    sr: Option<&'a dyn SuperResolver>,
    backends: &'a str,
}

impl<'a> ChainExecutor<'a> {
    pub fn new(editor: &'a dyn ImageEditor, sr: Option<&'a dyn SuperResolver>) -> Self {
        Self {
            editor,
            sr,
            backends: "unspecified",
        }
    }

    pub fn from_backends(set: &'a BackendSet, sr_enabled: bool) -> Self {
        Self {
            editor: set.editor.as_ref(),
            sr: if sr_enabled { Some(set.sr.as_ref()) } else { None },
            backends: &set.description,
        }
    }

    /// Label recorded as the trace's backend description.
    pub fn with_label(mut self, backends: &'a str) -> Self {
        self.backends = backends;
        self
    }

    /// Applies the steps in order. With a super-resolver, each step's input
    /// is upscaled first, including the first step's.
    pub fn run_chain(&self, x0: &FaceImage, chain: &InstructionChain) -> Result<EditTrace, ChainAborted> {
        let snapshot = ConfigSnapshot {
            backends: self.backends.to_string(),
            sr: self.sr.is_some(),
            mode: RunMode::Chain,
            provenance: Some(chain.provenance),
        };
        self.run(x0, &chain.steps, self.sr, snapshot)
    }

    /// The whole compound instruction as one edit, without super-resolution.
    pub fn run_single_shot(
        &self,
        x0: &FaceImage,
        instr: &MultiAttributeInstruction,
    ) -> Result<EditTrace, ChainAborted> {
        let step = SingleAttributeInstruction {
            text: instr.text.clone(),
            edit: None,
        };
        let snapshot = ConfigSnapshot {
            backends: self.backends.to_string(),
            sr: false,
            mode: RunMode::SingleShot,
            provenance: None,
        };
        self.run(x0, std::slice::from_ref(&step), None, snapshot)
    }

    fn run(
        &self,
        x0: &FaceImage,
        steps: &[SingleAttributeInstruction],
        sr: Option<&dyn SuperResolver>,
        snapshot: ConfigSnapshot,
    ) -> Result<EditTrace, ChainAborted> {
        let mut trace = EditTrace::start(x0, snapshot);
        let mut current = x0.clone();
        for (i, instruction) in steps.iter().enumerate() {
            let started = Instant::now();
            let input_ref = current.content_id().to_string();
            let outcome = (|| {
                let prepared = match sr {
                    Some(sr) => Some(sr.upscale(&current)?),
                    None => None,
                };
                let edited = self
                    .editor
                    .edit(prepared.as_ref().unwrap_or(&current), &instruction.text)?;
                Ok::<_, BackendError>((prepared, edited))
            })();
            let wall_time_ms = started.elapsed().as_millis() as u64;
            match outcome {
                Ok((prepared, edited)) => {
                    let post_sr_ref = prepared.as_ref().map(|p| trace.store(p));
                    let output_ref = trace.store(&edited);
                    log::debug!("step {} applied: {} -> {}", i + 1, input_ref, output_ref);
                    trace.steps.push(EditStep {
                        index: i + 1,
                        instruction: instruction.clone(),
                        input_ref,
                        post_sr_ref,
                        output_ref: Some(output_ref.clone()),
                        wall_time_ms,
                        status: StepStatus::Applied,
                        error: None,
                    });
                    trace.final_ref = output_ref;
                    current = edited;
                }
                Err(source) => {
                    log::warn!("step {} failed: {source}", i + 1);
                    trace.steps.push(EditStep {
                        index: i + 1,
                        instruction: instruction.clone(),
                        input_ref,
                        post_sr_ref: None,
                        output_ref: None,
                        wall_time_ms,
                        status: StepStatus::BackendError,
                        error: Some(source.to_string()),
                    });
                    return Err(ChainAborted {
                        step: i + 1,
                        trace: Box::new(trace),
                        source,
                    });
                }
            }
        }
        Ok(trace)
    }
}
