//! Chain-of-instruct face editing.
//!
//! A compound face-editing instruction ("make her hair red and add glasses")
//! is decomposed into an ordered chain of single-attribute instructions,
//! either by a text-completion backend prompted with a one-shot template or
//! by a deterministic rule-based splitter. The chain is then executed one
//! step at a time through pluggable editor and super-resolution backends.
//!
//! The crate also builds instruction/input/output triplet datasets by mask
//! compositing, evaluates edited faces with CLIP similarity, Coverage,
//! Preserve-L1 and a face-quality score, and renders ablation reports.
//!
//! Every model is reached through a trait in [`backends`]. A deterministic
//! mock world ([`backends::mock`]) implements all of them in-process and can
//! be served over the same JSON wire protocol the HTTP client speaks.

pub mod backends;
pub mod chain;
pub mod dataset;
pub mod decomposer;
pub mod harness;
pub mod imaging;
pub mod instructions;
pub mod metrics;
pub mod synthetic;

pub use imaging::{FaceImage, RegionMask};
pub use instructions::{
    AttributeEdit, AttributeKind, InstructionChain, MultiAttributeInstruction, SingleAttributeInstruction,
};
