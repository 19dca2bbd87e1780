//! Splitting a compound editing instruction into a chain of
//! single-attribute steps, either by prompting a text completer with a
//! one-shot demonstration or by a deterministic rule-based splitter.

use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::LazyLock;
use thiserror::Error;

use crate::backends::{BackendError, CompletionParams, TextCompleter};
use crate::instructions::{
    AttributeKind, ChainProvenance, InstructionChain, InstructionError, Lexicon, MultiAttributeInstruction,
    SingleAttributeInstruction,
};

const DEFAULT_TEMPLATE: &str = include_str!("../assets/decompose_prompt.toml");

#[derive(Debug, Error)]
pub enum DecompositionError {
    #[error("no list items found in completion")]
    MalformedOutput { raw: String },
    #[error("expected {expected} steps, found {found}")]
    CountMismatch { expected: usize, found: usize },
    #[error("step {index} names {count} attributes: {text:?}")]
    AmbiguousStep { index: usize, count: usize, text: String },
    #[error("decomposition failed after {attempts} attempt(s)")]
    Failed { attempts: u32, last_raw: String },
    #[error("no clause of {0:?} names an attribute")]
    UnsplittableInstruction(String),
    #[error("invalid prompt template: {0}")]
    Template(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Instruction(#[from] InstructionError),
}

impl DecompositionError {
    /// Errors that a fresh completion may fix.
    fn is_retryable(&self) -> bool {
        matches!(
            self,
            DecompositionError::MalformedOutput { .. }
                | DecompositionError::CountMismatch { .. }
                | DecompositionError::AmbiguousStep { .. }
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub demo_input: String,
    pub attribute_hint: String,
    pub demo_output: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub version: u32,
    pub task_description: String,
    pub demonstration: Demonstration,
    pub query_prefix: String,
}

#[derive(Deserialize)]
struct TemplateFile {
    version: u32,
    #[serde(default)]
    task_description: String,
    #[serde(default)]
    query_prefix: String,
    demonstration: DemoFile,
}

#[derive(Deserialize)]
struct DemoFile {
    demo_input: String,
    demo_kinds: Vec<AttributeKind>,
    demo_output: Vec<String>,
}

static DEFAULT: LazyLock<PromptTemplate> =
    LazyLock::new(|| PromptTemplate::from_toml(DEFAULT_TEMPLATE).expect("bundled prompt template is valid"));

/// "The instruction involves N attribute changes: k1, k2".
pub fn attribute_hint(kinds: &[AttributeKind]) -> String {
    let names: Vec<&str> = kinds.iter().map(|k| k.as_str()).collect();
    let noun = if kinds.len() == 1 { "change" } else { "changes" };
    format!(
        "The instruction involves {} attribute {noun}: {}",
        kinds.len(),
        names.join(", ")
    )
}

impl PromptTemplate {
    pub fn default_ref() -> &'static PromptTemplate {
        &DEFAULT
    }

    pub fn from_toml(text: &str) -> Result<Self, DecompositionError> {
        let file: TemplateFile = toml::from_str(text).map_err(|e| DecompositionError::Template(e.to_string()))?;
        let template = Self {
            version: file.version,
            task_description: file.task_description,
            demonstration: Demonstration {
                attribute_hint: attribute_hint(&file.demonstration.demo_kinds),
                demo_input: file.demonstration.demo_input,
                demo_output: file.demonstration.demo_output,
            },
            query_prefix: file.query_prefix,
        };
        template.validate()?;
        Ok(template)
    }

    pub fn load(path: &Path) -> Result<Self, DecompositionError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DecompositionError::Template(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), DecompositionError> {
        if self.demonstration.demo_output.is_empty() {
            return Err(DecompositionError::Template("demo_output is empty".into()));
        }
        if self.demonstration.demo_input.trim().is_empty() {
            return Err(DecompositionError::Template("demo_input is empty".into()));
        }
        Ok(())
    }
}

/// Task description, then the demonstration, then the query ending in
/// "Input: <instruction>\nOutput:".
pub fn build_prompt(instr: &MultiAttributeInstruction, template: &PromptTemplate) -> String {
    let demo = &template.demonstration;
    let mut prompt = String::new();
    if !template.task_description.is_empty() {
        prompt.push_str(&template.task_description);
        prompt.push_str("\n\n");
    }
    prompt.push_str("Input: ");
    prompt.push_str(&demo.demo_input);
    prompt.push('\n');
    prompt.push_str(&demo.attribute_hint);
    prompt.push_str("\nOutput:");
    for (i, line) in demo.demo_output.iter().enumerate() {
        prompt.push_str(&format!("\n{}. {}", i + 1, line));
    }
    prompt.push_str("\n\n");
    if !template.query_prefix.is_empty() {
        prompt.push_str(&template.query_prefix);
        prompt.push('\n');
    }
    prompt.push_str("Input: ");
    prompt.push_str(&instr.text);
    prompt.push_str("\nOutput:");
    prompt
}

static OUTPUT_MARKER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)output\s*:").unwrap());
static ITEM: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^\s*(?:step\s*\d+\s*[:.)]?|\d+\s*[.):]|[-*•+])\s*(.*?)\s*$").unwrap());
static HINT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)attribute changes?\s*:\s*(.*)").unwrap());

fn unquote(s: &str) -> &str {
    s.trim()
        .trim_matches(|c| matches!(c, '"' | '\'' | '“' | '”' | '‘' | '’' | '`'))
        .trim()
}

/// Extracts list items after the last "Output:" marker (or from the whole
/// text when there is none). Each item's edit is filled when it names
/// exactly one attribute and a change for it.
pub fn parse_response(raw: &str, expected_n: Option<usize>) -> Result<InstructionChain, DecompositionError> {
    let body = match OUTPUT_MARKER.find_iter(raw).last() {
        Some(m) => &raw[m.end()..],
        None => raw,
    };
    let items: Vec<&str> = body
        .lines()
        .filter_map(|line| ITEM.captures(line))
        .map(|c| unquote(c.get(1).map_or("", |m| m.as_str())))
        .filter(|t| !t.is_empty())
        .collect();
    if items.is_empty() {
        return Err(DecompositionError::MalformedOutput { raw: raw.to_string() });
    }
    if let Some(expected) = expected_n {
        if items.len() != expected {
            return Err(DecompositionError::CountMismatch {
                expected,
                found: items.len(),
            });
        }
    }
    let steps = items
        .into_iter()
        .map(SingleAttributeInstruction::inferred)
        .collect::<Result<Vec<_>, _>>()?;
    let mut chain = InstructionChain::new(steps, ChainProvenance::Llm)?;
    chain.raw_response = Some(raw.to_string());
    Ok(chain)
}

/// Attribute kinds listed on a hint line ("... attribute changes: a, b"),
/// if the completion echoed one.
pub fn recognized_hint(raw: &str) -> Option<Vec<AttributeKind>> {
    let caps = HINT.captures_iter(raw).last()?;
    let kinds = caps[1]
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter_map(|w| w.trim().to_lowercase().parse::<AttributeKind>().ok())
        .collect();
    Some(kinds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionResult {
    pub chain: InstructionChain,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recognized_hint: Option<Vec<AttributeKind>>,
    pub raw_response: String,
    pub attempts: u32,
}

fn check_steps(chain: &InstructionChain) -> Result<(), DecompositionError> {
    for (index, step) in chain.steps.iter().enumerate() {
        let count = step.kinds().len();
        if count > 1 {
            return Err(DecompositionError::AmbiguousStep {
                index,
                count,
                text: step.text.clone(),
            });
        }
    }
    Ok(())
}

/// Prompts `completer` and parses its reply, retrying unparseable replies
/// up to `max_retries` times. Backend errors are returned immediately.
pub fn decompose_llm(
    instr: &MultiAttributeInstruction,
    completer: &dyn TextCompleter,
    template: &PromptTemplate,
    max_retries: u32,
) -> Result<DecompositionResult, DecompositionError> {
    let prompt = build_prompt(instr, template);
    let expected_n = (!instr.edits.is_empty()).then_some(instr.edits.len());
    let params = CompletionParams::default();
    let mut attempts = 0;
    let mut last_raw = String::new();
    while attempts <= max_retries {
        attempts += 1;
        let raw = completer.complete(&prompt, &params)?;
        let parsed = parse_response(&raw, expected_n).and_then(|chain| check_steps(&chain).map(|_| chain));
        match parsed {
            Ok(mut chain) => {
                fill_ground_truth(&mut chain, instr);
                return Ok(DecompositionResult {
                    recognized_hint: recognized_hint(&raw),
                    chain,
                    raw_response: raw,
                    attempts,
                });
            }
            Err(e) if e.is_retryable() => {
                log::warn!("decomposition attempt {attempts} rejected: {e}");
                last_raw = raw;
            }
            Err(e) => return Err(e),
        }
    }
    Err(DecompositionError::Failed { attempts, last_raw })
}

/// Steps naming a kind that the instruction's ground truth also edits take
/// the ground-truth change.
fn fill_ground_truth(chain: &mut InstructionChain, instr: &MultiAttributeInstruction) {
    for step in &mut chain.steps {
        if let [kind] = step.kinds()[..] {
            if let Some(edit) = instr.edits.iter().find(|e| e.kind == kind) {
                step.edit = Some(edit.clone());
            }
        }
    }
}

/// Splits at "," ";" "and" "then"; fragments naming no attribute are merged
/// into their predecessor. One step per remaining fragment.
pub fn decompose_rule_based(instr: &MultiAttributeInstruction) -> Result<InstructionChain, DecompositionError> {
    let spans = Lexicon::default_ref().attribute_clauses(&instr.text);
    if spans.is_empty() {
        return Err(DecompositionError::UnsplittableInstruction(instr.text.clone()));
    }
    let steps = spans
        .into_iter()
        .map(|span| SingleAttributeInstruction::inferred(&instr.text[span]))
        .collect::<Result<Vec<_>, _>>()?;
    let mut chain = InstructionChain::new(steps, ChainProvenance::RuleBased)?;
    fill_ground_truth(&mut chain, instr);
    Ok(chain)
}
